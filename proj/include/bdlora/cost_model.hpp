#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlora/device_mesh.hpp"
#include "bdlora/lora_model.hpp"
#include "bdlora/rational.hpp"
#include "bdlora/tp_strategies.hpp"

namespace bdlora {

/// Per-device costs of one module forward. Counts are rational because the
/// parameter-matched BD rank generally is.
struct CostReport {
    Rational params_per_device{0};
    Rational flops_per_device{0};  // matmul FLOPs only
    Rational add_flops_per_device{0};
    /// Weight elements loaded plus twice the matmul output elements (write + read back).
    Rational mem_moved_elements_per_device{0};
    Rational lora_collective_calls{0};
    Rational lora_comm_volume_elements{0};
    Rational base_collective_calls{0};
    Rational base_comm_volume_elements{0};
    std::optional<double> latency_proxy_seconds;

    CostReport& operator+=(const CostReport& other);
    CostReport scaled(const Rational& k) const;
    friend bool operator==(const CostReport&, const CostReport&) = default;
};

struct HardwareProfile {
    std::string name = "custom";
    double compute_rate = 1.0;           // FLOP/s
    double mem_bandwidth = 1.0;          // elements/s
    double link_bandwidth = 1.0;         // elements/s
    double collective_start_time = 0.0;  // s per call

    void validate() const;
};

HardwareProfile hardware_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const HardwareProfile& hw);
/// Preset name (a100-like, a10g-like) or path to a JSON file.
HardwareProfile load_hardware(const std::string& name_or_path);

/// LoRA-path costs of `config.kind` on one module, plus the base all-reduce.
/// Every projection of the module is assumed adapted. Latency is left unset.
CostReport analytic_costs(const ModuleSpec& spec, const StrategyConfig& config, std::size_t n, const Rational& r,
                          std::size_t s);

/// Base-model matmul costs (identical for all strategies); no collectives.
CostReport base_compute_costs(const ModuleSpec& spec, std::size_t n, std::size_t s);

/// Ring-convention volumes of one collective.
Rational all_gather_volume(std::size_t n, const Rational& gathered_elements);
Rational all_reduce_volume(std::size_t n, const Rational& reduced_elements);

/// Converts raw mesh counters of `tag` into the ring convention.
Rational volume_from_stats(const CollectiveStats& stats, const std::string& tag);

/// Extra S-LoRA volume of one attention block: 5 (N-1) r S / N.
Rational comm_volume_attention(std::size_t n, const Rational& r, std::size_t s);
/// Base all-reduce volume: 2 (N-1) d_H S / N.
Rational comm_volume_base(std::size_t n, std::size_t d_hidden, std::size_t s);
/// Ratio of the two volumes above; throws DomainError when N = 1 (both vanish).
Rational comm_overhead_ratio(const Rational& r, std::size_t d_hidden, std::size_t n, std::size_t s);

struct MemDifference {
    Rational s_lora_cost;
    Rational bd_cost;
    Rational difference;  // bd_cost - s_lora_cost
    Rational bound;       // 2 S d_H
    /// 3r < d_H, under which |difference| <= bound is guaranteed.
    bool in_regime;
    bool within_bound;
};

/// Intermediate-result memory traffic of a basic MLP under S-LoRA (rank r) and
/// BD-LoRA (rank r' = exact parameter match), including all-gather, all-reduce
/// and the two adds.
MemDifference mem_cost_difference_bound(std::size_t d_hidden, std::size_t d_inter, std::size_t n,
                                        const Rational& r, std::size_t s);

/// (flops + adds) / compute + mem / bandwidth + calls * start + volume / link.
double latency_proxy(const CostReport& report, const HardwareProfile& hw);
CostReport with_latency(CostReport report, const HardwareProfile& hw);

/// Builds a report from what a forward call actually did on device 0.
CostReport executed_costs(const ForwardResult& result);

struct ReconcileField {
    std::string name;
    Rational executed;
    Rational analytic;
    bool matches() const { return executed == analytic; }
};

std::vector<ReconcileField> compare_costs(const CostReport& executed, const CostReport& analytic);
/// Throws ReconcileError naming every divergent field.
std::vector<ReconcileField> reconcile(const ForwardResult& executed, const CostReport& analytic);

nlohmann::ordered_json to_json(const CostReport& report);

/// Fixed CSV column order; `prefix_columns` are prepended by callers.
const std::vector<std::string>& cost_csv_columns();
std::vector<std::string> cost_csv_values(const CostReport& report);

/// Exact integers print as such, other rationals as decimals.
std::string format_count(const Rational& q);

}  // namespace bdlora
