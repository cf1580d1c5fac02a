#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <list>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlora/adapter_store.hpp"
#include "bdlora/cost_model.hpp"
#include "bdlora/tp_strategies.hpp"

namespace bdlora {

enum class AdapterPolicy { SingleShared, PerRequestUnique };

std::string to_string(AdapterPolicy p);
AdapterPolicy parse_adapter_policy(const std::string& name);

struct Workload {
    std::size_t input_tokens = 1024;
    std::size_t output_tokens = 128;
    std::size_t batch_size = 1;
    std::size_t total_requests = 1;
    AdapterPolicy adapter_policy = AdapterPolicy::SingleShared;
    ArchSpec arch;
    StrategyConfig strategy{StrategyKind::SLora};
    std::size_t n = 8;
    /// Rank of the adapter actually served (for BD-LoRA: the block-diagonal rank).
    std::size_t rank = 16;

    void validate() const;
    /// Manifest of one served adapter; BaseOnly is treated as no adapter.
    AdapterManifest manifest() const;
};

struct CacheConfig {
    std::size_t capacity = 1;             // adapters held in host memory
    double load_cost_per_param = 0.0;     // s, disk -> host
    double transfer_cost_per_param = 0.0; // s, host -> device
    /// Pre-populate the cache with the first `capacity` adapters.
    bool warm = false;

    void validate() const;
};

/// Host-side LRU of adapter ids. Device residency is the adapter set of the
/// previous batch.
class AdapterCache {
public:
    explicit AdapterCache(CacheConfig config);

    /// Cost of making `adapters` resident on device for the next batch.
    double prepare_batch(const std::vector<std::size_t>& adapters, std::int64_t params_per_adapter);
    void warm(std::size_t n_adapters);

    std::size_t size() const { return lru_.size(); }
    bool contains(std::size_t id) const { return index_.count(id) != 0; }
    std::size_t hits() const { return hits_; }
    std::size_t misses() const { return misses_; }

private:
    void touch(std::size_t id);
    void insert(std::size_t id);

    CacheConfig config_;
    std::list<std::size_t> lru_;  // front = most recent
    std::unordered_map<std::size_t, std::list<std::size_t>::iterator> index_;
    std::unordered_set<std::size_t> on_device_;
    std::size_t hits_ = 0;
    std::size_t misses_ = 0;
};

struct ServingMetrics {
    double throughput = 0.0;               // output tokens / total_time
    double e2e_latency = 0.0;              // mean over batches
    double prefill_latency = 0.0;          // mean time to first token, adapter loading included
    double decode_latency_per_token = 0.0; // mean decode step
    double total_time = 0.0;
    double adapter_load_time = 0.0;        // summed over batches
    std::size_t batches = 0;
};

/// Costs of one forward step over the whole model with S tokens in flight:
/// every layer's attention and MLP, LoRA only on targeted modules.
CostReport step_costs(const Workload& w, std::size_t s);

ServingMetrics simulate(const Workload& w, const HardwareProfile& hw, const CacheConfig& cache);

struct SweepGrid {
    std::vector<std::size_t> ranks;
    std::vector<StrategyKind> strategies;
    std::vector<std::size_t> batch_sizes;
    /// Serve BD-LoRA at the multiple of N whose parameter count best matches
    /// the dense rank of the cell.
    bool match_bd_params = true;
    /// Serve exactly one full batch per cell (total requests = batch size).
    bool one_batch_per_cell = false;
};

struct SweepRow {
    StrategyKind strategy;
    std::size_t rank;            // grid rank
    std::size_t effective_rank;  // rank actually served
    std::size_t batch_size;
    std::size_t total_requests;
    std::int64_t adapter_params;
    ServingMetrics metrics;
};

/// Rows in grid order: strategy-major, then rank, then batch size.
std::vector<SweepRow> sweep(const SweepGrid& grid, const Workload& base, const HardwareProfile& hw,
                            const CacheConfig& cache);

const std::vector<std::string>& sweep_csv_columns();
std::string sweep_csv(const std::vector<SweepRow>& rows, const Workload& base);
nlohmann::ordered_json sweep_json(const std::vector<SweepRow>& rows, const Workload& base);

struct SimConfig {
    Workload workload;
    HardwareProfile hardware;
    CacheConfig cache;
};

/// Keys: "workload" {arch, strategy, n, rank, input_tokens, output_tokens,
/// batch_size, total_requests, adapter_policy, merged_qkv, merged_glu},
/// "hardware" (preset name or object), "cache" {capacity,
/// load_cost_per_param, transfer_cost_per_param, warm}. Missing keys keep defaults.
SimConfig sim_config_from_json(const nlohmann::json& j);
SimConfig load_sim_config(const std::filesystem::path& path);

}  // namespace bdlora
