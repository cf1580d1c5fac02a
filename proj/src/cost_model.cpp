#include "bdlora/cost_model.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "bdlora/adapter_store.hpp"
#include "bdlora/errors.hpp"

namespace bdlora {

using nlohmann::json;
using nlohmann::ordered_json;

CostReport& CostReport::operator+=(const CostReport& o) {
    params_per_device += o.params_per_device;
    flops_per_device += o.flops_per_device;
    add_flops_per_device += o.add_flops_per_device;
    mem_moved_elements_per_device += o.mem_moved_elements_per_device;
    lora_collective_calls += o.lora_collective_calls;
    lora_comm_volume_elements += o.lora_comm_volume_elements;
    base_collective_calls += o.base_collective_calls;
    base_comm_volume_elements += o.base_comm_volume_elements;
    if (latency_proxy_seconds || o.latency_proxy_seconds) {
        latency_proxy_seconds = latency_proxy_seconds.value_or(0.0) + o.latency_proxy_seconds.value_or(0.0);
    }
    return *this;
}

CostReport CostReport::scaled(const Rational& k) const {
    CostReport r = *this;
    r.params_per_device *= k;
    r.flops_per_device *= k;
    r.add_flops_per_device *= k;
    r.mem_moved_elements_per_device *= k;
    r.lora_collective_calls *= k;
    r.lora_comm_volume_elements *= k;
    r.base_collective_calls *= k;
    r.base_comm_volume_elements *= k;
    if (r.latency_proxy_seconds) *r.latency_proxy_seconds *= to_double(k);
    return r;
}

void HardwareProfile::validate() const {
    auto positive = [&](double v, const char* field) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw ConfigError(fmt::format("hardware '{}': {} must be positive, got {}", name, field, v));
        }
    };
    positive(compute_rate, "compute_rate");
    positive(mem_bandwidth, "mem_bandwidth");
    positive(link_bandwidth, "link_bandwidth");
    if (!(collective_start_time >= 0.0) || !std::isfinite(collective_start_time)) {
        throw ConfigError(fmt::format("hardware '{}': collective_start_time must be >= 0, got {}", name,
                                      collective_start_time));
    }
}

HardwareProfile hardware_from_json(const json& j) {
    try {
        HardwareProfile hw;
        hw.name = j.value("name", std::string("custom"));
        hw.compute_rate = j.at("compute_rate").get<double>();
        hw.mem_bandwidth = j.at("mem_bandwidth").get<double>();
        hw.link_bandwidth = j.at("link_bandwidth").get<double>();
        hw.collective_start_time = j.at("collective_start_time").get<double>();
        hw.validate();
        return hw;
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("bad hardware profile: {}", e.what()));
    }
}

ordered_json to_json(const HardwareProfile& hw) {
    return ordered_json{{"name", hw.name},
                        {"compute_rate", hw.compute_rate},
                        {"mem_bandwidth", hw.mem_bandwidth},
                        {"link_bandwidth", hw.link_bandwidth},
                        {"collective_start_time", hw.collective_start_time}};
}

HardwareProfile load_hardware(const std::string& name_or_path) {
    std::filesystem::path path = name_or_path;
    if (!std::filesystem::is_regular_file(path)) path = config_dir() / "hardware" / (name_or_path + ".json");
    std::ifstream in(path);
    if (!in) throw ConfigError(fmt::format("unknown hardware profile '{}' (no preset at {})", name_or_path,
                                           path.string()));
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return hardware_from_json(j);
}

Rational all_gather_volume(std::size_t n, const Rational& gathered) {
    const Rational nn(static_cast<std::int64_t>(n));
    return (nn - 1) / nn * gathered;
}

Rational all_reduce_volume(std::size_t n, const Rational& reduced) {
    const Rational nn(static_cast<std::int64_t>(n));
    return Rational(2) * (nn - 1) / nn * reduced;
}

Rational volume_from_stats(const CollectiveStats& stats, const std::string& tag) {
    const TagCounters c = stats.tag(tag);
    const Rational nn(static_cast<std::int64_t>(stats.n_devices));
    // Raw counters hold N copies of every fragment (all-reduce) or result (all-gather).
    return all_gather_volume(stats.n_devices, Rational(static_cast<std::int64_t>(c.all_gather_elements)) / nn) +
           all_reduce_volume(stats.n_devices, Rational(static_cast<std::int64_t>(c.all_reduce_elements)) / nn);
}

namespace {

Rational q(std::size_t v) { return Rational(static_cast<std::int64_t>(v)); }

bool merged_group(const ModuleSpec& spec, const StrategyConfig& config) {
    if (spec.shape == ModuleShape::GluMLP) return config.merged_glu;
    if (spec.shape == ModuleShape::AttnProj) return config.merged_qkv;
    return false;
}

}  // namespace

CostReport analytic_costs(const ModuleSpec& spec, const StrategyConfig& config, std::size_t n, const Rational& r,
                          std::size_t s) {
    spec.require_divisible(n);
    if (r <= Rational(0) && config.kind != StrategyKind::BaseOnly) throw DomainError("LoRA rank must be positive");
    const Rational N = q(n);
    const Rational S = q(s);
    CostReport c;
    std::size_t column_projections = 0;

    for (const auto& p : projections(spec)) {
        const Rational din = q(p.d_in);
        const Rational dout = q(p.d_out);
        const bool col = p.parallel == Parallelism::Column;
        Rational params, outputs, add;
        switch (config.kind) {
            case StrategyKind::BaseOnly:
                break;
            case StrategyKind::SLora:
                params = (din + dout) * r / N;
                outputs = col ? S * r / N + S * dout / N : S * r + S * dout / N;
                add = S * dout / N;
                break;
            case StrategyKind::NfsLora:
                params = col ? din * r + dout * r / N : din * r / N + dout * r;
                outputs = col ? S * r + S * dout / N : S * r + S * dout;
                add = col ? S * dout / N : S * dout;
                break;
            case StrategyKind::BdLora:
                params = col ? din * r / N + r * dout / (N * N) : din * r / (N * N) + r * dout / N;
                outputs = col ? S * r / N + S * dout / N : S * r / N + S * dout;
                add = col ? S * dout / N : S * dout;
                break;
        }
        // Every LoRA weight element takes part in exactly one multiply-add per token.
        c.params_per_device += params;
        c.flops_per_device += Rational(2) * S * params;
        c.add_flops_per_device += add;
        c.mem_moved_elements_per_device += params + Rational(2) * outputs;
        if (col) ++column_projections;
    }

    if (n == 1) return c;  // a single device launches no collectives
    if (config.kind == StrategyKind::SLora) {
        const std::size_t gathers = merged_group(spec, config) ? 1 : column_projections;
        c.lora_collective_calls = q(gathers + 1);
        c.lora_comm_volume_elements =
            all_gather_volume(n, q(column_projections) * S * r) + all_reduce_volume(n, S * r);
    }
    c.base_collective_calls = Rational(1);
    c.base_comm_volume_elements = all_reduce_volume(n, S * q(spec.d_hidden));
    return c;
}

CostReport base_compute_costs(const ModuleSpec& spec, std::size_t n, std::size_t s) {
    spec.require_divisible(n);
    const Rational N = q(n);
    const Rational S = q(s);
    CostReport c;
    for (const auto& p : projections(spec)) {
        const Rational params = q(p.d_in) * q(p.d_out) / N;
        const Rational outputs = p.parallel == Parallelism::Column ? S * q(p.d_out) / N : S * q(p.d_out);
        c.params_per_device += params;
        c.flops_per_device += Rational(2) * S * params;
        c.mem_moved_elements_per_device += params + Rational(2) * outputs;
    }
    return c;
}

Rational comm_volume_attention(std::size_t n, const Rational& r, std::size_t s) {
    if (n == 0) throw DomainError("N must be >= 1");
    return Rational(5) * (q(n) - 1) * r * q(s) / q(n);
}

Rational comm_volume_base(std::size_t n, std::size_t d_hidden, std::size_t s) {
    if (n == 0) throw DomainError("N must be >= 1");
    return Rational(2) * (q(n) - 1) * q(d_hidden) * q(s) / q(n);
}

Rational comm_overhead_ratio(const Rational& r, std::size_t d_hidden, std::size_t n, std::size_t s) {
    const Rational base = comm_volume_base(n, d_hidden, s);
    if (base == Rational(0)) throw DomainError("overhead ratio is undefined when N = 1 or S = 0");
    return comm_volume_attention(n, r, s) / base;
}

MemDifference mem_cost_difference_bound(std::size_t d_hidden, std::size_t d_inter, std::size_t n,
                                        const Rational& r, std::size_t s) {
    if (n == 0 || d_hidden == 0) throw DomainError("d_H and N must be >= 1");
    const Rational N = q(n);
    const Rational S = q(s);
    const Rational dh = q(d_hidden);
    const Rational di = q(d_inter);
    const Rational rp = r * (dh + di) / (dh + di / N);
    MemDifference m;
    // matmul outputs + all-gather + add_1 + all-reduce + add_2
    m.s_lora_cost = Rational(2) * S * (r / N + di / N + dh / N + r) + Rational(2) * S * r +
                    Rational(2) * S * di / N + Rational(2) * S * r + Rational(2) * S * dh;
    // matmul outputs + add_1 + add_2
    m.bd_cost = Rational(2) * S * (Rational(2) * rp / N + di / N + dh) + Rational(2) * S * di / N +
                Rational(2) * S * dh;
    m.difference = m.bd_cost - m.s_lora_cost;
    m.bound = Rational(2) * S * dh;
    m.in_regime = Rational(3) * r < dh;
    m.within_bound = boost::abs(m.difference) <= m.bound;
    return m;
}

double latency_proxy(const CostReport& c, const HardwareProfile& hw) {
    hw.validate();
    return to_double(c.flops_per_device + c.add_flops_per_device) / hw.compute_rate +
           to_double(c.mem_moved_elements_per_device) / hw.mem_bandwidth +
           to_double(c.lora_collective_calls + c.base_collective_calls) * hw.collective_start_time +
           to_double(c.lora_comm_volume_elements + c.base_comm_volume_elements) / hw.link_bandwidth;
}

CostReport with_latency(CostReport report, const HardwareProfile& hw) {
    report.latency_proxy_seconds = latency_proxy(report, hw);
    return report;
}

CostReport executed_costs(const ForwardResult& result) {
    const DeviceCounters d = result.per_device();
    auto i = [](std::uint64_t v) { return Rational(static_cast<std::int64_t>(v)); };
    CostReport c;
    c.params_per_device = i(d.lora_param_elements);
    c.flops_per_device = i(d.lora_matmul_flops);
    c.add_flops_per_device = i(d.lora_add_flops);
    c.mem_moved_elements_per_device = i(d.mem_moved_elements());
    c.lora_collective_calls = i(result.stats.tag(kLoraTag).calls());
    c.lora_comm_volume_elements = volume_from_stats(result.stats, kLoraTag);
    c.base_collective_calls = i(result.stats.tag(kBaseTag).calls());
    c.base_comm_volume_elements = volume_from_stats(result.stats, kBaseTag);
    return c;
}

std::vector<ReconcileField> compare_costs(const CostReport& e, const CostReport& a) {
    return {
        {"params_per_device", e.params_per_device, a.params_per_device},
        {"flops_per_device", e.flops_per_device, a.flops_per_device},
        {"add_flops_per_device", e.add_flops_per_device, a.add_flops_per_device},
        {"mem_moved_elements_per_device", e.mem_moved_elements_per_device, a.mem_moved_elements_per_device},
        {"lora_collective_calls", e.lora_collective_calls, a.lora_collective_calls},
        {"lora_comm_volume_elements", e.lora_comm_volume_elements, a.lora_comm_volume_elements},
        {"base_collective_calls", e.base_collective_calls, a.base_collective_calls},
        {"base_comm_volume_elements", e.base_comm_volume_elements, a.base_comm_volume_elements},
    };
}

std::vector<ReconcileField> reconcile(const ForwardResult& executed, const CostReport& analytic) {
    auto fields = compare_costs(executed_costs(executed), analytic);
    std::string bad;
    for (const auto& f : fields) {
        if (f.matches()) continue;
        bad += fmt::format("{}{}: executed {} vs analytic {}", bad.empty() ? "" : "; ", f.name,
                           to_string(f.executed), to_string(f.analytic));
    }
    if (!bad.empty()) throw ReconcileError(bad);
    return fields;
}

std::string format_count(const Rational& v) {
    if (is_integer(v)) return to_string(v);
    return fmt::format("{:.6f}", to_double(v));
}

namespace {

ordered_json count_json(const Rational& v) {
    if (is_integer(v)) return v.numerator();
    return to_double(v);
}

}  // namespace

ordered_json to_json(const CostReport& c) {
    ordered_json j{{"params_per_device", count_json(c.params_per_device)},
                   {"flops_per_device", count_json(c.flops_per_device)},
                   {"add_flops_per_device", count_json(c.add_flops_per_device)},
                   {"mem_moved_elements_per_device", count_json(c.mem_moved_elements_per_device)},
                   {"lora_collective_calls", count_json(c.lora_collective_calls)},
                   {"lora_comm_volume_elements", count_json(c.lora_comm_volume_elements)},
                   {"base_collective_calls", count_json(c.base_collective_calls)},
                   {"base_comm_volume_elements", count_json(c.base_comm_volume_elements)}};
    j["latency_proxy_seconds"] = c.latency_proxy_seconds ? ordered_json(*c.latency_proxy_seconds) : ordered_json();
    return j;
}

const std::vector<std::string>& cost_csv_columns() {
    static const std::vector<std::string> cols{
        "params_per_device",         "flops_per_device",          "add_flops_per_device",
        "mem_moved_elements_per_device", "lora_collective_calls", "lora_comm_volume_elements",
        "base_collective_calls",     "base_comm_volume_elements", "latency_proxy_seconds"};
    return cols;
}

std::vector<std::string> cost_csv_values(const CostReport& c) {
    return {format_count(c.params_per_device),
            format_count(c.flops_per_device),
            format_count(c.add_flops_per_device),
            format_count(c.mem_moved_elements_per_device),
            format_count(c.lora_collective_calls),
            format_count(c.lora_comm_volume_elements),
            format_count(c.base_collective_calls),
            format_count(c.base_comm_volume_elements),
            c.latency_proxy_seconds ? fmt::format("{:.9e}", *c.latency_proxy_seconds) : std::string()};
}

}  // namespace bdlora
