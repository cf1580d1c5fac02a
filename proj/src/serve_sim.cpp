#include "bdlora/serve_sim.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "bdlora/errors.hpp"

namespace bdlora {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(AdapterPolicy p) {
    return p == AdapterPolicy::SingleShared ? "single_shared" : "per_request_unique";
}

AdapterPolicy parse_adapter_policy(const std::string& name) {
    if (name == "single_shared" || name == "shared") return AdapterPolicy::SingleShared;
    if (name == "per_request_unique" || name == "unique") return AdapterPolicy::PerRequestUnique;
    throw ConfigError(fmt::format("unknown adapter policy '{}' (expected single_shared or per_request_unique)", name));
}

void Workload::validate() const {
    if (input_tokens == 0 || output_tokens == 0 || batch_size == 0 || total_requests == 0 || n == 0 || rank == 0) {
        throw ConfigError("workload counts (tokens, batch size, requests, N, rank) must be >= 1");
    }
    arch.validate();
    attn_module(arch).require_divisible(n);
    mlp_module(arch).require_divisible(n);
    if (strategy.kind == StrategyKind::SLora && rank % n != 0) {
        throw DivisibilityError(fmt::format("S-LoRA shards the rank: {} is not divisible by N={}", rank, n));
    }
    if (strategy.kind != StrategyKind::BaseOnly) manifest().validate();
}

AdapterManifest Workload::manifest() const {
    AdapterManifest m;
    m.arch = arch;
    m.rank = rank;
    if (strategy.kind == StrategyKind::BdLora) {
        m.method = AdapterMethod::BlockDiagonal;
        m.n = n;
        m.scaling_mode = ScalingMode::RsLoRABlockDiag;
    }
    return m;
}

void CacheConfig::validate() const {
    if (capacity == 0) throw ConfigError("adapter cache capacity must be >= 1");
    if (load_cost_per_param < 0.0 || transfer_cost_per_param < 0.0) {
        throw ConfigError("adapter load costs must be >= 0");
    }
}

AdapterCache::AdapterCache(CacheConfig config) : config_(config) { config_.validate(); }

void AdapterCache::touch(std::size_t id) {
    auto it = index_.at(id);
    lru_.splice(lru_.begin(), lru_, it);
}

void AdapterCache::insert(std::size_t id) {
    if (lru_.size() == config_.capacity) {
        index_.erase(lru_.back());
        lru_.pop_back();
    }
    lru_.push_front(id);
    index_[id] = lru_.begin();
}

void AdapterCache::warm(std::size_t n_adapters) {
    const std::size_t count = std::min(n_adapters, config_.capacity);
    for (std::size_t id = count; id-- > 0;) {
        if (!contains(id)) insert(id);
    }
}

double AdapterCache::prepare_batch(const std::vector<std::size_t>& adapters, std::int64_t params_per_adapter) {
    const double params = static_cast<double>(params_per_adapter);
    double cost = 0.0;
    std::unordered_set<std::size_t> next;
    for (std::size_t id : adapters) {
        if (!next.insert(id).second) continue;
        if (contains(id)) {
            ++hits_;
            touch(id);
            if (on_device_.count(id) == 0) cost += config_.transfer_cost_per_param * params;
        } else {
            ++misses_;
            insert(id);
            cost += (config_.load_cost_per_param + config_.transfer_cost_per_param) * params;
        }
    }
    on_device_ = std::move(next);
    return cost;
}

CostReport step_costs(const Workload& w, std::size_t s) {
    CostReport step;
    const StrategyConfig base_only{StrategyKind::BaseOnly};
    const Rational r(static_cast<std::int64_t>(w.rank));
    for (const auto& [spec, targeted] :
         {std::pair{attn_module(w.arch), w.arch.target_attn}, std::pair{mlp_module(w.arch), w.arch.target_mlp}}) {
        step += analytic_costs(spec, targeted ? w.strategy : base_only, w.n, r, s);
        step += base_compute_costs(spec, w.n, s);
    }
    return step.scaled(Rational(static_cast<std::int64_t>(w.arch.n_layers)));
}

ServingMetrics simulate(const Workload& w, const HardwareProfile& hw, const CacheConfig& cache_config) {
    w.validate();
    hw.validate();
    AdapterCache cache(cache_config);
    const bool adapted = w.strategy.kind != StrategyKind::BaseOnly;
    const std::int64_t params = adapted ? count_params(w.manifest()) : 0;
    const std::size_t distinct = w.adapter_policy == AdapterPolicy::SingleShared ? 1 : w.total_requests;
    if (cache_config.warm) cache.warm(distinct);

    ServingMetrics m;
    double prefill_sum = 0.0;
    double decode_sum = 0.0;
    std::size_t decode_steps = 0;
    for (std::size_t first = 0; first < w.total_requests; first += w.batch_size) {
        const std::size_t bs = std::min(w.batch_size, w.total_requests - first);
        double load = 0.0;
        if (adapted) {
            std::vector<std::size_t> ids;
            for (std::size_t i = 0; i < bs; ++i) {
                ids.push_back(w.adapter_policy == AdapterPolicy::SingleShared ? 0 : first + i);
            }
            load = cache.prepare_batch(ids, params);
        }
        const double prefill = load + latency_proxy(step_costs(w, bs * w.input_tokens), hw);
        const double decode = latency_proxy(step_costs(w, bs), hw);
        const double batch_time = prefill + decode * static_cast<double>(w.output_tokens);
        prefill_sum += prefill;
        decode_sum += decode * static_cast<double>(w.output_tokens);
        decode_steps += w.output_tokens;
        m.adapter_load_time += load;
        m.total_time += batch_time;
        ++m.batches;
    }
    const double batches = static_cast<double>(m.batches);
    m.prefill_latency = prefill_sum / batches;
    m.e2e_latency = m.total_time / batches;
    m.decode_latency_per_token = decode_sum / static_cast<double>(decode_steps);
    m.throughput = static_cast<double>(w.total_requests * w.output_tokens) / m.total_time;
    return m;
}

std::vector<SweepRow> sweep(const SweepGrid& grid, const Workload& base, const HardwareProfile& hw,
                            const CacheConfig& cache) {
    std::vector<SweepRow> rows;
    for (StrategyKind kind : grid.strategies) {
        for (std::size_t rank : grid.ranks) {
            for (std::size_t bs : grid.batch_sizes) {
                Workload w = base;
                w.strategy.kind = kind;
                w.batch_size = bs;
                w.rank = rank;
                if (grid.one_batch_per_cell) w.total_requests = bs;
                if (kind == StrategyKind::BdLora && grid.match_bd_params) {
                    w.rank = matched_bd_rank(w.arch, w.n, rank);
                }
                try {
                    const auto metrics = simulate(w, hw, cache);
                    const std::int64_t params = kind == StrategyKind::BaseOnly ? 0 : count_params(w.manifest());
                    rows.push_back({kind, rank, w.rank, bs, w.total_requests, params, metrics});
                } catch (const Error& e) {
                    throw ConfigError(fmt::format("sweep cell ({}, r={}, BS={}): {}", to_string(kind), rank, bs,
                                                  e.what()));
                }
            }
        }
    }
    return rows;
}

const std::vector<std::string>& sweep_csv_columns() {
    static const std::vector<std::string> cols{
        "arch",          "strategy",       "n",
        "rank",          "effective_rank", "adapter_params",
        "batch_size",    "input_tokens",   "output_tokens",
        "total_requests", "throughput_tokens_per_s", "e2e_latency_s",
        "prefill_latency_s", "decode_latency_per_token_s", "total_time_s"};
    return cols;
}

std::string sweep_csv(const std::vector<SweepRow>& rows, const Workload& base) {
    std::ostringstream out;
    const auto& cols = sweep_csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& r : rows) {
        out << fmt::format("{},{},{},{},{},{},{},{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n", base.arch.name,
                           to_string(r.strategy), base.n, r.rank, r.effective_rank, r.adapter_params, r.batch_size,
                           base.input_tokens, base.output_tokens, r.total_requests, r.metrics.throughput,
                           r.metrics.e2e_latency, r.metrics.prefill_latency, r.metrics.decode_latency_per_token,
                           r.metrics.total_time);
    }
    return out.str();
}

ordered_json sweep_json(const std::vector<SweepRow>& rows, const Workload& base) {
    ordered_json out = ordered_json::array();
    for (const auto& r : rows) {
        out.push_back(ordered_json{{"arch", base.arch.name},
                                   {"strategy", to_string(r.strategy)},
                                   {"n", base.n},
                                   {"rank", r.rank},
                                   {"effective_rank", r.effective_rank},
                                   {"adapter_params", r.adapter_params},
                                   {"batch_size", r.batch_size},
                                   {"input_tokens", base.input_tokens},
                                   {"output_tokens", base.output_tokens},
                                   {"total_requests", r.total_requests},
                                   {"throughput_tokens_per_s", r.metrics.throughput},
                                   {"e2e_latency_s", r.metrics.e2e_latency},
                                   {"prefill_latency_s", r.metrics.prefill_latency},
                                   {"decode_latency_per_token_s", r.metrics.decode_latency_per_token},
                                   {"total_time_s", r.metrics.total_time}});
    }
    return out;
}

SimConfig sim_config_from_json(const json& j) {
    SimConfig c;
    c.workload.arch = load_arch("llama3.1-8b");
    try {
        if (j.contains("workload")) {
            const auto& w = j.at("workload");
            if (w.contains("arch")) {
                c.workload.arch = w.at("arch").is_string() ? load_arch(w.at("arch").get<std::string>())
                                                           : arch_from_json(w.at("arch"));
            }
            if (w.contains("strategy")) c.workload.strategy.kind = parse_strategy(w.at("strategy").get<std::string>());
            c.workload.strategy.merged_qkv = w.value("merged_qkv", c.workload.strategy.merged_qkv);
            c.workload.strategy.merged_glu = w.value("merged_glu", c.workload.strategy.merged_glu);
            c.workload.n = w.value("n", c.workload.n);
            c.workload.rank = w.value("rank", c.workload.rank);
            c.workload.input_tokens = w.value("input_tokens", c.workload.input_tokens);
            c.workload.output_tokens = w.value("output_tokens", c.workload.output_tokens);
            c.workload.batch_size = w.value("batch_size", c.workload.batch_size);
            c.workload.total_requests = w.value("total_requests", c.workload.total_requests);
            if (w.contains("adapter_policy")) {
                c.workload.adapter_policy = parse_adapter_policy(w.at("adapter_policy").get<std::string>());
            }
        }
        if (j.contains("hardware")) {
            const auto& h = j.at("hardware");
            c.hardware = h.is_string() ? load_hardware(h.get<std::string>()) : hardware_from_json(h);
        } else {
            c.hardware = load_hardware("a100-like");
        }
        if (j.contains("cache")) {
            const auto& k = j.at("cache");
            c.cache.capacity = k.value("capacity", c.cache.capacity);
            c.cache.load_cost_per_param = k.value("load_cost_per_param", c.cache.load_cost_per_param);
            c.cache.transfer_cost_per_param = k.value("transfer_cost_per_param", c.cache.transfer_cost_per_param);
            c.cache.warm = k.value("warm", c.cache.warm);
        }
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("bad simulation config: {}", e.what()));
    }
    c.cache.validate();
    return c;
}

SimConfig load_sim_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(fmt::format("cannot read simulation config {}", path.string()));
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return sim_config_from_json(j);
}

}  // namespace bdlora
