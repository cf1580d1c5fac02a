#include "bdlora/verify.hpp"

#include <fmt/format.h>

#include "bdlora/cost_model.hpp"
#include "bdlora/errors.hpp"

namespace bdlora {

std::string to_string(VerifySchedule s) {
    switch (s) {
        case VerifySchedule::Megatron: return "megatron";
        case VerifySchedule::NfsLora: return "nfs_lora";
        case VerifySchedule::SLora: return "s_lora";
        case VerifySchedule::SLoraMerged: return "s_lora_merged";
        case VerifySchedule::BdLora: return "bd_lora";
    }
    return "unknown";
}

StrategyConfig strategy_config(VerifySchedule s) {
    switch (s) {
        case VerifySchedule::Megatron: return {StrategyKind::BaseOnly};
        case VerifySchedule::NfsLora: return {StrategyKind::NfsLora};
        case VerifySchedule::SLora: return {StrategyKind::SLora, false, false};
        case VerifySchedule::SLoraMerged: return {StrategyKind::SLora, true, true};
        case VerifySchedule::BdLora: return {StrategyKind::BdLora};
    }
    throw ConfigError("unknown schedule");
}

ModuleSpec verify_module(const VerifyOptions& opt, ModuleShape shape) {
    switch (shape) {
        case ModuleShape::BasicMLP: return ModuleSpec::basic_mlp(opt.d_hidden, opt.d_inter);
        case ModuleShape::GluMLP: return ModuleSpec::glu_mlp(opt.d_hidden, opt.d_inter);
        case ModuleShape::AttnProj: return ModuleSpec::attn_proj(opt.d_hidden, opt.d_q, opt.d_kv);
    }
    throw ConfigError("unknown module shape");
}

VerifyCell verify_cell(const VerifyOptions& opt, std::size_t n, ModuleShape shape, std::size_t s,
                       std::uint64_t seed, VerifySchedule schedule) {
    const ModuleSpec spec = verify_module(opt, shape);
    const StrategyConfig config = strategy_config(schedule);
    const BaseWeights weights = random_base_weights(spec, seed);
    const Matrix x = random_matrix(s, spec.d_hidden, seed * 31 + 7);

    DeviceMesh mesh(n);
    const ShardedWeights sharded = shard_weights(spec, weights, n);
    auto run = [&]() -> std::pair<Matrix, ForwardResult> {
        switch (config.kind) {
            case StrategyKind::BaseOnly:
                return {reference_forward(spec, weights, {}, x),
                        run_strategy(mesh, spec, config, sharded, nullptr, x)};
            case StrategyKind::NfsLora:
            case StrategyKind::SLora: {
                const AdapterMap adapters = random_adapters(spec, opt.rank, seed);
                const ShardedAdapterSet set = shard_adapters(spec, adapters, config.kind, n);
                return {reference_forward(spec, weights, adapters, x),
                        run_strategy(mesh, spec, config, sharded, &set, x)};
            }
            case StrategyKind::BdLora: {
                const BdAdapterMap adapters = random_bd_adapters(spec, opt.rank, n, seed);
                const ShardedAdapterSet set = shard_bd_adapters(spec, adapters, n);
                return {reference_forward(spec, weights, expand(adapters), x),
                        run_strategy(mesh, spec, config, sharded, &set, x)};
            }
        }
        throw ConfigError("unknown strategy");
    };
    const auto [expected, got] = run();

    VerifyCell cell{n, shape, s, seed, schedule, max_rel_error(got.output, expected), false, false, {}};
    cell.numeric_ok = cell.max_rel_error <= opt.tolerance;
    try {
        reconcile(got, analytic_costs(spec, config, n, Rational(static_cast<std::int64_t>(opt.rank)), s));
        cell.accounting_ok = true;
    } catch (const ReconcileError& e) {
        cell.detail = e.what();
    }
    return cell;
}

std::vector<VerifyCell> run_verify(const VerifyOptions& opt) {
    if (opt.ns.empty() || opt.shapes.empty() || opt.seq_lens.empty() || opt.seeds.empty()) {
        throw ConfigError("verify needs at least one N, shape, sequence length and seed");
    }
    if (!(opt.tolerance >= 0.0)) throw ConfigError("tolerance must be >= 0");
    std::vector<VerifyCell> cells;
    for (std::size_t n : opt.ns) {
        for (ModuleShape shape : opt.shapes) {
            for (std::size_t s : opt.seq_lens) {
                for (std::uint64_t seed : opt.seeds) {
                    for (auto schedule : {VerifySchedule::Megatron, VerifySchedule::NfsLora, VerifySchedule::SLora,
                                          VerifySchedule::SLoraMerged, VerifySchedule::BdLora}) {
                        cells.push_back(verify_cell(opt, n, shape, s, seed, schedule));
                    }
                }
            }
        }
    }
    return cells;
}

}  // namespace bdlora
