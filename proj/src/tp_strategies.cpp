#include "bdlora/tp_strategies.hpp"

#include <algorithm>
#include <utility>

#include <fmt/format.h>

#include "bdlora/errors.hpp"

namespace bdlora {

std::string to_string(StrategyKind kind) {
    switch (kind) {
        case StrategyKind::BaseOnly: return "base";
        case StrategyKind::NfsLora: return "nfs_lora";
        case StrategyKind::SLora: return "s_lora";
        case StrategyKind::BdLora: return "bd_lora";
    }
    return "unknown";
}

StrategyKind parse_strategy(const std::string& name) {
    if (name == "base" || name == "megatron") return StrategyKind::BaseOnly;
    if (name == "nfs_lora" || name == "nfs") return StrategyKind::NfsLora;
    if (name == "s_lora" || name == "slora") return StrategyKind::SLora;
    if (name == "bd_lora" || name == "bd") return StrategyKind::BdLora;
    throw ConfigError(fmt::format("unknown strategy '{}' (expected base, nfs_lora, s_lora or bd_lora)", name));
}

CollectiveStats operator-(const CollectiveStats& after, const CollectiveStats& before) {
    CollectiveStats diff;
    diff.n_devices = after.n_devices;
    for (const auto& [tag, c] : after.by_tag) {
        const TagCounters b = before.tag(tag);
        TagCounters d{c.all_reduce_calls - b.all_reduce_calls, c.all_gather_calls - b.all_gather_calls,
                      c.all_reduce_elements - b.all_reduce_elements,
                      c.all_gather_elements - b.all_gather_elements, c.fused_markers - b.fused_markers};
        if (d != TagCounters{}) diff.by_tag.emplace(tag, d);
    }
    return diff;
}

DeviceCounters ForwardResult::per_device() const {
    if (devices.empty()) return {};
    for (std::size_t d = 1; d < devices.size(); ++d) {
        if (devices[d] != devices.front()) {
            throw StrategyError(fmt::format("device {} did different LoRA work than device 0", d));
        }
    }
    return devices.front();
}

ShardedWeights shard_weights(const ModuleSpec& spec, const BaseWeights& weights, std::size_t n) {
    validate_weights(spec, weights);
    spec.require_divisible(n);
    ShardedWeights out;
    out.n = n;
    for (const auto& p : projections(spec)) {
        const ShardKind kind = p.parallel == Parallelism::Column ? ShardKind::ColumnSharded : ShardKind::RowSharded;
        out.shards.emplace(p.proj, shard(weights.at(p.proj), {kind, n}));
    }
    return out;
}

namespace {

std::pair<ShardKind, ShardKind> expected_layout(StrategyKind kind, Parallelism parallel) {
    const bool col = parallel == Parallelism::Column;
    switch (kind) {
        case StrategyKind::SLora:
            return {col ? ShardKind::ColumnSharded : ShardKind::RowSharded, ShardKind::ColumnSharded};
        case StrategyKind::NfsLora:
            return col ? std::pair{ShardKind::Replicated, ShardKind::ColumnSharded}
                       : std::pair{ShardKind::RowSharded, ShardKind::Replicated};
        case StrategyKind::BdLora:
            return col ? std::pair{ShardKind::ColumnSharded, ShardKind::BlockDiagonalCompact}
                       : std::pair{ShardKind::BlockDiagonalCompact, ShardKind::RowSharded};
        case StrategyKind::BaseOnly:
            break;
    }
    throw StrategyError("base-only strategy has no adapter layout");
}

std::pair<std::size_t, std::size_t> logical_shape(const std::vector<Matrix>& frags, ShardKind kind,
                                                  std::size_t n) {
    const std::size_t r = frags.front().rows();
    const std::size_t c = frags.front().cols();
    switch (kind) {
        case ShardKind::Replicated: return {r, c};
        case ShardKind::ColumnSharded: return {r, c * n};
        case ShardKind::RowSharded: return {r * n, c};
        case ShardKind::BlockDiagonalCompact: return {r * n, c * n};
    }
    return {r, c};
}

const ShardedLoraFactors* find_factors(const ShardedAdapterSet& set, Projection p) {
    auto it = set.factors.find(p);
    return it == set.factors.end() ? nullptr : &it->second;
}

void validate_sharded_weights(const ModuleSpec& spec, const ShardedWeights& w, std::size_t n) {
    if (w.n != n) throw StrategyError(fmt::format("weights sharded for N={}, mesh has N={}", w.n, n));
    for (const auto& p : projections(spec)) {
        auto it = w.shards.find(p.proj);
        if (it == w.shards.end() || it->second.size() != n) {
            throw StrategyError(fmt::format("projection {} lacks {} weight shards", to_string(p.proj), n));
        }
        const bool col = p.parallel == Parallelism::Column;
        const std::size_t rows = col ? p.d_in : p.d_in / n;
        const std::size_t cols = col ? p.d_out / n : p.d_out;
        for (const auto& s : it->second) {
            if (s.rows() != rows || s.cols() != cols) {
                throw StrategyError(fmt::format("weight shard for {} is {}, Megatron layout needs {}x{}",
                                                to_string(p.proj), s.shape_string(), rows, cols));
            }
        }
    }
}

void validate_sharded_adapters(const ModuleSpec& spec, const ShardedAdapterSet& set, StrategyKind kind,
                               std::size_t n) {
    if (set.kind != kind) {
        throw StrategyError(fmt::format("adapters are laid out for {}, strategy is {}", to_string(set.kind),
                                        to_string(kind)));
    }
    if (set.n != n) throw StrategyError(fmt::format("adapters sharded for N={}, mesh has N={}", set.n, n));
    const auto infos = projections(spec);
    for (const auto& [proj, f] : set.factors) {
        auto info = std::find_if(infos.begin(), infos.end(), [&](const auto& p) { return p.proj == proj; });
        if (info == infos.end()) {
            throw StrategyError(fmt::format("adapter for {} does not belong to this module", to_string(proj)));
        }
        const auto [a_kind, b_kind] = expected_layout(kind, info->parallel);
        if (f.a_layout != a_kind || f.b_layout != b_kind) {
            throw StrategyError(fmt::format("adapter {} has layout A={}, B={}; {} needs A={}, B={}",
                                            to_string(proj), to_string(f.a_layout), to_string(f.b_layout),
                                            to_string(kind), to_string(a_kind), to_string(b_kind)));
        }
        if (f.a.size() != n || f.b.size() != n) {
            throw StrategyError(fmt::format("adapter {} needs {} fragments per factor", to_string(proj), n));
        }
        for (std::size_t d = 1; d < n; ++d) {
            if (f.a[d].rows() != f.a[0].rows() || f.a[d].cols() != f.a[0].cols() ||
                f.b[d].rows() != f.b[0].rows() || f.b[d].cols() != f.b[0].cols()) {
                throw StrategyError(fmt::format("adapter {}: device {} fragments differ in shape",
                                                to_string(proj), d));
            }
        }
        const auto [ar, ac] = logical_shape(f.a, f.a_layout, n);
        const auto [br, bc] = logical_shape(f.b, f.b_layout, n);
        if (ar != info->d_in || bc != info->d_out || ac != br) {
            throw StrategyError(fmt::format("adapter {}: logical A {}x{} / B {}x{} does not fit {}x{}",
                                            to_string(proj), ar, ac, br, bc, info->d_in, info->d_out));
        }
    }
}

std::uint64_t matmul_flops(const Matrix& a, const Matrix& b) {
    return 2ULL * a.rows() * a.cols() * b.cols();
}

/// Executes a module on the mesh. One instance per forward call.
class ModuleExecutor {
public:
    ModuleExecutor(DeviceMesh& mesh, const ModuleSpec& spec, const ShardedWeights& weights,
                   const ShardedAdapterSet* adapters, StrategyKind kind, bool merged_qkv, bool merged_glu)
        : mesh_(mesh),
          spec_(spec),
          weights_(weights),
          adapters_(adapters),
          kind_(kind),
          merged_qkv_(merged_qkv),
          merged_glu_(merged_glu),
          n_(mesh.size()),
          counters_(mesh.size()) {
        validate_sharded_weights(spec, weights, n_);
        if (kind != StrategyKind::BaseOnly) {
            if (adapters == nullptr) throw StrategyError(fmt::format("{} requires adapters", to_string(kind)));
            validate_sharded_adapters(spec, *adapters, kind, n_);
        }
    }

    ForwardResult run(const Matrix& x) {
        if (x.cols() != spec_.d_hidden) {
            throw ShapeError(fmt::format("input is {}, expected {} columns", x.shape_string(), spec_.d_hidden));
        }
        const CollectiveStats before = mesh_.snapshot_stats();
        std::vector<Matrix> hidden;
        Projection second = Projection::W2;
        switch (spec_.shape) {
            case ModuleShape::BasicMLP: {
                auto y = column_stage(x, {Projection::W1}, false);
                for (auto& y1 : y[0]) hidden.push_back(activate(y1, spec_.activation));
                break;
            }
            case ModuleShape::GluMLP: {
                auto y = column_stage(x, {Projection::W1, Projection::W1Hat}, merged_glu_);
                for (std::size_t d = 0; d < n_; ++d) {
                    hidden.push_back(hadamard(activate(y[0][d], spec_.activation), y[1][d]));
                }
                break;
            }
            case ModuleShape::AttnProj: {
                auto y = column_stage(x, {Projection::Q, Projection::K, Projection::V}, merged_qkv_);
                hidden = std::move(y[0]);  // identity token mixing
                second = Projection::O;
                break;
            }
        }
        Matrix out = row_stage(hidden, second);
        return ForwardResult{std::move(out), mesh_.snapshot_stats() - before, counters_};
    }

private:
    const ShardedLoraFactors* lora(Projection p) const {
        return adapters_ == nullptr ? nullptr : find_factors(*adapters_, p);
    }

    Matrix lora_matmul(std::size_t device, const Matrix& a, const Matrix& b) {
        counters_[device].lora_matmul_flops += matmul_flops(a, b);
        Matrix out = matmul(a, b);
        counters_[device].lora_output_elements += out.size();
        return out;
    }

    void count_params(const ShardedLoraFactors& f) {
        for (std::size_t d = 0; d < n_; ++d) counters_[d].lora_param_elements += f.a[d].size() + f.b[d].size();
    }

    /// Output [projection][device] of the column-parallel projections, each
    /// fragment S x d_out/N.
    std::vector<std::vector<Matrix>> column_stage(const Matrix& x, const std::vector<Projection>& projs,
                                                  bool merged) {
        std::vector<std::vector<Matrix>> y(projs.size());
        for (std::size_t k = 0; k < projs.size(); ++k) {
            for (std::size_t d = 0; d < n_; ++d) y[k].push_back(matmul(x, weights_.shards.at(projs[k])[d]));
        }
        if (kind_ == StrategyKind::BaseOnly) return y;

        // z[k][d]: what device d multiplies with its B fragment for projection k.
        std::vector<std::vector<Matrix>> z(projs.size());
        std::vector<std::size_t> gathered;  // projections whose A output must be all-gathered
        for (std::size_t k = 0; k < projs.size(); ++k) {
            const auto* f = lora(projs[k]);
            if (f == nullptr) continue;
            count_params(*f);
            for (std::size_t d = 0; d < n_; ++d) z[k].push_back(lora_matmul(d, x, f->a[d]));
            if (kind_ == StrategyKind::SLora) gathered.push_back(k);
        }

        if (!gathered.empty()) {
            if (merged && gathered.size() > 1) {
                std::vector<Matrix> packed;
                for (std::size_t d = 0; d < n_; ++d) {
                    std::vector<Matrix> parts;
                    for (std::size_t k : gathered) parts.push_back(z[k][d]);
                    packed.push_back(concat_cols(parts));
                }
                Matrix all = mesh_.all_gather_cols(packed, kLoraTag);
                // Layout is device-major: [z_0^k1 z_0^k2 ... | z_1^k1 ...].
                std::size_t offset = 0;
                std::vector<std::vector<Matrix>> pieces(gathered.size());
                for (std::size_t d = 0; d < n_; ++d) {
                    for (std::size_t g = 0; g < gathered.size(); ++g) {
                        const std::size_t w = z[gathered[g]][d].cols();
                        pieces[g].push_back(all.block(0, offset, all.rows(), w));
                        offset += w;
                    }
                }
                for (std::size_t g = 0; g < gathered.size(); ++g) {
                    z[gathered[g]] = std::vector<Matrix>(n_, concat_cols(pieces[g]));
                }
            } else {
                for (std::size_t k : gathered) {
                    z[k] = std::vector<Matrix>(n_, mesh_.all_gather_cols(z[k], kLoraTag));
                }
            }
        }

        for (std::size_t k = 0; k < projs.size(); ++k) {
            const auto* f = lora(projs[k]);
            if (f == nullptr) continue;
            for (std::size_t d = 0; d < n_; ++d) {
                Matrix delta = scale(lora_matmul(d, z[k][d], f->b[d]), f->scale);
                counters_[d].lora_add_flops += delta.size();
                y[k][d] = add(y[k][d], delta);
            }
        }
        return y;
    }

    /// Row-parallel projection on column-sharded input followed by the base all-reduce.
    Matrix row_stage(const std::vector<Matrix>& h, Projection p) {
        std::vector<Matrix> partial;
        for (std::size_t d = 0; d < n_; ++d) partial.push_back(matmul(h[d], weights_.shards.at(p)[d]));
        const auto* f = kind_ == StrategyKind::BaseOnly ? nullptr : lora(p);
        if (f != nullptr) {
            count_params(*f);
            std::vector<Matrix> u;
            for (std::size_t d = 0; d < n_; ++d) u.push_back(lora_matmul(d, h[d], f->a[d]));
            if (kind_ == StrategyKind::SLora) {
                // A is row-sharded, so every device holds a partial sum of the S x r product.
                u = std::vector<Matrix>(n_, mesh_.all_reduce_sum(u, kLoraTag));
            }
            for (std::size_t d = 0; d < n_; ++d) {
                Matrix v = scale(lora_matmul(d, u[d], f->b[d]), f->scale);
                counters_[d].lora_add_flops += v.size();
                if (kind_ == StrategyKind::SLora) {
                    // Column block d of the LoRA output joins the partial sum before the base
                    // all-reduce, which replaces S-LoRA's final all-gather.
                    Matrix merged = partial[d].block(0, d * v.cols(), v.rows(), v.cols());
                    partial[d].set_block(0, d * v.cols(), add(merged, v));
                } else {
                    partial[d] = add(partial[d], v);
                }
            }
            if (kind_ == StrategyKind::SLora) mesh_.mark_fused(kLoraTag);
        }
        return mesh_.all_reduce_sum(partial, kBaseTag);
    }

    DeviceMesh& mesh_;
    const ModuleSpec& spec_;
    const ShardedWeights& weights_;
    const ShardedAdapterSet* adapters_;
    StrategyKind kind_;
    bool merged_qkv_;
    bool merged_glu_;
    std::size_t n_;
    std::vector<DeviceCounters> counters_;
};

ShardedLoraFactors place(const LoraPair& pair, ShardKind a_kind, ShardKind b_kind, std::size_t n) {
    return ShardedLoraFactors{a_kind, b_kind, shard(pair.a, {a_kind, n}), shard(pair.b, {b_kind, n}),
                              pair.scale()};
}

}  // namespace

ShardedAdapterSet shard_adapters(const ModuleSpec& spec, const AdapterMap& adapters, StrategyKind kind,
                                 std::size_t n) {
    if (kind != StrategyKind::SLora && kind != StrategyKind::NfsLora) {
        throw StrategyError(fmt::format("dense adapters cannot be placed for {}", to_string(kind)));
    }
    validate_adapters(spec, adapters);
    spec.require_divisible(n);
    ShardedAdapterSet out{kind, n, {}};
    for (const auto& p : projections(spec)) {
        auto it = adapters.find(p.proj);
        if (it == adapters.end()) continue;
        if (kind == StrategyKind::SLora && it->second.rank() % n != 0) {
            throw DivisibilityError(fmt::format("S-LoRA rank {} not divisible by N={}", it->second.rank(), n));
        }
        const auto [a_kind, b_kind] = expected_layout(kind, p.parallel);
        out.factors.emplace(p.proj, place(it->second, a_kind, b_kind, n));
    }
    return out;
}

ShardedAdapterSet shard_bd_adapters(const ModuleSpec& spec, const BdAdapterMap& adapters, std::size_t n) {
    spec.require_divisible(n);
    ShardedAdapterSet out{StrategyKind::BdLora, n, {}};
    for (const auto& p : projections(spec)) {
        auto it = adapters.find(p.proj);
        if (it == adapters.end()) continue;
        const BdLoraFactors& f = it->second;
        if (f.parallel != p.parallel) {
            throw StrategyError(fmt::format("BD adapter for {} has the wrong block-diagonal factor",
                                            to_string(p.proj)));
        }
        if (f.n_blocks() != n) {
            throw StrategyError(fmt::format("BD adapter for {} has {} blocks, mesh has N={}", to_string(p.proj),
                                            f.n_blocks(), n));
        }
        ShardedLoraFactors s;
        s.scale = f.scale();
        if (p.parallel == Parallelism::Column) {
            s.a_layout = ShardKind::ColumnSharded;
            s.b_layout = ShardKind::BlockDiagonalCompact;
            s.a = shard(f.dense, {ShardKind::ColumnSharded, n});
            s.b = f.compact.blocks();
        } else {
            s.a_layout = ShardKind::BlockDiagonalCompact;
            s.b_layout = ShardKind::RowSharded;
            s.a = f.compact.blocks();
            s.b = shard(f.dense, {ShardKind::RowSharded, n});
        }
        out.factors.emplace(p.proj, std::move(s));
    }
    return out;
}

ForwardResult megatron_forward(DeviceMesh& mesh, const ModuleSpec& spec, const ShardedWeights& weights,
                               const Matrix& x) {
    return ModuleExecutor(mesh, spec, weights, nullptr, StrategyKind::BaseOnly, true, true).run(x);
}

ForwardResult s_lora_forward(DeviceMesh& mesh, const ModuleSpec& spec, const ShardedWeights& weights,
                             const ShardedAdapterSet& adapters, const Matrix& x, bool merged_qkv,
                             bool merged_glu) {
    return ModuleExecutor(mesh, spec, weights, &adapters, StrategyKind::SLora, merged_qkv, merged_glu).run(x);
}

ForwardResult nfs_lora_forward(DeviceMesh& mesh, const ModuleSpec& spec, const ShardedWeights& weights,
                               const ShardedAdapterSet& adapters, const Matrix& x) {
    return ModuleExecutor(mesh, spec, weights, &adapters, StrategyKind::NfsLora, true, true).run(x);
}

ForwardResult bd_lora_forward(DeviceMesh& mesh, const ModuleSpec& spec, const ShardedWeights& weights,
                              const ShardedAdapterSet& adapters, const Matrix& x) {
    return ModuleExecutor(mesh, spec, weights, &adapters, StrategyKind::BdLora, true, true).run(x);
}

ForwardResult run_strategy(DeviceMesh& mesh, const ModuleSpec& spec, const StrategyConfig& config,
                           const ShardedWeights& weights, const ShardedAdapterSet* adapters, const Matrix& x) {
    if (config.kind == StrategyKind::BaseOnly) return megatron_forward(mesh, spec, weights, x);
    return ModuleExecutor(mesh, spec, weights, adapters, config.kind, config.merged_qkv, config.merged_glu)
        .run(x);
}

ForwardResult bd_lora_linear_forward(DeviceMesh& mesh, const Matrix& x, std::span<const Matrix> w_shards,
                                     std::span<const Matrix> a_shards, const BlockDiagonalCompact& b,
                                     double scale_factor) {
    const std::size_t n = mesh.size();
    if (w_shards.size() != n || a_shards.size() != n || b.n_blocks() != n) {
        throw StrategyError(fmt::format("column-parallel layer needs {} shards of W, A and B (got {}, {}, {})", n,
                                        w_shards.size(), a_shards.size(), b.n_blocks()));
    }
    const CollectiveStats before = mesh.snapshot_stats();
    std::vector<DeviceCounters> counters(n);
    std::vector<Matrix> local;
    for (std::size_t d = 0; d < n; ++d) {
        if (w_shards[d].rows() != x.cols() || a_shards[d].rows() != x.cols() ||
            a_shards[d].cols() != b.block_rows() || b.block_cols() != w_shards[d].cols()) {
            throw StrategyError(fmt::format("device {}: W {} / A {} / B block {}x{} do not fit input {}", d,
                                            w_shards[d].shape_string(), a_shards[d].shape_string(),
                                            b.block_rows(), b.block_cols(), x.shape_string()));
        }
        Matrix y = matmul(x, w_shards[d]);
        Matrix z = matmul(x, a_shards[d]);
        Matrix delta = scale(matmul(z, b.block(d)), scale_factor);
        auto& c = counters[d];
        c.lora_matmul_flops = matmul_flops(x, a_shards[d]) + matmul_flops(z, b.block(d));
        c.lora_output_elements = z.size() + delta.size();
        c.lora_param_elements = a_shards[d].size() + b.block(d).size();
        c.lora_add_flops = delta.size();
        local.push_back(add(y, delta));
    }
    Matrix out = mesh.all_gather_cols(local, kBaseTag);
    return ForwardResult{std::move(out), mesh.snapshot_stats() - before, std::move(counters)};
}

}  // namespace bdlora
