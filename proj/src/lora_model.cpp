#include "bdlora/lora_model.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "bdlora/errors.hpp"

namespace bdlora {

std::string to_string(ModuleShape shape) {
    switch (shape) {
        case ModuleShape::BasicMLP: return "basic";
        case ModuleShape::GluMLP: return "glu";
        case ModuleShape::AttnProj: return "attn";
    }
    return "unknown";
}

ModuleShape parse_module_shape(const std::string& name) {
    if (name == "basic" || name == "basic_mlp") return ModuleShape::BasicMLP;
    if (name == "glu" || name == "glu_mlp") return ModuleShape::GluMLP;
    if (name == "attn" || name == "attn_proj") return ModuleShape::AttnProj;
    throw ConfigError(fmt::format("unknown module shape '{}' (expected basic, glu or attn)", name));
}

std::string to_string(Projection p) {
    switch (p) {
        case Projection::W1: return "w1";
        case Projection::W1Hat: return "w1_hat";
        case Projection::W2: return "w2";
        case Projection::Q: return "q";
        case Projection::K: return "k";
        case Projection::V: return "v";
        case Projection::O: return "o";
    }
    return "unknown";
}

std::string to_string(ScalingMode mode) {
    switch (mode) {
        case ScalingMode::Standard: return "standard";
        case ScalingMode::RsLoRA: return "rslora";
        case ScalingMode::RsLoRABlockDiag: return "rslora_bd";
    }
    return "unknown";
}

ScalingMode parse_scaling_mode(const std::string& name) {
    if (name == "standard") return ScalingMode::Standard;
    if (name == "rslora") return ScalingMode::RsLoRA;
    if (name == "rslora_bd") return ScalingMode::RsLoRABlockDiag;
    throw ConfigError(fmt::format("unknown scaling mode '{}'", name));
}

ModuleSpec ModuleSpec::basic_mlp(std::size_t d_hidden, std::size_t d_inter, ActivationKind act) {
    return {ModuleShape::BasicMLP, d_hidden, d_inter, 1, 1, act};
}

ModuleSpec ModuleSpec::glu_mlp(std::size_t d_hidden, std::size_t d_inter, ActivationKind act) {
    return {ModuleShape::GluMLP, d_hidden, d_inter, 1, 1, act};
}

ModuleSpec ModuleSpec::attn_proj(std::size_t d_hidden, std::size_t d_q, std::size_t d_kv) {
    return {ModuleShape::AttnProj, d_hidden, 1, d_q, d_kv, ActivationKind::Identity};
}

void ModuleSpec::require_divisible(std::size_t n) const {
    if (n == 0) throw DivisibilityError("device count must be >= 1");
    for (const auto& p : projections(*this)) {
        const std::size_t sharded = p.parallel == Parallelism::Column ? p.d_out : p.d_in;
        if (sharded % n != 0) {
            throw DivisibilityError(fmt::format("projection {}: dimension {} not divisible by N={}",
                                                to_string(p.proj), sharded, n));
        }
    }
}

std::vector<ProjectionInfo> projections(const ModuleSpec& spec) {
    if (spec.d_hidden == 0) throw ShapeError("d_hidden must be >= 1");
    switch (spec.shape) {
        case ModuleShape::BasicMLP:
            return {{Projection::W1, spec.d_hidden, spec.d_inter, Parallelism::Column},
                    {Projection::W2, spec.d_inter, spec.d_hidden, Parallelism::Row}};
        case ModuleShape::GluMLP:
            return {{Projection::W1, spec.d_hidden, spec.d_inter, Parallelism::Column},
                    {Projection::W1Hat, spec.d_hidden, spec.d_inter, Parallelism::Column},
                    {Projection::W2, spec.d_inter, spec.d_hidden, Parallelism::Row}};
        case ModuleShape::AttnProj:
            return {{Projection::Q, spec.d_hidden, spec.d_q, Parallelism::Column},
                    {Projection::K, spec.d_hidden, spec.d_kv, Parallelism::Column},
                    {Projection::V, spec.d_hidden, spec.d_kv, Parallelism::Column},
                    {Projection::O, spec.d_q, spec.d_hidden, Parallelism::Row}};
    }
    throw ConfigError("unknown module shape");
}

double scaling_factor(ScalingMode mode, double alpha, std::size_t rank, std::size_t n_blocks) {
    if (rank == 0) throw DomainError("LoRA rank must be >= 1");
    switch (mode) {
        case ScalingMode::Standard:
            return alpha / static_cast<double>(rank);
        case ScalingMode::RsLoRA:
            return alpha / std::sqrt(static_cast<double>(rank));
        case ScalingMode::RsLoRABlockDiag:
            if (n_blocks == 0 || rank % n_blocks != 0) {
                throw DomainError(fmt::format("rank {} is not divisible by N={}", rank, n_blocks));
            }
            return alpha / std::sqrt(static_cast<double>(rank / n_blocks));
    }
    throw DomainError("unknown scaling mode");
}

std::size_t BdLoraFactors::rank() const {
    // Column side: B blocks are (r/N) x (d_out/N). Row side: A blocks are (d_in/N) x (r/N).
    return parallel == Parallelism::Column ? compact.logical_rows() : compact.logical_cols();
}

LoraPair BdLoraFactors::to_dense() const {
    if (parallel == Parallelism::Column) {
        return LoraPair{dense, bd_expand(compact), alpha, mode, n_blocks()};
    }
    return LoraPair{bd_expand(compact), dense, alpha, mode, n_blocks()};
}

AdapterMap expand(const BdAdapterMap& adapters) {
    AdapterMap out;
    for (const auto& [proj, f] : adapters) out.emplace(proj, f.to_dense());
    return out;
}

Matrix lora_linear(const Matrix& x, const Matrix& w, const LoraPair* pair) {
    Matrix y = matmul(x, w);
    if (pair == nullptr) return y;
    if (pair->a.rows() != w.rows() || pair->b.cols() != w.cols() || pair->a.cols() != pair->b.rows()) {
        throw ShapeError(fmt::format("adapter A {} / B {} does not fit weight {}", pair->a.shape_string(),
                                     pair->b.shape_string(), w.shape_string()));
    }
    return add(y, scale(matmul(matmul(x, pair->a), pair->b), pair->scale()));
}

void validate_weights(const ModuleSpec& spec, const BaseWeights& weights) {
    const auto infos = projections(spec);
    if (weights.size() != infos.size()) {
        throw ConfigError(fmt::format("{} module expects {} weight matrices, got {}", to_string(spec.shape),
                                      infos.size(), weights.size()));
    }
    for (const auto& p : infos) {
        auto it = weights.find(p.proj);
        if (it == weights.end()) {
            throw ConfigError(fmt::format("missing weight for projection {}", to_string(p.proj)));
        }
        if (it->second.rows() != p.d_in || it->second.cols() != p.d_out) {
            throw ShapeError(fmt::format("weight {} is {}, expected {}x{}", to_string(p.proj),
                                         it->second.shape_string(), p.d_in, p.d_out));
        }
    }
}

void validate_adapters(const ModuleSpec& spec, const AdapterMap& adapters) {
    const auto infos = projections(spec);
    for (const auto& [proj, pair] : adapters) {
        auto it = std::find_if(infos.begin(), infos.end(), [&](const auto& p) { return p.proj == proj; });
        if (it == infos.end()) {
            throw ConfigError(fmt::format("adapter key {} is not a projection of a {} module",
                                          to_string(proj), to_string(spec.shape)));
        }
        if (pair.a.rows() != it->d_in || pair.b.cols() != it->d_out || pair.a.cols() != pair.b.rows()) {
            throw ShapeError(fmt::format("adapter {}: A {} / B {} does not fit {}x{}", to_string(proj),
                                         pair.a.shape_string(), pair.b.shape_string(), it->d_in, it->d_out));
        }
    }
}

namespace {

const LoraPair* find_adapter(const AdapterMap& adapters, Projection p) {
    auto it = adapters.find(p);
    return it == adapters.end() ? nullptr : &it->second;
}

}  // namespace

Matrix reference_forward(const ModuleSpec& spec, const BaseWeights& weights, const AdapterMap& adapters,
                         const Matrix& x) {
    validate_weights(spec, weights);
    validate_adapters(spec, adapters);
    if (x.cols() != spec.d_hidden) {
        throw ShapeError(fmt::format("input is {}, expected {} columns", x.shape_string(), spec.d_hidden));
    }
    auto linear = [&](const Matrix& in, Projection p) {
        return lora_linear(in, weights.at(p), find_adapter(adapters, p));
    };
    switch (spec.shape) {
        case ModuleShape::BasicMLP: {
            Matrix h = activate(linear(x, Projection::W1), spec.activation);
            return linear(h, Projection::W2);
        }
        case ModuleShape::GluMLP: {
            Matrix h = hadamard(activate(linear(x, Projection::W1), spec.activation),
                                linear(x, Projection::W1Hat));
            return linear(h, Projection::W2);
        }
        case ModuleShape::AttnProj: {
            Matrix q = linear(x, Projection::Q);
            // K and V feed token mixing, which is the identity on q here.
            (void)linear(x, Projection::K);
            (void)linear(x, Projection::V);
            return linear(q, Projection::O);
        }
    }
    throw ConfigError("unknown module shape");
}

BaseWeights random_base_weights(const ModuleSpec& spec, std::uint64_t seed, double scale) {
    BaseWeights w;
    std::uint64_t stream = seed * 1000003ULL;
    for (const auto& p : projections(spec)) {
        w.emplace(p.proj, random_matrix(p.d_in, p.d_out, ++stream, scale));
    }
    return w;
}

AdapterMap random_adapters(const ModuleSpec& spec, std::size_t rank, std::uint64_t seed, double alpha,
                           ScalingMode mode) {
    AdapterMap out;
    std::uint64_t stream = seed * 7919ULL + 17;
    for (const auto& p : projections(spec)) {
        Matrix a = random_matrix(p.d_in, rank, ++stream, 0.5);
        Matrix b = random_matrix(rank, p.d_out, ++stream, 0.5);
        out.emplace(p.proj, LoraPair{std::move(a), std::move(b), alpha, mode, 1});
    }
    return out;
}

BdAdapterMap random_bd_adapters(const ModuleSpec& spec, std::size_t rank, std::size_t n, std::uint64_t seed,
                                double alpha) {
    if (n == 0 || rank % n != 0) {
        throw DivisibilityError(fmt::format("block-diagonal rank {} not divisible by N={}", rank, n));
    }
    spec.require_divisible(n);
    BdAdapterMap out;
    std::uint64_t stream = seed * 104729ULL + 31;
    for (const auto& p : projections(spec)) {
        std::vector<Matrix> blocks;
        blocks.reserve(n);
        if (p.parallel == Parallelism::Column) {
            Matrix a = random_matrix(p.d_in, rank, ++stream, 0.5);
            for (std::size_t i = 0; i < n; ++i) blocks.push_back(random_matrix(rank / n, p.d_out / n, ++stream, 0.5));
            out.emplace(p.proj, BdLoraFactors{p.parallel, std::move(a), BlockDiagonalCompact(std::move(blocks)),
                                              alpha, ScalingMode::RsLoRABlockDiag});
        } else {
            for (std::size_t i = 0; i < n; ++i) blocks.push_back(random_matrix(p.d_in / n, rank / n, ++stream, 0.5));
            Matrix b = random_matrix(rank, p.d_out, ++stream, 0.5);
            out.emplace(p.proj, BdLoraFactors{p.parallel, std::move(b), BlockDiagonalCompact(std::move(blocks)),
                                              alpha, ScalingMode::RsLoRABlockDiag});
        }
    }
    return out;
}

}  // namespace bdlora
