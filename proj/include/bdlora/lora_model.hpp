#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bdlora/matrix.hpp"
#include "bdlora/sharding.hpp"

namespace bdlora {

enum class ModuleShape { BasicMLP, GluMLP, AttnProj };

std::string to_string(ModuleShape shape);
ModuleShape parse_module_shape(const std::string& name);

/// Dimensions of one transformer sub-module. d_inter is used by the MLP
/// shapes, d_q / d_kv by the attention projections.
struct ModuleSpec {
    ModuleShape shape = ModuleShape::BasicMLP;
    std::size_t d_hidden = 1;
    std::size_t d_inter = 1;
    std::size_t d_q = 1;
    std::size_t d_kv = 1;
    ActivationKind activation = ActivationKind::ReLU;

    static ModuleSpec basic_mlp(std::size_t d_hidden, std::size_t d_inter,
                                ActivationKind act = ActivationKind::ReLU);
    static ModuleSpec glu_mlp(std::size_t d_hidden, std::size_t d_inter,
                              ActivationKind act = ActivationKind::SiLU);
    static ModuleSpec attn_proj(std::size_t d_hidden, std::size_t d_q, std::size_t d_kv);

    /// Throws DivisibilityError unless every sharded dimension divides by n.
    void require_divisible(std::size_t n) const;
};

enum class Projection { W1, W1Hat, W2, Q, K, V, O };
enum class Parallelism { Column, Row };

std::string to_string(Projection p);

struct ProjectionInfo {
    Projection proj;
    std::size_t d_in;
    std::size_t d_out;
    /// Column-parallel projections see a replicated input and produce a
    /// column-sharded output; row-parallel ones consume that and feed the
    /// module's all-reduce.
    Parallelism parallel;
};

/// Projections of a module in execution order.
std::vector<ProjectionInfo> projections(const ModuleSpec& spec);

using BaseWeights = std::map<Projection, Matrix>;

enum class ScalingMode { Standard, RsLoRA, RsLoRABlockDiag };

std::string to_string(ScalingMode mode);
ScalingMode parse_scaling_mode(const std::string& name);

/// Standard: alpha/r. RsLoRA: alpha/sqrt(r). RsLoRABlockDiag: alpha/sqrt(r/n),
/// i.e. rsLoRA scaling of the n independent rank-r/n adapters.
double scaling_factor(ScalingMode mode, double alpha, std::size_t rank, std::size_t n_blocks = 1);

struct LoraPair {
    Matrix a;  // d_in x r
    Matrix b;  // r x d_out
    double alpha = 16.0;
    ScalingMode mode = ScalingMode::RsLoRA;
    std::size_t n_blocks = 1;

    std::size_t rank() const { return a.cols(); }
    double scale() const { return scaling_factor(mode, alpha, rank(), n_blocks); }
};

using AdapterMap = std::map<Projection, LoraPair>;

/// BD-LoRA factors for one projection. On a column-parallel projection A is
/// dense and B block-diagonal; on a row-parallel projection A is
/// block-diagonal and B dense.
struct BdLoraFactors {
    Parallelism parallel;
    Matrix dense;
    BlockDiagonalCompact compact;
    double alpha = 16.0;
    ScalingMode mode = ScalingMode::RsLoRABlockDiag;

    std::size_t n_blocks() const { return compact.n_blocks(); }
    std::size_t rank() const;
    double scale() const { return scaling_factor(mode, alpha, rank(), n_blocks()); }
    /// The equivalent dense pair, with the block-diagonal factor expanded.
    LoraPair to_dense() const;
};

using BdAdapterMap = std::map<Projection, BdLoraFactors>;

AdapterMap expand(const BdAdapterMap& adapters);

/// XW, or XW + scale * (XA)B when an adapter is given.
Matrix lora_linear(const Matrix& x, const Matrix& w, const LoraPair* pair);

/// Single-device forward pass; the ground truth for every sharded strategy.
/// Attention token mixing is the identity on the query projection.
Matrix reference_forward(const ModuleSpec& spec, const BaseWeights& weights,
                         const AdapterMap& adapters, const Matrix& x);

/// Throws ShapeError / ConfigError if weights do not match the spec.
void validate_weights(const ModuleSpec& spec, const BaseWeights& weights);
/// Throws ConfigError on keys the module lacks, ShapeError on bad shapes.
void validate_adapters(const ModuleSpec& spec, const AdapterMap& adapters);

// Seeded fixtures.
BaseWeights random_base_weights(const ModuleSpec& spec, std::uint64_t seed, double scale = 0.5);
AdapterMap random_adapters(const ModuleSpec& spec, std::size_t rank, std::uint64_t seed,
                           double alpha = 16.0, ScalingMode mode = ScalingMode::RsLoRA);
BdAdapterMap random_bd_adapters(const ModuleSpec& spec, std::size_t rank, std::size_t n,
                                std::uint64_t seed, double alpha = 16.0);

}  // namespace bdlora
