#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlora/lora_model.hpp"
#include "bdlora/matrix.hpp"
#include "bdlora/rational.hpp"

namespace bdlora {

/// Whole-model dimensions. Attention is q/k/v/o with grouped k/v width
/// d_kv; the MLP is the gated gate/up/down triple.
struct ArchSpec {
    std::string name;
    std::size_t d_hidden = 1;
    std::size_t d_inter = 1;
    std::size_t d_q = 1;
    std::size_t d_kv = 1;
    std::size_t n_layers = 1;
    bool target_attn = true;
    bool target_mlp = true;

    void validate() const;
    friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

nlohmann::ordered_json to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const nlohmann::json& j);

/// Directory holding arch/ and hardware/ presets. BDLORA_CONFIG_DIR
/// overrides the compiled-in location.
std::filesystem::path config_dir();
/// Accepts a preset name (llama3.1-8b, ...) or a path to a JSON file.
ArchSpec load_arch(const std::string& name_or_path);

struct ArchProjection {
    std::string name;  // q_proj, ..., down_proj
    std::size_t d_in;
    std::size_t d_out;
    Parallelism parallel;
};

/// Adapted projections of one layer, in storage order.
std::vector<ArchProjection> arch_projections(const ArchSpec& arch);
ModuleSpec attn_module(const ArchSpec& arch);
ModuleSpec mlp_module(const ArchSpec& arch);

enum class AdapterMethod { Dense, BlockDiagonal };

std::string to_string(AdapterMethod m);
AdapterMethod parse_adapter_method(const std::string& name);

struct AdapterManifest {
    ArchSpec arch;
    AdapterMethod method = AdapterMethod::Dense;
    /// Block count for BlockDiagonal; 1 for Dense.
    std::size_t n = 1;
    std::size_t rank = 16;
    double alpha = 16.0;
    ScalingMode scaling_mode = ScalingMode::RsLoRA;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const AdapterManifest&, const AdapterManifest&) = default;
};

/// Trainable parameters of one adapted projection. Dense: (d_in + d_out) r.
/// Block-diagonal, column-parallel: d_in r + d_out r/N. Row-parallel: d_in r/N + d_out r.
std::int64_t projection_params(const ArchProjection& p, AdapterMethod method, std::size_t n, std::size_t rank);

/// Exact trainable-parameter count over all targeted projections and layers.
std::int64_t count_params(const AdapterManifest& manifest);

/// "41.9M" style rounding.
std::string format_millions(std::int64_t count);

struct MatchedRank {
    /// r (d_H + d_I) / (d_H + d_I/N), reduced.
    Rational exact;
    Rational numerator;    // r (d_H + d_I)
    Rational denominator;  // d_H + d_I/N
    std::size_t nearest_multiple;  // of N, at least N
    /// Basic-MLP parameters at nearest_multiple minus those of the dense rank.
    Rational param_residual;

    std::string describe(std::size_t n) const;
};

/// BD-LoRA rank with the same basic-MLP parameter count as a dense rank.
MatchedRank match_rank(std::size_t d_hidden, std::size_t d_inter, std::size_t n, std::size_t dense_rank);

/// Multiple of N whose whole-model BD parameter count is closest to the dense
/// count at `dense_rank` (ties resolve to the smaller rank).
std::size_t matched_bd_rank(const ArchSpec& arch, std::size_t n, std::size_t dense_rank);

/// How a stored tensor relates to the logical factor.
enum class TensorLayout {
    Dense,
    BlockSideBySide,  // (r/N) x d_out: diagonal blocks placed next to each other
    BlockStacked,     // d_in x (r/N): diagonal blocks placed on top of each other
};

std::string to_string(TensorLayout layout);

struct AdapterTensor {
    std::string name;
    TensorLayout layout = TensorLayout::Dense;
    Matrix value;
};

struct AdapterFactors {
    std::vector<AdapterTensor> tensors;

    const AdapterTensor& find(const std::string& name) const;
    AdapterTensor& find(const std::string& name);
};

struct TensorSpec {
    std::string name;
    TensorLayout layout;
    std::size_t rows;
    std::size_t cols;
};

/// Names, layouts and stored shapes implied by a manifest, in file order.
std::vector<TensorSpec> expected_tensors(const AdapterManifest& manifest);

std::string tensor_name(std::size_t layer, const std::string& projection, char factor);

/// A is seeded uniform in [-1/sqrt(d_in), 1/sqrt(d_in)], B is zero, so a
/// fresh adapter leaves the base model unchanged.
AdapterFactors build_adapters(const AdapterManifest& manifest);

/// One projection of a manifest as in-memory factors.
LoraPair dense_pair(const AdapterManifest& manifest, const AdapterFactors& factors, std::size_t layer,
                    const std::string& projection);
BdLoraFactors bd_factors(const AdapterManifest& manifest, const AdapterFactors& factors, std::size_t layer,
                         const std::string& projection);

struct AdapterFile {
    AdapterManifest manifest;
    AdapterFactors factors;
};

inline constexpr char kAdapterMagic[] = "BDLA1";

std::vector<std::uint8_t> serialize(const AdapterManifest& manifest, const AdapterFactors& factors);
AdapterFile deserialize(std::span<const std::uint8_t> bytes);

void write_adapter_file(const std::filesystem::path& path, const AdapterManifest& manifest,
                        const AdapterFactors& factors);
AdapterFile read_adapter_file(const std::filesystem::path& path);

/// A contiguous row or column range of one stored tensor.
struct TensorSlice {
    std::string name;
    std::size_t row_offset = 0;
    std::size_t col_offset = 0;
    Matrix value;
};

struct DeviceSlice {
    std::size_t device = 0;
    std::size_t n = 1;
    std::vector<TensorSlice> tensors;

    std::size_t payload_elements() const;
};

/// Fragments device `device` of `n` holds. Dense adapters follow the S-LoRA
/// placement, block-diagonal ones the BD-LoRA placement; nothing is
/// replicated, so slices of all devices partition every tensor.
DeviceSlice slice_for_device(const AdapterManifest& manifest, const AdapterFactors& factors, std::size_t device,
                             std::size_t n);
AdapterFactors assemble_slices(const AdapterManifest& manifest, std::span<const DeviceSlice> slices);

/// Dense -> block-diagonal with N blocks; throws ExactnessError if any
/// constrained factor has a nonzero off-block entry. Scaling mode is kept.
AdapterFile to_block_diagonal(const AdapterManifest& manifest, const AdapterFactors& factors, std::size_t n);
/// Block-diagonal -> dense, materializing the zeros.
AdapterFile to_dense(const AdapterManifest& manifest, const AdapterFactors& factors);

}  // namespace bdlora
