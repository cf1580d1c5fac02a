#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bdlora/device_mesh.hpp"
#include "bdlora/lora_model.hpp"
#include "bdlora/matrix.hpp"
#include "bdlora/sharding.hpp"

namespace bdlora {

enum class StrategyKind { BaseOnly, NfsLora, SLora, BdLora };

std::string to_string(StrategyKind kind);
StrategyKind parse_strategy(const std::string& name);

/// Merged flags only change how S-LoRA's all-gathers are batched.
struct StrategyConfig {
    StrategyKind kind = StrategyKind::BaseOnly;
    bool merged_qkv = true;
    bool merged_glu = true;
};

/// Megatron layout: column-parallel projections split by columns, row-parallel by rows.
struct ShardedWeights {
    std::size_t n = 1;
    std::map<Projection, std::vector<Matrix>> shards;
};

ShardedWeights shard_weights(const ModuleSpec& spec, const BaseWeights& weights, std::size_t n);

struct ShardedLoraFactors {
    ShardKind a_layout;
    ShardKind b_layout;
    std::vector<Matrix> a;  // one per device
    std::vector<Matrix> b;
    double scale = 1.0;
};

struct ShardedAdapterSet {
    StrategyKind kind = StrategyKind::SLora;
    std::size_t n = 1;
    std::map<Projection, ShardedLoraFactors> factors;
};

/// S-LoRA or NFS-LoRA placement of dense adapters.
ShardedAdapterSet shard_adapters(const ModuleSpec& spec, const AdapterMap& adapters, StrategyKind kind,
                                 std::size_t n);
/// BD-LoRA placement: block i of every block-diagonal factor goes to device i.
ShardedAdapterSet shard_bd_adapters(const ModuleSpec& spec, const BdAdapterMap& adapters, std::size_t n);

/// Work done by one device on the LoRA path.
struct DeviceCounters {
    std::uint64_t lora_matmul_flops = 0;
    std::uint64_t lora_add_flops = 0;
    std::uint64_t lora_param_elements = 0;
    /// Elements written by LoRA matmuls; reading them back doubles it.
    std::uint64_t lora_output_elements = 0;

    std::uint64_t mem_moved_elements() const { return lora_param_elements + 2 * lora_output_elements; }
    friend bool operator==(const DeviceCounters&, const DeviceCounters&) = default;
};

struct ForwardResult {
    Matrix output;
    /// Collectives issued by this forward call only.
    CollectiveStats stats;
    std::vector<DeviceCounters> devices;

    /// Counters of device 0; throws StrategyError if devices disagree.
    DeviceCounters per_device() const;
};

ForwardResult megatron_forward(DeviceMesh& mesh, const ModuleSpec& spec, const ShardedWeights& weights,
                               const Matrix& x);
ForwardResult s_lora_forward(DeviceMesh& mesh, const ModuleSpec& spec, const ShardedWeights& weights,
                             const ShardedAdapterSet& adapters, const Matrix& x, bool merged_qkv = true,
                             bool merged_glu = true);
ForwardResult nfs_lora_forward(DeviceMesh& mesh, const ModuleSpec& spec, const ShardedWeights& weights,
                               const ShardedAdapterSet& adapters, const Matrix& x);
ForwardResult bd_lora_forward(DeviceMesh& mesh, const ModuleSpec& spec, const ShardedWeights& weights,
                              const ShardedAdapterSet& adapters, const Matrix& x);

/// Dispatches on config.kind. `adapters` is ignored for BaseOnly.
ForwardResult run_strategy(DeviceMesh& mesh, const ModuleSpec& spec, const StrategyConfig& config,
                           const ShardedWeights& weights, const ShardedAdapterSet* adapters, const Matrix& x);

/// Single column-parallel linear layer with a BD-LoRA adapter; the only
/// collective is the layer's own output all-gather.
ForwardResult bd_lora_linear_forward(DeviceMesh& mesh, const Matrix& x, std::span<const Matrix> w_shards,
                                     std::span<const Matrix> a_shards, const BlockDiagonalCompact& b,
                                     double scale);

CollectiveStats operator-(const CollectiveStats& after, const CollectiveStats& before);

}  // namespace bdlora
