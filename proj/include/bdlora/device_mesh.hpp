#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bdlora/matrix.hpp"

namespace bdlora {

inline constexpr const char* kBaseTag = "base";
inline constexpr const char* kLoraTag = "lora";

struct TagCounters {
    std::uint64_t all_reduce_calls = 0;
    std::uint64_t all_gather_calls = 0;
    std::uint64_t all_reduce_elements = 0;
    std::uint64_t all_gather_elements = 0;
    /// Dataflow nodes that would be a collective but are folded into another
    /// collective; recorded for tracing only, never costed.
    std::uint64_t fused_markers = 0;

    std::uint64_t calls() const { return all_reduce_calls + all_gather_calls; }
    friend bool operator==(const TagCounters&, const TagCounters&) = default;
};

/// Raw collective accounting. all_reduce_elements grows by N x fragment size per
/// call; all_gather_elements by N x gathered size (every device receives the
/// whole result). The ring-volume factor is applied by the cost model. A
/// single-device mesh launches no collectives and records nothing.
struct CollectiveStats {
    std::size_t n_devices = 1;
    std::map<std::string, TagCounters> by_tag;

    /// Counters for `tag`, zero if the tag was never used.
    TagCounters tag(const std::string& name) const;
    TagCounters total() const;

    friend bool operator==(const CollectiveStats&, const CollectiveStats&) = default;
};

class DeviceMesh {
public:
    explicit DeviceMesh(std::size_t n_devices);

    std::size_t size() const noexcept { return stats_.n_devices; }

    /// Elementwise sum of one fragment per device, folded in device order.
    Matrix all_reduce_sum(std::span<const Matrix> fragments, const std::string& tag);
    /// Column concatenation of one fragment per device, in device order.
    Matrix all_gather_cols(std::span<const Matrix> fragments, const std::string& tag);
    /// Records a zero-cost fused collective node under `tag`.
    void mark_fused(const std::string& tag);

    CollectiveStats snapshot_stats() const { return stats_; }
    void reset_stats();

private:
    void require_fragment_count(std::span<const Matrix> fragments, const char* op) const;

    CollectiveStats stats_;
};

}  // namespace bdlora
