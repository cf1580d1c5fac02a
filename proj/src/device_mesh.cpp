#include "bdlora/device_mesh.hpp"

#include <fmt/format.h>

#include "bdlora/errors.hpp"

namespace bdlora {

TagCounters CollectiveStats::tag(const std::string& name) const {
    auto it = by_tag.find(name);
    return it == by_tag.end() ? TagCounters{} : it->second;
}

TagCounters CollectiveStats::total() const {
    TagCounters sum;
    for (const auto& [_, c] : by_tag) {
        sum.all_reduce_calls += c.all_reduce_calls;
        sum.all_gather_calls += c.all_gather_calls;
        sum.all_reduce_elements += c.all_reduce_elements;
        sum.all_gather_elements += c.all_gather_elements;
        sum.fused_markers += c.fused_markers;
    }
    return sum;
}

DeviceMesh::DeviceMesh(std::size_t n_devices) {
    if (n_devices == 0) throw MeshError("a mesh needs at least one device");
    stats_.n_devices = n_devices;
}

void DeviceMesh::require_fragment_count(std::span<const Matrix> fragments, const char* op) const {
    if (fragments.size() != size()) {
        throw MeshError(fmt::format("{}: expected {} fragments, got {}", op, size(), fragments.size()));
    }
}

Matrix DeviceMesh::all_reduce_sum(std::span<const Matrix> fragments, const std::string& tag) {
    require_fragment_count(fragments, "all_reduce_sum");
    const Matrix& first = fragments.front();
    for (std::size_t d = 1; d < fragments.size(); ++d) {
        if (fragments[d].rows() != first.rows() || fragments[d].cols() != first.cols()) {
            throw MeshError(fmt::format("all_reduce_sum: device {} holds {}, device 0 holds {}", d,
                                        fragments[d].shape_string(), first.shape_string()));
        }
    }
    Matrix sum = first;
    for (std::size_t d = 1; d < fragments.size(); ++d) {
        auto acc = sum.data();
        auto src = fragments[d].data();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
    }
    if (size() == 1) return sum;  // nothing to communicate
    auto& c = stats_.by_tag[tag];
    c.all_reduce_calls += 1;
    c.all_reduce_elements += size() * first.size();
    return sum;
}

Matrix DeviceMesh::all_gather_cols(std::span<const Matrix> fragments, const std::string& tag) {
    require_fragment_count(fragments, "all_gather_cols");
    for (std::size_t d = 1; d < fragments.size(); ++d) {
        if (fragments[d].rows() != fragments.front().rows()) {
            throw MeshError(fmt::format("all_gather_cols: device {} holds {}, device 0 holds {}", d,
                                        fragments[d].shape_string(), fragments.front().shape_string()));
        }
    }
    Matrix gathered = concat_cols(fragments);
    if (size() == 1) return gathered;
    auto& c = stats_.by_tag[tag];
    c.all_gather_calls += 1;
    c.all_gather_elements += size() * gathered.size();
    return gathered;
}

void DeviceMesh::mark_fused(const std::string& tag) {
    if (size() > 1) stats_.by_tag[tag].fused_markers += 1;
}

void DeviceMesh::reset_stats() { stats_.by_tag.clear(); }

}  // namespace bdlora
