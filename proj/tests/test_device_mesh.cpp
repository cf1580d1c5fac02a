#include <gtest/gtest.h>

#include "bdlora/device_mesh.hpp"
#include "bdlora/errors.hpp"

using namespace bdlora;

TEST(DeviceMesh, RejectsZeroDevices) { EXPECT_THROW(DeviceMesh(0), MeshError); }

TEST(DeviceMesh, AllReduceSumsFragments) {
    DeviceMesh mesh(3);
    std::vector<Matrix> parts{Matrix{{1, 2}}, Matrix{{10, 20}}, Matrix{{100, 200}}};
    EXPECT_EQ(mesh.all_reduce_sum(parts, kBaseTag), (Matrix{{111, 222}}));
    auto c = mesh.snapshot_stats().tag(kBaseTag);
    EXPECT_EQ(c.all_reduce_calls, 1u);
    EXPECT_EQ(c.all_reduce_elements, 6u);  // N x fragment size
    EXPECT_EQ(c.all_gather_calls, 0u);
}

TEST(DeviceMesh, AllGatherConcatenatesInDeviceOrder) {
    DeviceMesh mesh(2);
    std::vector<Matrix> parts{Matrix{{1}, {2}}, Matrix{{3, 4}, {5, 6}}};
    EXPECT_EQ(mesh.all_gather_cols(parts, kLoraTag), (Matrix{{1, 3, 4}, {2, 5, 6}}));
    auto c = mesh.snapshot_stats().tag(kLoraTag);
    EXPECT_EQ(c.all_gather_calls, 1u);
    EXPECT_EQ(c.all_gather_elements, 12u);  // N x gathered size
}

TEST(DeviceMesh, FragmentValidation) {
    DeviceMesh mesh(2);
    std::vector<Matrix> one{Matrix{{1}}};
    EXPECT_THROW(mesh.all_reduce_sum(one, kBaseTag), MeshError);
    std::vector<Matrix> ragged{Matrix{{1, 2}}, Matrix{{1}}};
    EXPECT_THROW(mesh.all_reduce_sum(ragged, kBaseTag), MeshError);
    std::vector<Matrix> rows{Matrix{{1}}, Matrix{{1}, {2}}};
    EXPECT_THROW(mesh.all_gather_cols(rows, kBaseTag), MeshError);
}

TEST(DeviceMesh, FusedMarkersAreNotCalls) {
    DeviceMesh mesh(4);
    mesh.mark_fused(kLoraTag);
    auto c = mesh.snapshot_stats().tag(kLoraTag);
    EXPECT_EQ(c.fused_markers, 1u);
    EXPECT_EQ(c.calls(), 0u);
}

TEST(DeviceMesh, TagsAreSeparatedAndResettable) {
    DeviceMesh mesh(2);
    std::vector<Matrix> parts{Matrix{{1}}, Matrix{{2}}};
    mesh.all_reduce_sum(parts, kBaseTag);
    mesh.all_gather_cols(parts, kLoraTag);
    auto s = mesh.snapshot_stats();
    EXPECT_EQ(s.tag(kBaseTag).calls(), 1u);
    EXPECT_EQ(s.tag(kLoraTag).calls(), 1u);
    EXPECT_EQ(s.tag("unused").calls(), 0u);
    EXPECT_EQ(s.total().calls(), 2u);
    mesh.reset_stats();
    EXPECT_EQ(mesh.snapshot_stats().total().calls(), 0u);
}

TEST(DeviceMesh, SingleDeviceIsIdentity) {
    DeviceMesh mesh(1);
    Matrix m{{1, 2}, {3, 4}};
    std::vector<Matrix> parts{m};
    EXPECT_EQ(mesh.all_reduce_sum(parts, kBaseTag), m);
    EXPECT_EQ(mesh.all_gather_cols(parts, kBaseTag), m);
    mesh.mark_fused(kLoraTag);
    EXPECT_EQ(mesh.snapshot_stats().total(), TagCounters{});
}
