#include <gtest/gtest.h>

#include "bdlora/errors.hpp"
#include "bdlora/sharding.hpp"

using namespace bdlora;

TEST(Sharding, ShardAssembleRoundTrip) {
    Matrix m = random_matrix(8, 12, 5);
    for (std::size_t n : {1u, 2u, 4u}) {
        auto cols = shard(m, {ShardKind::ColumnSharded, n});
        EXPECT_EQ(cols.size(), n);
        EXPECT_EQ(assemble(cols, ShardKind::ColumnSharded), m);
        auto rows = shard(m, {ShardKind::RowSharded, n});
        EXPECT_EQ(assemble(rows, ShardKind::RowSharded), m);
        auto reps = shard(m, {ShardKind::Replicated, n});
        for (const auto& r : reps) EXPECT_EQ(r, m);
    }
    EXPECT_THROW(shard(m, {ShardKind::ColumnSharded, 5}), DivisibilityError);
}

TEST(BlockDiagonal, ExpandPlacesBlocksOnDiagonal) {
    BlockDiagonalCompact c({Matrix{{1, 2}}, Matrix{{3, 4}}});
    EXPECT_EQ(c.logical_rows(), 2u);
    EXPECT_EQ(c.logical_cols(), 4u);
    EXPECT_EQ(c.stored_elements(), 4u);
    EXPECT_EQ(bd_expand(c), (Matrix{{1, 2, 0, 0}, {0, 0, 3, 4}}));
}

TEST(BlockDiagonal, RejectsMismatchedBlocks) {
    EXPECT_THROW(BlockDiagonalCompact({Matrix{{1}}, Matrix{{1, 2}}}), ShapeError);
    EXPECT_THROW(BlockDiagonalCompact(std::vector<Matrix>{}), ShapeError);
}

TEST(BlockDiagonal, FromDenseIsExact) {
    BlockDiagonalCompact c({random_matrix(2, 3, 1), random_matrix(2, 3, 2), random_matrix(2, 3, 3)});
    Matrix dense = bd_expand(c);
    EXPECT_TRUE(is_block_diagonal(dense, 3));
    EXPECT_EQ(BlockDiagonalCompact::from_dense(dense, 3), c);
    dense(0, 5) = 1e-300;
    EXPECT_FALSE(is_block_diagonal(dense, 3));
    EXPECT_THROW(BlockDiagonalCompact::from_dense(dense, 3), ExactnessError);
}

TEST(BlockDiagonal, FlatLayouts) {
    BlockDiagonalCompact c({random_matrix(2, 3, 1), random_matrix(2, 3, 2)});
    Matrix sbs = c.side_by_side();
    EXPECT_EQ(sbs.rows(), 2u);
    EXPECT_EQ(sbs.cols(), 6u);
    EXPECT_EQ(BlockDiagonalCompact::from_side_by_side(sbs, 2), c);
    Matrix st = c.stacked();
    EXPECT_EQ(st.rows(), 4u);
    EXPECT_EQ(st.cols(), 3u);
    EXPECT_EQ(BlockDiagonalCompact::from_stacked(st, 2), c);
}

TEST(BlockDiagonal, ApplyMatchesDenseProduct) {
    // Column-sharded input times block-diagonal matrix equals the dense product, sharded.
    const std::size_t n = 4;
    BlockDiagonalCompact c({random_matrix(2, 3, 1), random_matrix(2, 3, 2), random_matrix(2, 3, 3),
                            random_matrix(2, 3, 4)});
    Matrix x = random_matrix(5, 8, 9);
    auto out = bd_apply(split_cols(x, n), c);
    EXPECT_LT(max_abs_diff(concat_cols(out), matmul(x, bd_expand(c))), 1e-14);
    auto bad = split_cols(x, 2);
    EXPECT_THROW(bd_apply(bad, c), ShapeError);
}

TEST(BlockDiagonal, RectangularBlocks) {
    Matrix dense{{1, 2, 0, 0, 0, 0}, {0, 0, 3, 4, 0, 0}, {0, 0, 0, 0, 5, 6}};
    EXPECT_TRUE(is_block_diagonal(dense, 3));
    EXPECT_THROW(is_block_diagonal(dense, 2), DivisibilityError);
    EXPECT_EQ(bd_expand(BlockDiagonalCompact::from_dense(dense, 3)), dense);
}
