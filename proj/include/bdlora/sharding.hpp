#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bdlora/matrix.hpp"

namespace bdlora {

enum class ShardKind { Replicated, ColumnSharded, RowSharded, BlockDiagonalCompact };

std::string to_string(ShardKind kind);

struct ShardSpec {
    ShardKind kind = ShardKind::Replicated;
    std::size_t n = 1;
};

/// Block-diagonal matrix held as its n diagonal blocks. Off-diagonal zeros
/// are implied and never stored.
class BlockDiagonalCompact {
public:
    explicit BlockDiagonalCompact(std::vector<Matrix> blocks);

    /// Copies the diagonal blocks of a dense matrix. Throws ExactnessError if
    /// any off-diagonal entry is nonzero.
    static BlockDiagonalCompact from_dense(const Matrix& dense, std::size_t n);

    std::size_t n_blocks() const noexcept { return blocks_.size(); }
    std::size_t block_rows() const noexcept { return blocks_.front().rows(); }
    std::size_t block_cols() const noexcept { return blocks_.front().cols(); }
    std::size_t logical_rows() const noexcept { return n_blocks() * block_rows(); }
    std::size_t logical_cols() const noexcept { return n_blocks() * block_cols(); }
    /// Stored (nonzero-capable) element count.
    std::size_t stored_elements() const noexcept { return n_blocks() * block_rows() * block_cols(); }

    const Matrix& block(std::size_t i) const { return blocks_.at(i); }
    const std::vector<Matrix>& blocks() const noexcept { return blocks_; }

    /// Blocks placed next to each other: block_rows x (n * block_cols).
    Matrix side_by_side() const;
    /// Blocks placed on top of each other: (n * block_rows) x block_cols.
    Matrix stacked() const;
    static BlockDiagonalCompact from_side_by_side(const Matrix& flat, std::size_t n);
    static BlockDiagonalCompact from_stacked(const Matrix& flat, std::size_t n);

    friend bool operator==(const BlockDiagonalCompact&, const BlockDiagonalCompact&) = default;

private:
    std::vector<Matrix> blocks_;
};

std::vector<Matrix> shard(const Matrix& m, ShardSpec spec);
/// Inverse of shard for the dense kinds; Replicated returns the first copy.
Matrix assemble(std::span<const Matrix> parts, ShardKind kind);

/// Dense test-oracle expansion; zeros are materialized.
Matrix bd_expand(const BlockDiagonalCompact& c);

/// Per-fragment X^i W^i. Touches no mesh.
std::vector<Matrix> bd_apply(std::span<const Matrix> x_fragments, const BlockDiagonalCompact& c);

/// Whether every entry outside the n diagonal blocks of `dense` is zero.
bool is_block_diagonal(const Matrix& dense, std::size_t n);

}  // namespace bdlora
