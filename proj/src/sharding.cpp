#include "bdlora/sharding.hpp"

#include <fmt/format.h>

#include "bdlora/errors.hpp"

namespace bdlora {

std::string to_string(ShardKind kind) {
    switch (kind) {
        case ShardKind::Replicated: return "replicated";
        case ShardKind::ColumnSharded: return "column";
        case ShardKind::RowSharded: return "row";
        case ShardKind::BlockDiagonalCompact: return "block_diagonal";
    }
    return "unknown";
}

BlockDiagonalCompact::BlockDiagonalCompact(std::vector<Matrix> blocks) : blocks_(std::move(blocks)) {
    if (blocks_.empty()) throw ShapeError("block-diagonal matrix needs at least one block");
    for (std::size_t i = 1; i < blocks_.size(); ++i) {
        if (blocks_[i].rows() != blocks_[0].rows() || blocks_[i].cols() != blocks_[0].cols()) {
            throw ShapeError(fmt::format("block {} is {}, block 0 is {}", i, blocks_[i].shape_string(),
                                         blocks_[0].shape_string()));
        }
    }
}

bool is_block_diagonal(const Matrix& dense, std::size_t n) {
    if (n == 0 || dense.rows() % n != 0 || dense.cols() % n != 0) {
        throw DivisibilityError(fmt::format("{} cannot be split into {} diagonal blocks",
                                            dense.shape_string(), n));
    }
    const std::size_t br = dense.rows() / n;
    const std::size_t bc = dense.cols() / n;
    for (std::size_t i = 0; i < dense.rows(); ++i) {
        for (std::size_t j = 0; j < dense.cols(); ++j) {
            if (i / br != j / bc && dense(i, j) != 0.0) return false;
        }
    }
    return true;
}

BlockDiagonalCompact BlockDiagonalCompact::from_dense(const Matrix& dense, std::size_t n) {
    if (!is_block_diagonal(dense, n)) {
        throw ExactnessError(fmt::format("{} matrix has nonzero entries outside its {} diagonal blocks",
                                         dense.shape_string(), n));
    }
    const std::size_t br = dense.rows() / n;
    const std::size_t bc = dense.cols() / n;
    std::vector<Matrix> blocks;
    blocks.reserve(n);
    for (std::size_t i = 0; i < n; ++i) blocks.push_back(dense.block(i * br, i * bc, br, bc));
    return BlockDiagonalCompact(std::move(blocks));
}

Matrix BlockDiagonalCompact::side_by_side() const { return concat_cols(blocks_); }

Matrix BlockDiagonalCompact::stacked() const { return concat_rows(blocks_); }

BlockDiagonalCompact BlockDiagonalCompact::from_side_by_side(const Matrix& flat, std::size_t n) {
    return BlockDiagonalCompact(split_cols(flat, n));
}

BlockDiagonalCompact BlockDiagonalCompact::from_stacked(const Matrix& flat, std::size_t n) {
    return BlockDiagonalCompact(split_rows(flat, n));
}

std::vector<Matrix> shard(const Matrix& m, ShardSpec spec) {
    switch (spec.kind) {
        case ShardKind::Replicated:
            if (spec.n == 0) throw DivisibilityError("cannot replicate onto 0 devices");
            return std::vector<Matrix>(spec.n, m);
        case ShardKind::ColumnSharded:
            return split_cols(m, spec.n);
        case ShardKind::RowSharded:
            return split_rows(m, spec.n);
        case ShardKind::BlockDiagonalCompact:
            return BlockDiagonalCompact::from_dense(m, spec.n).blocks();
    }
    throw ShapeError("unknown shard kind");
}

Matrix assemble(std::span<const Matrix> parts, ShardKind kind) {
    switch (kind) {
        case ShardKind::Replicated:
            if (parts.empty()) throw ShapeError("assemble: no parts");
            return parts.front();
        case ShardKind::ColumnSharded:
            return concat_cols(parts);
        case ShardKind::RowSharded:
            return concat_rows(parts);
        case ShardKind::BlockDiagonalCompact:
            return bd_expand(BlockDiagonalCompact(std::vector<Matrix>(parts.begin(), parts.end())));
    }
    throw ShapeError("unknown shard kind");
}

Matrix bd_expand(const BlockDiagonalCompact& c) {
    Matrix out(c.logical_rows(), c.logical_cols());
    for (std::size_t i = 0; i < c.n_blocks(); ++i) {
        out.set_block(i * c.block_rows(), i * c.block_cols(), c.block(i));
    }
    return out;
}

std::vector<Matrix> bd_apply(std::span<const Matrix> x_fragments, const BlockDiagonalCompact& c) {
    if (x_fragments.size() != c.n_blocks()) {
        throw ShapeError(fmt::format("bd_apply: {} input fragments for {} blocks", x_fragments.size(),
                                     c.n_blocks()));
    }
    std::vector<Matrix> out;
    out.reserve(x_fragments.size());
    for (std::size_t i = 0; i < x_fragments.size(); ++i) {
        if (x_fragments[i].cols() != c.block_rows()) {
            throw ShapeError(fmt::format("bd_apply: fragment {} is {}, block expects {} columns", i,
                                         x_fragments[i].shape_string(), c.block_rows()));
        }
        out.push_back(matmul(x_fragments[i], c.block(i)));
    }
    return out;
}

}  // namespace bdlora
