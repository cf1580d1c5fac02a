#include "bdlora/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "bdlora/errors.hpp"

namespace bdlora {

std::string to_string(ActivationKind kind) {
    switch (kind) {
        case ActivationKind::Identity: return "identity";
        case ActivationKind::ReLU: return "relu";
        case ActivationKind::SiLU: return "silu";
    }
    return "unknown";
}

ActivationKind parse_activation(const std::string& name) {
    if (name == "identity") return ActivationKind::Identity;
    if (name == "relu") return ActivationKind::ReLU;
    if (name == "silu") return ActivationKind::SiLU;
    throw ConfigError(fmt::format("unknown activation '{}'", name));
}

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
    if (rows == 0 || cols == 0) {
        throw ShapeError(fmt::format("matrix dimensions must be >= 1, got {}x{}", rows, cols));
    }
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) {
        throw ShapeError(fmt::format("matrix dimensions must be >= 1, got {}x{}", rows, cols));
    }
    if (data_.size() != rows * cols) {
        throw ShapeError(fmt::format("data length {} does not match {}x{}", data_.size(), rows, cols));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
    if (rows_ == 0 || cols_ == 0) throw ShapeError("matrix literal must be non-empty");
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
        if (row.size() != cols_) throw ShapeError("ragged matrix literal");
        data_.insert(data_.end(), row.begin(), row.end());
    }
}

Matrix Matrix::filled(std::size_t rows, std::size_t cols, double value) {
    return Matrix(rows, cols, std::vector<double>(rows * cols, value));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::block(std::size_t row0, std::size_t col0, std::size_t nrows, std::size_t ncols) const {
    if (row0 + nrows > rows_ || col0 + ncols > cols_) {
        throw ShapeError(fmt::format("block [{}+{}, {}+{}] out of range for {}", row0, nrows, col0,
                                     ncols, shape_string()));
    }
    Matrix out(nrows, ncols);
    for (std::size_t i = 0; i < nrows; ++i) {
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>((row0 + i) * cols_ + col0), ncols,
                    out.data_.begin() + static_cast<std::ptrdiff_t>(i * ncols));
    }
    return out;
}

void Matrix::set_block(std::size_t row0, std::size_t col0, const Matrix& src) {
    if (row0 + src.rows_ > rows_ || col0 + src.cols_ > cols_) {
        throw ShapeError(fmt::format("cannot place {} at ({}, {}) in {}", src.shape_string(), row0,
                                     col0, shape_string()));
    }
    for (std::size_t i = 0; i < src.rows_; ++i) {
        std::copy_n(src.data_.begin() + static_cast<std::ptrdiff_t>(i * src.cols_), src.cols_,
                    data_.begin() + static_cast<std::ptrdiff_t>((row0 + i) * cols_ + col0));
    }
}

std::string Matrix::shape_string() const { return fmt::format("{}x{}", rows_, cols_); }

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, a.shape_string(), b.shape_string()));
    }
}

template <typename F>
Matrix zip(const Matrix& a, const Matrix& b, const char* op, F f) {
    require_same_shape(a, b, op);
    Matrix out(a.rows(), a.cols());
    auto x = a.data();
    auto y = b.data();
    auto z = out.data();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = f(x[i], y[i]);
    return out;
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError(fmt::format("matmul: inner dimensions differ ({} x {})", a.shape_string(),
                                     b.shape_string()));
    }
    Matrix out(a.rows(), b.cols());
    // i-k-j order; each output entry accumulates over k in increasing order.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Matrix subtract(const Matrix& a, const Matrix& b) {
    return zip(a, b, "subtract", [](double x, double y) { return x - y; });
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}

Matrix scale(const Matrix& a, double factor) {
    Matrix out = a;
    for (double& v : out.data()) v *= factor;
    return out;
}

Matrix activate(const Matrix& a, ActivationKind kind) {
    Matrix out = a;
    switch (kind) {
        case ActivationKind::Identity:
            break;
        case ActivationKind::ReLU:
            for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
            break;
        case ActivationKind::SiLU:
            for (double& v : out.data()) v = v / (1.0 + std::exp(-v));
            break;
    }
    return out;
}

Matrix concat_cols(std::span<const Matrix> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            throw ShapeError(fmt::format("concat_cols: row counts differ ({} vs {})",
                                         parts.front().shape_string(), p.shape_string()));
        }
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        out.set_block(0, offset, p);
        offset += p.cols();
    }
    return out;
}

Matrix concat_rows(std::span<const Matrix> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) {
            throw ShapeError(fmt::format("concat_rows: column counts differ ({} vs {})",
                                         parts.front().shape_string(), p.shape_string()));
        }
        rows += p.rows();
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        out.set_block(offset, 0, p);
        offset += p.rows();
    }
    return out;
}

std::vector<Matrix> split_cols(const Matrix& m, std::size_t n) {
    if (n == 0 || m.cols() % n != 0) {
        throw DivisibilityError(fmt::format("split_cols: {} columns not divisible by {}", m.cols(), n));
    }
    const std::size_t width = m.cols() / n;
    std::vector<Matrix> parts;
    parts.reserve(n);
    for (std::size_t i = 0; i < n; ++i) parts.push_back(m.block(0, i * width, m.rows(), width));
    return parts;
}

std::vector<Matrix> split_rows(const Matrix& m, std::size_t n) {
    if (n == 0 || m.rows() % n != 0) {
        throw DivisibilityError(fmt::format("split_rows: {} rows not divisible by {}", m.rows(), n));
    }
    const std::size_t height = m.rows() / n;
    std::vector<Matrix> parts;
    parts.reserve(n);
    for (std::size_t i = 0; i < n; ++i) parts.push_back(m.block(i * height, 0, height, m.cols()));
    return parts;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale) {
    std::mt19937_64 gen(seed);
    Matrix out(rows, cols);
    for (double& v : out.data()) {
        const double unit = static_cast<double>(gen() >> 11) * 0x1.0p-53;  // [0, 1)
        v = scale * (2.0 * unit - 1.0);
    }
    return out;
}

double max_abs(const Matrix& m) {
    double best = 0.0;
    for (double v : m.data()) best = std::max(best, std::abs(v));
    return best;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double best = 0.0;
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) best = std::max(best, std::abs(x[i] - y[i]));
    return best;
}

double max_rel_error(const Matrix& a, const Matrix& ref) {
    const double diff = max_abs_diff(a, ref);
    const double norm = max_abs(ref);
    return norm > 0.0 ? diff / norm : diff;
}

std::size_t count_nonzeros(const Matrix& m) {
    return static_cast<std::size_t>(
        std::count_if(m.data().begin(), m.data().end(), [](double v) { return v != 0.0; }));
}

}  // namespace bdlora
