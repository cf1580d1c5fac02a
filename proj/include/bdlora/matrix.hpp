#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace bdlora {

enum class ActivationKind { Identity, ReLU, SiLU };

std::string to_string(ActivationKind kind);
ActivationKind parse_activation(const std::string& name);

/// Dense row-major matrix of doubles. Always at least 1x1.
class Matrix {
public:
    Matrix(std::size_t rows, std::size_t cols);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix zeros(std::size_t rows, std::size_t cols) { return {rows, cols}; }
    static Matrix filled(std::size_t rows, std::size_t cols, double value);
    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    /// Copy of the sub-block [row0, row0+nrows) x [col0, col0+ncols).
    Matrix block(std::size_t row0, std::size_t col0, std::size_t nrows, std::size_t ncols) const;
    void set_block(std::size_t row0, std::size_t col0, const Matrix& src);

    std::string shape_string() const;

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double factor);
Matrix activate(const Matrix& a, ActivationKind kind);

Matrix concat_cols(std::span<const Matrix> parts);
Matrix concat_rows(std::span<const Matrix> parts);
std::vector<Matrix> split_cols(const Matrix& m, std::size_t n);
std::vector<Matrix> split_rows(const Matrix& m, std::size_t n);

/// Uniform entries in [-scale, scale] from a seeded mt19937_64. The
/// double conversion is done by hand so the bits are identical across
/// standard library implementations.
Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0);

double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
/// max|a - ref| / max|ref|; falls back to the absolute difference when ref is all zero.
double max_rel_error(const Matrix& a, const Matrix& ref);
std::size_t count_nonzeros(const Matrix& m);

}  // namespace bdlora
