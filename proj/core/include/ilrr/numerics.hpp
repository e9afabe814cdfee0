#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace ilrr {

// Dense row-major float matrix. Row vectors are 1 x n matrices.
class Matrix {
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows);
    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }

    void fill(float value);
    // Copies rows [first, first + count) into a new matrix.
    Matrix slice_rows(std::size_t first, std::size_t count) const;
    void set_rows(std::size_t first, const Matrix& src);

    bool operator==(const Matrix& other) const = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

bool all_finite(const Matrix& m);
float max_abs_diff(const Matrix& a, const Matrix& b);

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T without materializing the transpose.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
// out += a^T * b, the weight-gradient shape.
void matmul_at_accumulate(const Matrix& a, const Matrix& b, Matrix& out);

// Adds a 1 x cols bias row to every row of m.
void add_row_bias(Matrix& m, const Matrix& bias);

void softmax_inplace(std::span<float> v);
Matrix softmax_rows(const Matrix& m);

constexpr float kLayerNormEps = 1e-5f;

std::vector<float> layer_norm(std::span<const float> v, std::span<const float> gain,
                              std::span<const float> bias, float eps = kLayerNormEps);

float gelu(float x);
float gelu_grad(float x);
std::vector<float> gelu(std::span<const float> v);

// Counter-based generator: every draw is a pure function of (key, counter), so
// a stream can be reproduced from its seed alone and forked into independent
// sub-streams by id.
class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64();
    double uniform();  // [0, 1)
    float normal();    // standard normal, Box-Muller
    std::size_t below(std::size_t n);

    // Independent generator derived from this one's key. Does not advance this.
    Rng fork(std::uint64_t stream) const;

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

  private:
    Rng(std::uint64_t key, std::uint64_t counter, int);
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

double rng_uniform(Rng& rng);
// Requires probs summing to 1 within 1e-4.
std::size_t rng_categorical(Rng& rng, std::span<const float> probs);

}  // namespace ilrr
