#include "ilrr/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "ilrr/errors.hpp"

namespace ilrr {

namespace {

std::string shape_str(const Matrix& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix data length does not match rows x cols");
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged initializer for Matrix");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
}

void Matrix::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

Matrix Matrix::slice_rows(std::size_t first, std::size_t count) const {
    if (first + count > rows_) throw ShapeError("slice_rows out of range");
    Matrix out(count, cols_);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(first * cols_), count * cols_, out.data_.begin());
    return out;
}

void Matrix::set_rows(std::size_t first, const Matrix& src) {
    if (src.cols_ != cols_ || first + src.rows_ > rows_) throw ShapeError("set_rows shape mismatch");
    std::copy(src.data_.begin(), src.data_.end(), data_.begin() + static_cast<std::ptrdiff_t>(first * cols_));
}

bool all_finite(const Matrix& m) {
    return std::all_of(m.values().begin(), m.values().end(), [](float v) { return std::isfinite(v); });
}

float max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("max_abs_diff: " + shape_str(a) + " vs " + shape_str(b));
    }
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.values()[i] - b.values()[i]));
    return m;
}

namespace {

// c (n x m) += a (n x inner) * b (inner x m), all row-major with the given
// leading dimensions. Four rows of a share each pass over a row of b.
void gemm_acc(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc,
              std::size_t n, std::size_t inner, std::size_t m) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        float* __restrict c0 = c + i * ldc;
        float* __restrict c1 = c0 + ldc;
        float* __restrict c2 = c1 + ldc;
        float* __restrict c3 = c2 + ldc;
        const float* a0 = a + i * lda;
        for (std::size_t k = 0; k < inner; ++k) {
            const float x0 = a0[k], x1 = a0[lda + k], x2 = a0[2 * lda + k], x3 = a0[3 * lda + k];
            const float* __restrict br = b + k * ldb;
            for (std::size_t j = 0; j < m; ++j) {
                const float bv = br[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
    for (; i < n; ++i) {
        float* __restrict cr = c + i * ldc;
        const float* ar = a + i * lda;
        for (std::size_t k = 0; k < inner; ++k) {
            const float x = ar[k];
            const float* __restrict br = b + k * ldb;
            for (std::size_t j = 0; j < m; ++j) cr[j] += x * br[j];
        }
    }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
    Matrix c(a.rows(), b.cols());
    gemm_acc(a.values().data(), a.cols(), b.values().data(), b.cols(), c.values().data(), c.cols(), a.rows(),
             a.cols(), b.cols());
    return c;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_bt: " + shape_str(a) + " * " + shape_str(b) + "^T");
    // transpose once so the inner loop is contiguous
    const std::size_t inner = b.cols(), m = b.rows();
    std::vector<float> bt(inner * m);
    for (std::size_t j = 0; j < m; ++j) {
        const float* brow = b.row(j).data();
        for (std::size_t k = 0; k < inner; ++k) bt[k * m + j] = brow[k];
    }
    Matrix c(a.rows(), m);
    gemm_acc(a.values().data(), a.cols(), bt.data(), m, c.values().data(), m, a.rows(), inner, m);
    return c;
}

void matmul_at_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
    if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
        throw ShapeError("matmul_at_accumulate: " + shape_str(a) + "^T * " + shape_str(b) + " -> " +
                         shape_str(out));
    }
    const std::size_t n = a.rows(), p = a.cols(), m = b.cols();
    std::size_t r = 0;
    for (; r + 4 <= n; r += 4) {
        const float* a0 = a.row(r).data();
        const float* __restrict b0 = b.row(r).data();
        const float* __restrict b1 = b0 + m;
        const float* __restrict b2 = b1 + m;
        const float* __restrict b3 = b2 + m;
        for (std::size_t i = 0; i < p; ++i) {
            const float x0 = a0[i], x1 = a0[p + i], x2 = a0[2 * p + i], x3 = a0[3 * p + i];
            float* __restrict orow = out.row(i).data();
            for (std::size_t j = 0; j < m; ++j) orow[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
        }
    }
    for (; r < n; ++r) {
        const float* arow = a.row(r).data();
        const float* __restrict brow = b.row(r).data();
        for (std::size_t i = 0; i < p; ++i) {
            const float ai = arow[i];
            float* __restrict orow = out.row(i).data();
            for (std::size_t j = 0; j < m; ++j) orow[j] += ai * brow[j];
        }
    }
}

void add_row_bias(Matrix& m, const Matrix& bias) {
    if (bias.rows() != 1 || bias.cols() != m.cols()) throw ShapeError("add_row_bias: bias shape " + shape_str(bias));
    const float* __restrict bp = bias.values().data();
    for (std::size_t i = 0; i < m.rows(); ++i) {
        float* __restrict r = m.row(i).data();
        for (std::size_t j = 0; j < m.cols(); ++j) r[j] += bp[j];
    }
}

void softmax_inplace(std::span<float> v) {
    if (v.empty()) return;
    const float mx = *std::max_element(v.begin(), v.end());
    float sum = 0.0f;
    for (float& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    const float inv = 1.0f / sum;
    for (float& x : v) x *= inv;
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out = m;
    for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
    return out;
}

std::vector<float> layer_norm(std::span<const float> v, std::span<const float> gain, std::span<const float> bias,
                              float eps) {
    if (gain.size() != v.size() || bias.size() != v.size()) throw ShapeError("layer_norm: length mismatch");
    const std::size_t n = v.size();
    if (n == 0) return {};
    float mean = 0.0f;
    for (float x : v) mean += x;
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (float x : v) var += (x - mean) * (x - mean);
    var /= static_cast<float>(n);
    const float rstd = 1.0f / std::sqrt(var + eps);
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = (v[i] - mean) * rstd * gain[i] + bias[i];
    return out;
}

float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2.0))); }

float gelu_grad(float x) {
    const float cdf = 0.5f * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2.0)));
    const float pdf = std::exp(-0.5f * x * x) * static_cast<float>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

std::vector<float> gelu(std::span<const float> v) {
    std::vector<float> out(v.size());
    std::transform(v.begin(), v.end(), out.begin(), [](float x) { return gelu(x); });
    return out;
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) : key_(mix64(mix64(seed) ^ (stream * 0x9e3779b97f4a7c15ULL + 1))) {}

Rng::Rng(std::uint64_t key, std::uint64_t counter, int) : key_(key), counter_(counter) {}

std::uint64_t Rng::next_u64() {
    const std::uint64_t c = counter_++;
    return mix64(key_ ^ mix64(c + 0x632be59bd9b4e019ULL));
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

float Rng::normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
}

std::size_t Rng::below(std::size_t n) {
    if (n == 0) throw ContractError("Rng::below(0)");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
}

Rng Rng::fork(std::uint64_t stream) const { return Rng(mix64(key_ + mix64(stream ^ 0xd1b54a32d192ed03ULL)), 0, 0); }

double rng_uniform(Rng& rng) { return rng.uniform(); }

std::size_t rng_categorical(Rng& rng, std::span<const float> probs) {
    if (probs.empty()) throw ContractError("rng_categorical: empty distribution");
    double sum = 0.0;
    for (float p : probs) {
        if (!(p >= 0.0f)) throw ContractError("rng_categorical: negative or NaN probability");
        sum += p;
    }
    if (std::fabs(sum - 1.0) > 1e-4) throw ContractError("rng_categorical: probabilities do not sum to 1");
    const double u = rng.uniform() * sum;
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0f) continue;
        acc += probs[i];
        last_positive = i;
        if (u < acc) return i;
    }
    return last_positive;
}

}  // namespace ilrr
