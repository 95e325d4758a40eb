#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "adjvar/errors.hpp"

namespace adjvar {

using Vec = std::vector<double>;

/// Dense row-major matrix. Dimensions are fixed at construction; the sizes
/// this project needs (3, 9, 25, 178) make anything fancier pointless.
class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    Mat transpose() const {
        Mat t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    double frobenius_norm() const {
        double s = 0.0;
        for (double x : data_) s += x * x;
        return std::sqrt(s);
    }

    bool operator==(const Mat& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

inline Mat operator*(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows())
        throw DimensionMismatch("matrix product: inner dimensions disagree");
    Mat c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

inline Vec operator*(const Mat& a, const Vec& v) {
    if (a.cols() != v.size())
        throw DimensionMismatch("matrix-vector product: dimensions disagree");
    Vec r(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * v[j];
        r[i] = s;
    }
    return r;
}

inline Mat operator-(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionMismatch("matrix difference: dimensions disagree");
    Mat c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = a(i, j) - b(i, j);
    return c;
}

inline double dot(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw DimensionMismatch("dot: lengths disagree");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Reproducible random stream keyed by (seed, stream id).
///
/// The engine is std::mt19937_64, whose output sequence is pinned by the
/// standard, seeded with a splitmix64-style hash of (seed, stream) so that
/// distinct stream ids give statistically independent sequences.
/// uniform() maps the raw 64-bit draw to (0, 1]; normal() uses the classic
/// Box-Muller pair transform and caches the second variate, so normal draws
/// consume uniforms two at a time.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream)
        : engine_(mix(seed, stream)) {}

    double uniform() {
        const std::uint64_t x = engine_();
        return (static_cast<double>(x >> 11) + 1.0) * 0x1.0p-53;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n). Modulo bias is ~n/2^64, irrelevant here.
    std::uint64_t uniform_index(std::uint64_t n) { return engine_() % n; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[uniform_index(i)]);
    }

private:
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
        auto fin = [](std::uint64_t z) {
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            return z ^ (z >> 31);
        };
        std::uint64_t x = fin(seed + 0x9e3779b97f4a7c15ULL);
        x ^= fin(stream + 0x9e3779b97f4a7c15ULL * 2);
        return fin(x + 0x9e3779b97f4a7c15ULL);
    }

    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// Lower-triangular Cholesky factor L of a symmetric positive-definite A,
/// A = L L^T. Supports the A^{-1}-weighted norms in the assimilation cost and
/// correlated Gaussian sampling.
class SpdFactor {
public:
    SpdFactor() : L_(Mat::identity(3)) {}
    explicit SpdFactor(Mat lower) : L_(std::move(lower)) {}

    const Mat& lower() const { return L_; }
    std::size_t dim() const { return L_.rows(); }

    /// Forward substitution: solve L y = b.
    Vec solve_lower(const Vec& b) const {
        if (b.size() != dim()) throw DimensionMismatch("solve_lower: size disagrees");
        Vec y(b.size());
        for (std::size_t i = 0; i < b.size(); ++i) {
            double s = b[i];
            for (std::size_t j = 0; j < i; ++j) s -= L_(i, j) * y[j];
            y[i] = s / L_(i, i);
        }
        return y;
    }

    /// Back substitution: solve L^T x = y.
    Vec solve_upper(const Vec& y) const {
        if (y.size() != dim()) throw DimensionMismatch("solve_upper: size disagrees");
        Vec x(y.size());
        for (std::size_t ii = y.size(); ii-- > 0;) {
            double s = y[ii];
            for (std::size_t j = ii + 1; j < y.size(); ++j) s -= L_(j, ii) * x[j];
            x[ii] = s / L_(ii, ii);
        }
        return x;
    }

    /// Solve A x = b via the two triangular solves.
    Vec solve(const Vec& b) const { return solve_upper(solve_lower(b)); }

private:
    Mat L_;
};

/// Cholesky factorization of a symmetric positive-definite matrix.
/// Throws NotPositiveDefinite when a pivot is not strictly positive, which is
/// how bad covariance inputs surface.
inline SpdFactor cholesky(const Mat& a) {
    if (a.rows() != a.cols()) throw DimensionMismatch("cholesky: matrix not square");
    const std::size_t n = a.rows();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (std::abs(a(i, j) - a(j, i)) > 1e-12)
                throw NotPositiveDefinite("cholesky: matrix not symmetric");
    Mat L(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= L(i, k) * L(j, k);
            if (i == j) {
                if (s <= 0.0) throw NotPositiveDefinite("cholesky: nonpositive pivot");
                L(i, i) = std::sqrt(s);
            } else {
                L(i, j) = s / L(j, j);
            }
        }
    }
    return SpdFactor(std::move(L));
}

/// v^T A^{-1} v given the factor of A.
inline double weighted_norm_sq(const Vec& v, const SpdFactor& f) {
    if (v.size() != f.dim()) throw DimensionMismatch("weighted_norm_sq: size disagrees");
    const Vec y = f.solve_lower(v);
    return dot(y, y);
}

/// mean + L z with z a vector of independent standard normals drawn from rng.
inline Vec sample_gaussian(const Vec& mean, const SpdFactor& f, RngStream& rng) {
    if (mean.size() != f.dim()) throw DimensionMismatch("sample_gaussian: size disagrees");
    Vec z(mean.size());
    for (double& zi : z) zi = rng.normal();
    Vec out = mean;
    const Mat& L = f.lower();
    for (std::size_t i = 0; i < mean.size(); ++i)
        for (std::size_t j = 0; j <= i; ++j) out[i] += L(i, j) * z[j];
    return out;
}

} // namespace adjvar
