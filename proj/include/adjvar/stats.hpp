#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

#include "adjvar/errors.hpp"

namespace adjvar {

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw DimensionMismatch("mean_of: empty sample");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Sample standard deviation with the n-1 denominator.
inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) throw DimensionMismatch("sample_std: need at least two values");
    const double m = mean_of(v);
    double sq = 0.0;
    for (double x : v) sq += (x - m) * (x - m);
    return std::sqrt(sq / static_cast<double>(v.size() - 1));
}

namespace detail {

/// Continued fraction for the incomplete beta, evaluated with the modified
/// Lentz method. Converges quickly for x < (a+1)/(a+b+2); callers use the
/// symmetry transform for the other half of the domain.
inline double beta_cont_frac(double a, double b, double x) {
    constexpr int max_iter = 400;
    constexpr double eps = 3e-16;
    constexpr double fpmin = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

} // namespace detail

/// Regularized incomplete beta function I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0))
        throw std::domain_error("regularized_incomplete_beta: a and b must be positive");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cont_frac(a, b, x) / a;
    return 1.0 - front * detail::beta_cont_frac(b, a, 1.0 - x) / b;
}

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    bool zero_variance = false;
};

/// Two-sided paired Student t-test on the element-wise differences a[i] - b[i],
/// with n-1 degrees of freedom and the p-value taken from the regularized
/// incomplete beta. Identical differences across all pairs have no variance to
/// test against; that branch is flagged and reports p = 1 when the common
/// difference is 0 and p = 0 otherwise.
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimensionMismatch("paired_t_test: sample lengths differ");
    const std::size_t n = a.size();
    if (n < 2) throw DimensionMismatch("paired_t_test: need at least two pairs");

    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];

    TTestResult res;
    bool all_equal = true;
    for (std::size_t i = 1; i < n; ++i)
        if (d[i] != d[0]) {
            all_equal = false;
            break;
        }
    if (all_equal) {
        res.zero_variance = true;
        if (d[0] == 0.0) {
            res.t = 0.0;
            res.p = 1.0;
        } else {
            res.t = std::copysign(std::numeric_limits<double>::infinity(), d[0]);
            res.p = 0.0;
        }
        return res;
    }

    const double dbar = mean_of(d);
    const double sd = sample_std(d);
    const double dof = static_cast<double>(n - 1);
    res.t = dbar / (sd / std::sqrt(static_cast<double>(n)));
    res.p = regularized_incomplete_beta(0.5 * dof, 0.5, dof / (dof + res.t * res.t));
    return res;
}

} // namespace adjvar
