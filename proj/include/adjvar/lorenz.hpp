#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <utility>
#include <vector>

#include "adjvar/errors.hpp"
#include "adjvar/smallmat.hpp"

namespace adjvar {

using State = std::array<double, 3>;
using Obs = std::array<double, 2>;

struct LorenzParams {
    double sigma = 10.0;
    double rho = 28.0;
    double beta = 8.0 / 3.0;
};

/// One assimilation interval of length dt, integrated with `substeps` classical
/// RK4 steps of size dt/substeps.
struct IntegratorSpec {
    double dt = 0.12;
    int substeps = 50;
};

struct Trajectory {
    std::vector<State> states;
    int t0 = 0;
    double dt = 0.12;
};

inline State rhs(const LorenzParams& p, const State& x) {
    return {p.sigma * (x[1] - x[0]),
            x[0] * (p.rho - x[2]) - x[1],
            x[0] * x[1] - p.beta * x[2]};
}

inline Mat rhs_jacobian(const LorenzParams& p, const State& x) {
    Mat j(3, 3);
    j(0, 0) = -p.sigma; j(0, 1) = p.sigma;  j(0, 2) = 0.0;
    j(1, 0) = p.rho - x[2]; j(1, 1) = -1.0; j(1, 2) = -x[0];
    j(2, 0) = x[1];     j(2, 1) = x[0];     j(2, 2) = -p.beta;
    return j;
}

namespace detail {

using Mat3 = std::array<double, 9>; // row-major 3x3, stack-allocated hot path

inline Mat3 jac3(const LorenzParams& p, const State& x) {
    return {-p.sigma, p.sigma, 0.0,
            p.rho - x[2], -1.0, -x[0],
            x[1], x[0], -p.beta};
}

inline Mat3 mul3(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) {
            const double aik = a[3 * i + k];
            for (int j = 0; j < 3; ++j) c[3 * i + j] += aik * b[3 * k + j];
        }
    return c;
}

/// I + s*a
inline Mat3 id_plus(const Mat3& a, double s) {
    Mat3 c{};
    for (int i = 0; i < 9; ++i) c[i] = s * a[i];
    c[0] += 1.0; c[4] += 1.0; c[8] += 1.0;
    return c;
}

inline void check_finite(const State& x) {
    if (!(std::isfinite(x[0]) && std::isfinite(x[1]) && std::isfinite(x[2])))
        throw NonFiniteState("integration produced a non-finite state");
}

} // namespace detail

/// Composition of spec.substeps classical RK4 steps over one interval.
inline State propagate(const LorenzParams& p, const IntegratorSpec& spec, State x) {
    const double h = spec.dt / spec.substeps;
    detail::check_finite(x);
    for (int s = 0; s < spec.substeps; ++s) {
        const State k1 = rhs(p, x);
        const State x2 = {x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1], x[2] + 0.5 * h * k1[2]};
        const State k2 = rhs(p, x2);
        const State x3 = {x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1], x[2] + 0.5 * h * k2[2]};
        const State k3 = rhs(p, x3);
        const State x4 = {x[0] + h * k3[0], x[1] + h * k3[1], x[2] + h * k3[2]};
        const State k4 = rhs(p, x4);
        for (int i = 0; i < 3; ++i)
            x[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        detail::check_finite(x);
    }
    return x;
}

/// Propagated state together with the exact Jacobian M of the discrete RK4
/// composite map: the 3x3 identity is pushed through every internal stage, so
/// M is the derivative of the implemented map, not an ODE-level approximation.
inline std::pair<State, Mat> tangent_linear(const LorenzParams& p,
                                            const IntegratorSpec& spec, State x) {
    using detail::Mat3;
    const double h = spec.dt / spec.substeps;
    detail::check_finite(x);
    Mat3 M{1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0};
    for (int s = 0; s < spec.substeps; ++s) {
        const State k1 = rhs(p, x);
        const Mat3 A1 = detail::jac3(p, x);
        const State x2 = {x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1], x[2] + 0.5 * h * k1[2]};
        const State k2 = rhs(p, x2);
        const Mat3 A2 = detail::mul3(detail::jac3(p, x2), detail::id_plus(A1, 0.5 * h));
        const State x3 = {x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1], x[2] + 0.5 * h * k2[2]};
        const State k3 = rhs(p, x3);
        const Mat3 A3 = detail::mul3(detail::jac3(p, x3), detail::id_plus(A2, 0.5 * h));
        const State x4 = {x[0] + h * k3[0], x[1] + h * k3[1], x[2] + h * k3[2]};
        const State k4 = rhs(p, x4);
        const Mat3 A4 = detail::mul3(detail::jac3(p, x4), detail::id_plus(A3, h));
        Mat3 Mstep{};
        for (int i = 0; i < 9; ++i)
            Mstep[i] = (h / 6.0) * (A1[i] + 2.0 * A2[i] + 2.0 * A3[i] + A4[i]);
        Mstep[0] += 1.0; Mstep[4] += 1.0; Mstep[8] += 1.0;
        M = detail::mul3(Mstep, M);
        for (int i = 0; i < 3; ++i)
            x[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        detail::check_finite(x);
    }
    Mat out(3, 3);
    for (int i = 0; i < 9; ++i) out.data()[i] = M[i];
    return {x, out};
}

/// M^T v, computed by explicitly transposing the tangent-linear matrix and
/// multiplying, so it is bit-identical to that reference formulation.
inline State adjoint_vec(const LorenzParams& p, const IntegratorSpec& spec,
                         const State& x, const State& v) {
    const Mat M = tangent_linear(p, spec, x).second;
    const Mat Mt = M.transpose();
    State r{};
    for (int i = 0; i < 3; ++i)
        r[i] = Mt(i, 0) * v[0] + Mt(i, 1) * v[1] + Mt(i, 2) * v[2];
    return r;
}

inline Trajectory generate_truth(const LorenzParams& p, const IntegratorSpec& spec,
                                 const State& x0, int nsteps) {
    Trajectory traj;
    traj.dt = spec.dt;
    traj.states.reserve(nsteps + 1);
    traj.states.push_back(x0);
    for (int i = 0; i < nsteps; ++i)
        traj.states.push_back(propagate(p, spec, traj.states.back()));
    return traj;
}

/// Observation operator: H projects onto observed components, R is the
/// observation-error covariance. Defaults observe the first and third state
/// components with unit-variance independent noise.
struct ObsOperator {
    Mat H;
    Mat R;
    SpdFactor r_factor;

    ObsOperator(Mat h, Mat r) : H(std::move(h)), R(r), r_factor(cholesky(r)) {}
    ObsOperator(Mat h, Mat r, SpdFactor rf)
        : H(std::move(h)), R(std::move(r)), r_factor(std::move(rf)) {}

    static ObsOperator standard() {
        Mat h(2, 3);
        h(0, 0) = 1.0;
        h(1, 2) = 1.0;
        return ObsOperator(std::move(h), Mat::identity(2));
    }
};

/// H x + eta per trajectory state, eta ~ N(0, R) drawn in trajectory order.
inline std::vector<Obs> observe(const ObsOperator& obs, const Trajectory& traj,
                                RngStream& rng) {
    std::vector<Obs> out;
    out.reserve(traj.states.size());
    for (const State& x : traj.states) {
        const Vec hx = obs.H * Vec{x[0], x[1], x[2]};
        const Vec noisy = sample_gaussian(hx, obs.r_factor, rng);
        out.push_back({noisy[0], noisy[1]});
    }
    return out;
}

/// True when consecutive states are reproduced by propagate under `spec`.
/// Exercised from tests; production paths skip it for speed.
inline bool trajectory_consistent(const LorenzParams& p, const IntegratorSpec& spec,
                                  const Trajectory& traj, double tol = 1e-12) {
    for (std::size_t i = 0; i + 1 < traj.states.size(); ++i) {
        const State next = propagate(p, spec, traj.states[i]);
        for (int c = 0; c < 3; ++c)
            if (std::abs(next[c] - traj.states[i + 1][c]) > tol) return false;
    }
    return true;
}

inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
    os << "step,x,y,z\n";
    char buf[96];
    for (std::size_t i = 0; i < traj.states.size(); ++i) {
        const State& s = traj.states[i];
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n",
                      i + static_cast<std::size_t>(traj.t0), s[0], s[1], s[2]);
        os << buf;
    }
}

} // namespace adjvar
