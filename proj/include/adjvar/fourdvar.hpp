#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "adjvar/errors.hpp"
#include "adjvar/lorenz.hpp"
#include "adjvar/mlp.hpp"
#include "adjvar/smallmat.hpp"
#include "adjvar/training.hpp"

namespace adjvar {

/// A forward step map together with its adjoint action. For Exact both come
/// from the high-fidelity integrator; surrogate pairs wrap trained networks.
/// The Indep pairs use separately trained networks for the two roles, so their
/// adjoint action is generally not the derivative of their forward map.
struct ModelPair {
    Method tag = Method::Exact;
    std::function<State(const State&)> forward;
    std::function<State(const State&, const State&)> adjoint_vec;

    static ModelPair exact(const LorenzParams& p = LorenzParams{},
                           const IntegratorSpec& spec = IntegratorSpec{}) {
        ModelPair m;
        m.tag = Method::Exact;
        m.forward = [p, spec](const State& x) { return propagate(p, spec, x); };
        m.adjoint_vec = [p, spec](const State& x, const State& v) {
            const Mat mt = tangent_linear(p, spec, x).second.transpose();
            const Vec out = mt * Vec{v[0], v[1], v[2]};
            return State{out[0], out[1], out[2]};
        };
        return m;
    }

    static ModelPair surrogate(Method tag, const MlpParams& theta) {
        ModelPair m;
        m.tag = tag;
        m.forward = [theta](const State& x) { return adjvar::forward(theta, x); };
        m.adjoint_vec = [theta](const State& x, const State& v) {
            return jacobian_t_vec(theta, x, v);
        };
        return m;
    }

    static ModelPair independent(Method tag, const MlpParams& theta, const AdjNetParams& phi) {
        ModelPair m;
        m.tag = tag;
        m.forward = [theta](const State& x) { return adjvar::forward(theta, x); };
        m.adjoint_vec = [phi](const State& x, const State& v) {
            return adjnet_t_vec(phi, x, v);
        };
        return m;
    }

    static ModelPair from_trained(Method tag, const TrainedModel& model) {
        return model.adjoint_net ? independent(tag, model.forward_net, *model.adjoint_net)
                                 : surrogate(tag, model.forward_net);
    }
};

inline Mat default_background_covariance() {
    Mat b(3, 3);
    b(0, 0) = 12.4294; b(0, 1) = 12.4323; b(0, 2) = -0.2139;
    b(1, 0) = 12.4323; b(1, 1) = 16.0837; b(1, 2) = -0.0499;
    b(2, 0) = -0.2139; b(2, 1) = -0.0499; b(2, 2) = 14.7634;
    return b;
}

struct FourDVarProblem {
    State background{};
    SpdFactor b0;
    ObsOperator obs_op = ObsOperator::standard();
    std::vector<Obs> obs;        // y_1..y_n, one per window step
    const ModelPair* model = nullptr;
};

namespace detail {

inline void check_window_state(const State& x, std::size_t step) {
    for (double c : x)
        if (!std::isfinite(c))
            throw NonFiniteState("window state became non-finite at window step " +
                                 std::to_string(step));
}

inline std::vector<State> window_states(const FourDVarProblem& prob, const State& x0) {
    std::vector<State> states{x0};
    states.reserve(prob.obs.size() + 1);
    for (std::size_t i = 0; i < prob.obs.size(); ++i) {
        states.push_back(prob.model->forward(states.back()));
        check_window_state(states.back(), i + 1);
    }
    return states;
}

inline Vec innovation(const FourDVarProblem& prob, const State& x, const Obs& y) {
    const Vec hx = prob.obs_op.H * Vec{x[0], x[1], x[2]};
    Vec r(hx.size());
    for (std::size_t k = 0; k < hx.size(); ++k) r[k] = hx[k] - y[k];
    return r;
}

} // namespace detail

inline double cost(const FourDVarProblem& prob, const State& x0) {
    const std::vector<State> states = detail::window_states(prob, x0);
    const Vec d = {x0[0] - prob.background[0], x0[1] - prob.background[1],
                   x0[2] - prob.background[2]};
    double j = 0.5 * weighted_norm_sq(d, prob.b0);
    for (std::size_t i = 0; i < prob.obs.size(); ++i)
        j += 0.5 * weighted_norm_sq(detail::innovation(prob, states[i + 1], prob.obs[i]),
                                    prob.obs_op.r_factor);
    return j;
}

/// One reverse sweep: lambda picks up H^T R^{-1} (H x_i - y_i) at each
/// observation time and is pulled back through the model adjoint.
inline State gradient(const FourDVarProblem& prob, const State& x0) {
    const std::vector<State> states = detail::window_states(prob, x0);
    const std::size_t n = prob.obs.size();
    State lambda{};
    for (std::size_t i = n; i >= 1; --i) {
        const Vec r = detail::innovation(prob, states[i], prob.obs[i - 1]);
        const Vec w = prob.obs_op.H.transpose() * prob.obs_op.r_factor.solve(r);
        for (int k = 0; k < 3; ++k) lambda[k] += w[k];
        lambda = prob.model->adjoint_vec(states[i - 1], lambda);
    }
    const Vec d = {x0[0] - prob.background[0], x0[1] - prob.background[1],
                   x0[2] - prob.background[2]};
    const Vec prior = prob.b0.solve(d);
    return {prior[0] + lambda[0], prior[1] + lambda[1], prior[2] + lambda[2]};
}

// --- BFGS -------------------------------------------------------------------

enum class Termination { Converged, StepTooSmall, MaxIterations, LineSearchFailed };

inline std::string termination_name(Termination t) {
    switch (t) {
        case Termination::Converged: return "Converged";
        case Termination::StepTooSmall: return "StepTooSmall";
        case Termination::MaxIterations: return "MaxIterations";
        case Termination::LineSearchFailed: return "LineSearchFailed";
    }
    return "?";
}

struct BfgsOptions {
    double grad_tol = 1e-6;
    double step_tol = 1e-6;
    int max_iterations = 400;
    double c1 = 1e-4;
    double c2 = 0.9;
};

struct TracePoint {
    int iter = 0;
    double wall_time_s = 0.0;
    double f = 0.0;
};

struct BfgsResult {
    Vec x;
    double f = 0.0;
    int iterations = 0;
    Termination termination = Termination::Converged;
    std::vector<TracePoint> trace;
};

namespace detail {

inline double inf_norm(const Vec& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::fabs(x));
    return m;
}

inline double finite_or_inf(double x) {
    return std::isfinite(x) ? x : std::numeric_limits<double>::infinity();
}

struct LineSearchOutcome {
    bool ok = false;
    double alpha = 0.0;
    double f = 0.0;
    Vec g;
};

/// Strong-Wolfe line search: bracketing with expansion, then zoom by
/// safeguarded quadratic interpolation.
template <class F, class G>
LineSearchOutcome line_search(F&& f, G&& g, const Vec& x, const Vec& p, double f0,
                              const Vec& g0, const BfgsOptions& opts, double a_first = 1.0) {
    const std::size_t n = x.size();
    double dphi0 = 0.0;
    for (std::size_t i = 0; i < n; ++i) dphi0 += g0[i] * p[i];
    LineSearchOutcome out;
    if (!(dphi0 < 0.0)) return out;

    auto at = [&](double a) {
        Vec xa(n);
        for (std::size_t i = 0; i < n; ++i) xa[i] = x[i] + a * p[i];
        return xa;
    };
    auto phi = [&](double a) { return finite_or_inf(f(at(a))); };
    auto dphi = [&](double a, Vec& grad_out) {
        grad_out = g(at(a));
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i) d += grad_out[i] * p[i];
        return d;
    };
    auto accept = [&](double a, double fa, Vec grad_a) {
        out.ok = true;
        out.alpha = a;
        out.f = fa;
        out.g = std::move(grad_a);
    };

    // zoom on a bracket [lo, hi] where lo satisfies Armijo with the lower
    // value. Gives up once the bracket shrinks below the outer step tolerance:
    // any step that small terminates the outer loop regardless, and for
    // gradient/cost pairs that admit no Wolfe point (the two-network model)
    // this caps the wasted evaluations of a doomed search.
    auto zoom = [&](double lo, double hi, double phi_lo, double dphi_lo) {
        double phi_hi = phi(hi);
        for (int j = 0; j < 50; ++j) {
            const double span = hi - lo;
            if (std::fabs(span) * inf_norm(p) < opts.step_tol * std::max(1.0, inf_norm(x)))
                return;
            // minimizer of the quadratic through (lo, phi_lo, dphi_lo), (hi, phi_hi)
            double a = lo;
            const double denom = phi_hi - phi_lo - dphi_lo * span;
            if (denom > 0.0) a = lo - 0.5 * dphi_lo * span * span / denom;
            const double lob = std::min(lo, hi), hib = std::max(lo, hi);
            const double margin = 0.1 * (hib - lob);
            if (!(a > lob + margin && a < hib - margin)) a = 0.5 * (lo + hi);

            const double phi_a = phi(a);
            if (phi_a > f0 + opts.c1 * a * dphi0 || phi_a >= phi_lo) {
                hi = a;
                phi_hi = phi_a;
                continue;
            }
            Vec grad_a;
            const double dphi_a = dphi(a, grad_a);
            if (std::fabs(dphi_a) <= -opts.c2 * dphi0) {
                accept(a, phi_a, std::move(grad_a));
                return;
            }
            if (dphi_a * (hi - lo) >= 0.0) {
                hi = lo;
                phi_hi = phi_lo;
            }
            lo = a;
            phi_lo = phi_a;
            dphi_lo = dphi_a;
        }
    };

    double a_prev = 0.0, phi_prev = f0, dphi_prev = dphi0;
    double a = a_first;
    for (int i = 0; i < 30; ++i) {
        const double phi_a = phi(a);
        if (phi_a > f0 + opts.c1 * a * dphi0 || (i > 0 && phi_a >= phi_prev)) {
            zoom(a_prev, a, phi_prev, dphi_prev);
            return out;
        }
        Vec grad_a;
        const double dphi_a = dphi(a, grad_a);
        if (std::fabs(dphi_a) <= -opts.c2 * dphi0) {
            accept(a, phi_a, std::move(grad_a));
            return out;
        }
        if (dphi_a >= 0.0) {
            zoom(a, a_prev, phi_a, dphi_a);
            return out;
        }
        a_prev = a;
        phi_prev = phi_a;
        dphi_prev = dphi_a;
        a *= 2.5;
        if (a > 1e8) break;
    }
    return out;
}

} // namespace detail

/// BFGS with inverse-Hessian update and strong-Wolfe line search. All failure
/// modes are encoded in the termination reason; on a fruitless line search the
/// best iterate seen so far is returned.
template <class F, class G>
BfgsResult bfgs_minimize(F&& f, G&& g, const Vec& x0, const BfgsOptions& opts = BfgsOptions{}) {
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    auto seconds = [&] {
        return std::chrono::duration<double>(clock::now() - start).count();
    };

    const std::size_t n = x0.size();
    BfgsResult res;
    res.x = x0;
    res.f = detail::finite_or_inf(f(x0));
    Vec grad = g(x0);
    res.trace.push_back({0, seconds(), res.f});

    // inverse Hessian approximation, identity to start
    std::vector<Vec> h(n, Vec(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) h[i][i] = 1.0;

    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        if (detail::inf_norm(grad) <= opts.grad_tol) {
            res.termination = Termination::Converged;
            return res;
        }
        Vec p(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) p[i] -= h[i][j] * grad[j];

        // On the first iteration p = -g, so a unit step moves by |g| and can
        // leave the region where the cost is trustworthy. Start that one
        // search at ~1/|g| (the fminunc/scipy heuristic); later iterations are
        // Newton-scaled by H and start at 1.
        const double gn = detail::inf_norm(grad);
        const double a_first =
            iter == 0 && std::isfinite(gn) ? std::min(1.0, 1.0 / std::max(1e-12, gn)) : 1.0;
        const auto ls = detail::line_search(f, g, res.x, p, res.f, grad, opts, a_first);
        if (!ls.ok) {
            res.termination = Termination::LineSearchFailed;
            return res;
        }

        Vec s(n), y(n);
        double ys = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = ls.alpha * p[i];
            y[i] = ls.g[i] - grad[i];
            ys += y[i] * s[i];
        }
        for (std::size_t i = 0; i < n; ++i) res.x[i] += s[i];
        res.f = ls.f;
        grad = ls.g;
        res.iterations = iter + 1;
        res.trace.push_back({iter + 1, seconds(), res.f});

        if (detail::inf_norm(s) <= opts.step_tol * std::max(1.0, detail::inf_norm(res.x))) {
            res.termination = (detail::inf_norm(grad) <= opts.grad_tol)
                                  ? Termination::Converged
                                  : Termination::StepTooSmall;
            return res;
        }

        if (ys > 1e-12) {
            const double rho = 1.0 / ys;
            Vec hy(n, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) hy[i] += h[i][j] * y[j];
            double yhy = 0.0;
            for (std::size_t i = 0; i < n; ++i) yhy += y[i] * hy[i];
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] -
                               rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
    res.termination = Termination::MaxIterations;
    return res;
}

// --- window assimilation -----------------------------------------------------

struct WindowResult {
    State analysis{};
    double cost = 0.0;
    int iterations = 0;
    Termination termination = Termination::Converged;
    double wall_time_s = 0.0;
    std::vector<TracePoint> trace;
};

inline WindowResult assimilate_window(const FourDVarProblem& prob,
                                      const BfgsOptions& opts = BfgsOptions{}) {
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    auto f = [&prob](const Vec& x) { return cost(prob, State{x[0], x[1], x[2]}); };
    auto g = [&prob](const Vec& x) {
        const State gr = gradient(prob, State{x[0], x[1], x[2]});
        return Vec{gr[0], gr[1], gr[2]};
    };
    const Vec x0 = {prob.background[0], prob.background[1], prob.background[2]};
    BfgsResult r = bfgs_minimize(f, g, x0, opts);
    if (!std::isfinite(r.f) || !std::isfinite(r.x[0]) || !std::isfinite(r.x[1]) ||
        !std::isfinite(r.x[2]))
        throw NonFiniteState("window optimization ended at a non-finite cost");
    WindowResult w;
    w.analysis = {r.x[0], r.x[1], r.x[2]};
    w.cost = r.f;
    w.iterations = r.iterations;
    w.termination = r.termination;
    w.trace = std::move(r.trace);
    w.wall_time_s = std::chrono::duration<double>(clock::now() - start).count();
    return w;
}

// --- sequential assimilation -------------------------------------------------

struct SequentialConfig {
    int n_time = 550;
    int spinup_discard = 50;
    int window = 2;
    LorenzParams params;
    IntegratorSpec integrator;
};

struct SequentialResult {
    State initial_background{};
    std::vector<WindowResult> windows;

    std::vector<State> analyses() const {
        std::vector<State> out;
        out.reserve(windows.size());
        for (const WindowResult& w : windows) out.push_back(w.analysis);
        return out;
    }
};

/// Cycle the 4D-Var window over the run: each analysis is propagated by the
/// high-fidelity model (whatever the assimilating model pair is) to form the
/// next background. Window i assimilates the observations at steps i+1..i+window.
inline SequentialResult sequential_run(const SequentialConfig& cfg, const ModelPair& model,
                                       const Trajectory& truth, const std::vector<Obs>& obs,
                                       const SpdFactor& b0, RngStream& rng,
                                       const ObsOperator& obs_op = ObsOperator::standard(),
                                       const BfgsOptions& opts = BfgsOptions{}) {
    if (static_cast<int>(truth.states.size()) < cfg.n_time + cfg.window + 1)
        throw DimensionMismatch("sequential_run: truth trajectory too short");
    if (static_cast<int>(obs.size()) < cfg.n_time + cfg.window)
        throw DimensionMismatch("sequential_run: observation stream too short");

    SequentialResult result;
    const Vec mean = {truth.states[0][0], truth.states[0][1], truth.states[0][2]};
    const Vec drawn = sample_gaussian(mean, b0, rng);
    result.initial_background = {drawn[0], drawn[1], drawn[2]};

    State background = result.initial_background;
    for (int i = 0; i < cfg.n_time; ++i) {
        FourDVarProblem prob;
        prob.background = background;
        prob.b0 = b0;
        prob.obs_op = obs_op;
        prob.model = &model;
        for (int k = 1; k <= cfg.window; ++k) prob.obs.push_back(obs[i + k]);

        WindowResult w;
        try {
            w = assimilate_window(prob, opts);
        } catch (const NonFiniteState& e) {
            throw NonFiniteState("sequential_run aborted in window " + std::to_string(i) +
                                 ": " + e.what());
        }
        background = propagate(cfg.params, cfg.integrator, w.analysis);
        result.windows.push_back(std::move(w));
    }
    return result;
}

inline double spatiotemporal_rmse(const std::vector<State>& analyses,
                                  const std::vector<State>& truth, int skip = 50) {
    if (analyses.size() != truth.size())
        throw DimensionMismatch("spatiotemporal_rmse: length mismatch");
    if (skip < 0 || skip >= static_cast<int>(analyses.size()))
        throw DimensionMismatch("spatiotemporal_rmse: skip out of range");
    double sq = 0.0;
    const int n = static_cast<int>(analyses.size());
    for (int i = skip; i < n; ++i)
        for (int k = 0; k < 3; ++k) {
            const double d = analyses[i][k] - truth[i][k];
            sq += d * d;
        }
    return std::sqrt(sq / (static_cast<double>(n - skip) * 3.0));
}

// --- exports -----------------------------------------------------------------

inline void write_analyses_csv(std::ostream& os, const SequentialResult& run) {
    os << "step,x,y,z,cost,iterations,termination,wall_time_s\n";
    char buf[256];
    for (std::size_t i = 0; i < run.windows.size(); ++i) {
        const WindowResult& w = run.windows[i];
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%d,%s,%.17g\n", i,
                      w.analysis[0], w.analysis[1], w.analysis[2], w.cost, w.iterations,
                      termination_name(w.termination).c_str(), w.wall_time_s);
        os << buf;
    }
}

/// Optimizer trace with f normalized by its initial value.
inline void write_opttrace_csv(std::ostream& os, const std::vector<TracePoint>& trace) {
    os << "iter,f_normalized,wall_time_s\n";
    if (trace.empty()) return;
    const double f0 = trace.front().f;
    char buf[128];
    for (const TracePoint& t : trace) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", t.iter,
                      f0 != 0.0 ? t.f / f0 : t.f, t.wall_time_s);
        os << buf;
    }
}

} // namespace adjvar
