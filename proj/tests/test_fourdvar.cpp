#include <catch2/catch.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "adjvar/fourdvar.hpp"

using namespace adjvar;

namespace {

const LorenzParams kP;
const IntegratorSpec kSpec;

State random_attractor_state(RngStream& rng) {
    State x = {1.0 + rng.normal(), 1.0 + rng.normal(), 24.0 + rng.normal()};
    for (int i = 0; i < 40; ++i) x = propagate(kP, kSpec, x);
    return x;
}

FourDVarProblem exact_problem(const ModelPair& model, const State& background,
                              int n_obs, RngStream& rng, double noise = 1.0) {
    FourDVarProblem prob;
    prob.background = background;
    prob.b0 = cholesky(default_background_covariance());
    prob.model = &model;
    State x = background;
    for (int i = 0; i < n_obs; ++i) {
        x = propagate(kP, kSpec, x);
        Obs y{};
        const Vec hx = prob.obs_op.H * Vec{x[0], x[1], x[2]};
        for (int k = 0; k < 2; ++k) y[k] = hx[k] + noise * rng.normal();
        prob.obs.push_back(y);
    }
    return prob;
}

State fd_gradient(const FourDVarProblem& prob, const State& x0, double h = 1e-6) {
    State g{};
    for (int k = 0; k < 3; ++k) {
        State xp = x0, xm = x0;
        xp[k] += h;
        xm[k] -= h;
        g[k] = (cost(prob, xp) - cost(prob, xm)) / (2.0 * h);
    }
    return g;
}

double rel_grad_err(const State& a, const State& b) {
    double num = 0.0, den = 0.0;
    for (int k = 0; k < 3; ++k) {
        num += (a[k] - b[k]) * (a[k] - b[k]);
        den += b[k] * b[k];
    }
    return std::sqrt(num) / std::max(1.0, std::sqrt(den));
}

// Compact Nelder-Mead used only as a derivative-free cross-check.
template <class F>
Vec nelder_mead(F&& f, Vec x0, double scale, int iters) {
    const std::size_t n = x0.size();
    std::vector<Vec> simplex{x0};
    for (std::size_t i = 0; i < n; ++i) {
        Vec v = x0;
        v[i] += scale;
        simplex.push_back(v);
    }
    std::vector<double> fv(simplex.size());
    for (std::size_t i = 0; i < simplex.size(); ++i) fv[i] = f(simplex[i]);
    for (int it = 0; it < iters; ++it) {
        std::vector<std::size_t> idx(simplex.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return fv[a] < fv[b]; });
        std::vector<Vec> sx;
        std::vector<double> sf;
        for (auto i : idx) {
            sx.push_back(simplex[i]);
            sf.push_back(fv[i]);
        }
        simplex = sx;
        fv = sf;
        Vec centroid(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) centroid[j] += simplex[i][j] / n;
        }
        auto blend = [&](double t) {
            Vec v(n);
            for (std::size_t j = 0; j < n; ++j)
                v[j] = centroid[j] + t * (simplex[n][j] - centroid[j]);
            return v;
        };
        const Vec refl = blend(-1.0);
        const double fr = f(refl);
        if (fr < fv[0]) {
            const Vec exp_pt = blend(-2.0);
            const double fe = f(exp_pt);
            if (fe < fr) {
                simplex[n] = exp_pt;
                fv[n] = fe;
            } else {
                simplex[n] = refl;
                fv[n] = fr;
            }
        } else if (fr < fv[n - 1]) {
            simplex[n] = refl;
            fv[n] = fr;
        } else {
            const Vec con = blend(0.5);
            const double fc = f(con);
            if (fc < fv[n]) {
                simplex[n] = con;
                fv[n] = fc;
            } else {
                for (std::size_t i = 1; i <= n; ++i) {
                    for (std::size_t j = 0; j < n; ++j)
                        simplex[i][j] = 0.5 * (simplex[i][j] + simplex[0][j]);
                    fv[i] = f(simplex[i]);
                }
            }
        }
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < fv.size(); ++i)
        if (fv[i] < fv[best]) best = i;
    return simplex[best];
}

} // namespace

TEST_CASE("cost vanishes for a perfect prior with perfect data", "[fourdvar]") {
    const ModelPair model = ModelPair::exact();
    RngStream rng(101, 0);
    const State xb = random_attractor_state(rng);
    FourDVarProblem prob = exact_problem(model, xb, 2, rng, 0.0);
    CHECK(cost(prob, xb) == Approx(0.0).margin(1e-20));
    const State g = gradient(prob, xb);
    for (int k = 0; k < 3; ++k) CHECK(std::fabs(g[k]) <= 1e-12);
}

TEST_CASE("prior-only cost is half the squared background departure", "[fourdvar]") {
    const ModelPair model = ModelPair::exact();
    FourDVarProblem prob;
    prob.background = {1.0, 2.0, 3.0};
    prob.b0 = cholesky(Mat::identity(3));
    prob.model = &model;
    const State x0 = {2.0, 0.0, 5.0};
    CHECK(cost(prob, x0) == Approx(0.5 * (1.0 + 4.0 + 4.0)));
    const State g = gradient(prob, x0);
    CHECK(g[0] == Approx(1.0));
    CHECK(g[1] == Approx(-2.0));
    CHECK(g[2] == Approx(2.0));
}

TEST_CASE("cost is invariant to permuting observation components", "[fourdvar]") {
    const ModelPair model = ModelPair::exact();
    RngStream rng(102, 0);
    const State xb = random_attractor_state(rng);
    FourDVarProblem prob = exact_problem(model, xb, 2, rng);

    FourDVarProblem swapped = prob;
    Mat h_swapped(2, 3);
    h_swapped(0, 2) = 1.0;   // rows of the standard operator exchanged
    h_swapped(1, 0) = 1.0;
    swapped.obs_op = ObsOperator(h_swapped, Mat::identity(2));
    for (Obs& y : swapped.obs) std::swap(y[0], y[1]);

    const State x0 = random_attractor_state(rng);
    CHECK(cost(prob, x0) == Approx(cost(swapped, x0)).epsilon(1e-14));
}

TEST_CASE("cost propagates model blow-up as a state error", "[fourdvar]") {
    const ModelPair model = ModelPair::exact();
    RngStream rng(103, 0);
    const State xb = random_attractor_state(rng);
    const FourDVarProblem prob = exact_problem(model, xb, 2, rng);
    CHECK_THROWS_AS(cost(prob, State{1e8, 1e8, 1e8}), NonFiniteState);
    CHECK_THROWS_AS(gradient(prob, State{1e8, 1e8, 1e8}), NonFiniteState);
}

TEST_CASE("exact-model gradient matches finite differences", "[fourdvar]") {
    const ModelPair model = ModelPair::exact();
    RngStream rng(104, 0);
    for (int trial = 0; trial < 10; ++trial) {
        const State xb = random_attractor_state(rng);
        const FourDVarProblem prob = exact_problem(model, xb, 2, rng);
        State x0 = xb;
        for (int k = 0; k < 3; ++k) x0[k] += 0.5 * rng.normal();
        CHECK(rel_grad_err(gradient(prob, x0), fd_gradient(prob, x0)) <= 1e-6);
    }
}

TEST_CASE("surrogate-model gradient matches finite differences", "[fourdvar]") {
    RngStream prng(105, 0);
    MlpParams theta;
    for (double& x : theta.flat) x = 0.2 * prng.normal();
    const ModelPair model = ModelPair::surrogate(Method::Standard, theta);
    RngStream rng(106, 0);
    for (int trial = 0; trial < 5; ++trial) {
        FourDVarProblem prob;
        prob.background = {rng.normal(), rng.normal(), rng.normal()};
        prob.b0 = cholesky(default_background_covariance());
        prob.model = &model;
        State x = prob.background;
        for (int i = 0; i < 2; ++i) {
            x = model.forward(x);
            Obs y{};
            const Vec hx = prob.obs_op.H * Vec{x[0], x[1], x[2]};
            for (int k = 0; k < 2; ++k) y[k] = hx[k] + rng.normal();
            prob.obs.push_back(y);
        }
        State x0 = prob.background;
        x0[0] += 0.3;
        CHECK(rel_grad_err(gradient(prob, x0), fd_gradient(prob, x0)) <= 1e-6);
    }
}

TEST_CASE("independent pair gradient is computable but unconstrained", "[fourdvar]") {
    RngStream prng(107, 0);
    MlpParams theta;
    for (double& x : theta.flat) x = 0.2 * prng.normal();
    AdjNetParams phi;
    for (double& x : phi.flat) x = 0.2 * prng.normal();
    const ModelPair model = ModelPair::independent(Method::Indep, theta, phi);

    FourDVarProblem prob;
    prob.background = {0.5, -0.25, 1.0};
    prob.b0 = cholesky(default_background_covariance());
    prob.model = &model;
    State x = model.forward(prob.background);
    Obs y{};
    const Vec hx = prob.obs_op.H * Vec{x[0], x[1], x[2]};
    y[0] = hx[0] + 0.5;
    y[1] = hx[1] - 0.25;
    prob.obs.push_back(y);

    const State g = gradient(prob, prob.background);
    for (int k = 0; k < 3; ++k) CHECK(std::isfinite(g[k]));
}

TEST_CASE("bfgs solves the identity quadratic immediately", "[fourdvar]") {
    const Vec a = {3.0, -1.0, 2.0};
    auto f = [&](const Vec& x) {
        double s = 0.0;
        for (int i = 0; i < 3; ++i) s += 0.5 * (x[i] - a[i]) * (x[i] - a[i]);
        return s;
    };
    auto g = [&](const Vec& x) {
        Vec v(3);
        for (int i = 0; i < 3; ++i) v[i] = x[i] - a[i];
        return v;
    };
    const BfgsResult r = bfgs_minimize(f, g, Vec{10.0, 10.0, -5.0});
    CHECK(r.termination == Termination::Converged);
    CHECK(r.iterations <= 2);
    for (int i = 0; i < 3; ++i) CHECK(std::fabs(r.x[i] - a[i]) <= 1e-8);
}

TEST_CASE("bfgs converges tightly on strictly convex quadratics", "[fourdvar]") {
    // A = L L^T with distinct eigenvalue scales.
    const double A[3][3] = {{4.0, 1.0, 0.0}, {1.0, 3.0, 0.5}, {0.0, 0.5, 2.0}};
    auto f = [&](const Vec& x) {
        double s = 0.0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) s += 0.5 * x[i] * A[i][j] * x[j];
        return s;
    };
    auto g = [&](const Vec& x) {
        Vec v(3, 0.0);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) v[i] += A[i][j] * x[j];
        return v;
    };
    RngStream rng(108, 0);
    BfgsOptions opts;
    opts.grad_tol = 1e-8;
    opts.step_tol = 1e-14;   // let the gradient test govern termination
    for (int trial = 0; trial < 10; ++trial) {
        const Vec x0 = {5.0 * rng.normal(), 5.0 * rng.normal(), 5.0 * rng.normal()};
        const BfgsResult r = bfgs_minimize(f, g, x0, opts);
        CHECK(r.termination == Termination::Converged);
        CHECK(r.iterations <= 12);
        Vec gr = g(r.x);
        for (double c : gr) CHECK(std::fabs(c) <= 1e-8);
    }
}

TEST_CASE("bfgs solves rosenbrock from the standard start", "[fourdvar]") {
    auto f = [](const Vec& x) {
        const double a = 1.0 - x[0];
        const double b = x[1] - x[0] * x[0];
        return a * a + 100.0 * b * b;
    };
    auto g = [](const Vec& x) {
        const double b = x[1] - x[0] * x[0];
        return Vec{-2.0 * (1.0 - x[0]) - 400.0 * x[0] * b, 200.0 * b};
    };
    const BfgsResult r = bfgs_minimize(f, g, Vec{-1.2, 1.0});
    CHECK(r.iterations <= 400);
    CHECK(std::hypot(r.x[0] - 1.0, r.x[1] - 1.0) <= 1e-5);
}

TEST_CASE("bfgs reports a fruitless line search on an ascent gradient", "[fourdvar]") {
    auto f = [](const Vec& x) { return 0.5 * x[0] * x[0]; };
    auto g = [](const Vec& x) { return Vec{-x[0]}; };   // negated: ascent direction
    const BfgsResult r = bfgs_minimize(f, g, Vec{2.0});
    CHECK(r.termination == Termination::LineSearchFailed);
    CHECK(r.x[0] == 2.0);
    CHECK(r.iterations == 0);
    REQUIRE_FALSE(r.trace.empty());
    CHECK(r.trace.front().f == Approx(2.0));
}

TEST_CASE("bfgs rejects steps into non-finite territory", "[fourdvar]") {
    auto f = [](const Vec& x) {
        if (x[0] > 1.5) return std::numeric_limits<double>::quiet_NaN();
        return (x[0] - 1.0) * (x[0] - 1.0);
    };
    auto g = [](const Vec& x) { return Vec{2.0 * (x[0] - 1.0)}; };
    const BfgsResult r = bfgs_minimize(f, g, Vec{-3.0});
    CHECK(std::isfinite(r.f));
    CHECK(std::fabs(r.x[0] - 1.0) <= 1e-6);
}

TEST_CASE("bfgs trace is monotone in f and wall time", "[fourdvar]") {
    const ModelPair model = ModelPair::exact();
    RngStream rng(109, 0);
    const State xb = random_attractor_state(rng);
    const FourDVarProblem prob = exact_problem(model, xb, 2, rng);
    const WindowResult w = assimilate_window(prob);
    REQUIRE(w.trace.size() >= 2);
    for (std::size_t i = 1; i < w.trace.size(); ++i) {
        CHECK(w.trace[i].f <= w.trace[i - 1].f);
        CHECK(w.trace[i].wall_time_s >= w.trace[i - 1].wall_time_s);
        CHECK(w.trace[i].iter == static_cast<int>(i));
    }
}

TEST_CASE("window assimilation with self-consistent data returns the background",
          "[fourdvar]") {
    const ModelPair model = ModelPair::exact();
    RngStream rng(110, 0);
    const State xb = random_attractor_state(rng);
    const FourDVarProblem prob = exact_problem(model, xb, 2, rng, 0.0);
    const WindowResult w = assimilate_window(prob);
    CHECK(w.termination == Termination::Converged);
    CHECK(w.iterations == 0);
    for (int k = 0; k < 3; ++k) CHECK(w.analysis[k] == xb[k]);
}

TEST_CASE("window assimilation never increases the cost", "[fourdvar]") {
    const ModelPair model = ModelPair::exact();
    RngStream rng(111, 0);
    for (int trial = 0; trial < 5; ++trial) {
        State truth = random_attractor_state(rng);
        State xb = truth;
        for (int k = 0; k < 3; ++k) xb[k] += 2.0 * rng.normal();
        FourDVarProblem prob = exact_problem(model, truth, 2, rng);
        prob.background = xb;
        const WindowResult w = assimilate_window(prob);
        CHECK(w.cost <= cost(prob, xb) + 1e-12);
    }
}

TEST_CASE("window analysis agrees with a derivative-free refinement", "[fourdvar]") {
    const ModelPair model = ModelPair::exact();
    RngStream rng(112, 0);
    const State truth = random_attractor_state(rng);
    State xb = truth;
    for (int k = 0; k < 3; ++k) xb[k] += 1.5 * rng.normal();
    FourDVarProblem prob = exact_problem(model, truth, 2, rng);
    prob.background = xb;

    const WindowResult w = assimilate_window(prob);
    auto f = [&](const Vec& x) { return cost(prob, State{x[0], x[1], x[2]}); };
    Vec best = {w.analysis[0], w.analysis[1], w.analysis[2]};

    // coarse grid around the background, then simplex refinement
    Vec grid_best = {xb[0], xb[1], xb[2]};
    double grid_f = f(grid_best);
    for (int a = -2; a <= 2; ++a)
        for (int b = -2; b <= 2; ++b)
            for (int c = -2; c <= 2; ++c) {
                const Vec cand = {xb[0] + a, xb[1] + b, xb[2] + c};
                const double fc = f(cand);
                if (fc < grid_f) {
                    grid_f = fc;
                    grid_best = cand;
                }
            }
    const Vec refined = nelder_mead(f, nelder_mead(f, grid_best, 0.5, 300), 1e-3, 200);
    for (int k = 0; k < 3; ++k) CHECK(std::fabs(best[k] - refined[k]) <= 1e-4);
}

TEST_CASE("sequential run with noiseless data locks onto the truth", "[fourdvar][slow]") {
    SequentialConfig cfg;
    const ModelPair model = ModelPair::exact();
    const Trajectory truth =
        generate_truth(kP, kSpec, State{-10.0375, -4.3845, 34.6514}, cfg.n_time + cfg.window);
    const ObsOperator obs_op = ObsOperator::standard();
    std::vector<Obs> obs;
    for (const State& x : truth.states) {
        const Vec hx = obs_op.H * Vec{x[0], x[1], x[2]};
        obs.push_back({hx[0], hx[1]});
    }
    const SpdFactor b0 = cholesky(default_background_covariance());
    RngStream rng(113, 0);
    const SequentialResult run = sequential_run(cfg, model, truth, obs, b0, rng);
    REQUIRE(run.windows.size() == 550);
    const std::vector<State> truth_states(truth.states.begin(), truth.states.begin() + 550);
    const double rmse = spatiotemporal_rmse(run.analyses(), truth_states, cfg.spinup_discard);
    CHECK(rmse <= 0.1);
}

TEST_CASE("sequential runs are deterministic per seed", "[fourdvar]") {
    SequentialConfig cfg;
    cfg.n_time = 12;
    cfg.spinup_discard = 2;
    const ModelPair model = ModelPair::exact();
    const Trajectory truth =
        generate_truth(kP, kSpec, State{-10.0375, -4.3845, 34.6514}, cfg.n_time + cfg.window);
    const ObsOperator obs_op = ObsOperator::standard();
    RngStream obs_rng(114, 0);
    const std::vector<Obs> obs = observe(obs_op, truth, obs_rng);
    const SpdFactor b0 = cholesky(default_background_covariance());

    RngStream r1(115, 0), r2(115, 0);
    const SequentialResult a = sequential_run(cfg, model, truth, obs, b0, r1);
    const SequentialResult b = sequential_run(cfg, model, truth, obs, b0, r2);
    REQUIRE(a.windows.size() == b.windows.size());
    CHECK(a.initial_background == b.initial_background);
    for (std::size_t i = 0; i < a.windows.size(); ++i)
        CHECK(a.windows[i].analysis == b.windows[i].analysis);

    RngStream r3(116, 0);
    const SequentialResult c = sequential_run(cfg, model, truth, obs, b0, r3);
    CHECK(c.initial_background != a.initial_background);
}

TEST_CASE("sequential run aborts cleanly on model blow-up", "[fourdvar]") {
    SequentialConfig cfg;
    cfg.n_time = 5;
    cfg.spinup_discard = 0;
    ModelPair bad;
    bad.tag = Method::Standard;
    bad.forward = [](const State& x) {
        return State{x[0] * 1e120, x[1] * 1e120, x[2] * 1e120};
    };
    bad.adjoint_vec = [](const State&, const State& v) { return v; };
    const Trajectory truth =
        generate_truth(kP, kSpec, State{-10.0375, -4.3845, 34.6514}, cfg.n_time + cfg.window);
    const ObsOperator obs_op = ObsOperator::standard();
    RngStream obs_rng(117, 0);
    const std::vector<Obs> obs = observe(obs_op, truth, obs_rng);
    const SpdFactor b0 = cholesky(default_background_covariance());
    RngStream rng(118, 0);
    CHECK_THROWS_AS(sequential_run(cfg, bad, truth, obs, b0, rng), NonFiniteState);

    SequentialConfig long_cfg;
    RngStream rng2(119, 0);
    const Trajectory short_truth = generate_truth(kP, kSpec, truth.states[0], 10);
    CHECK_THROWS_AS(sequential_run(long_cfg, bad, short_truth, obs, b0, rng2),
                    DimensionMismatch);
}

TEST_CASE("spatiotemporal rmse has the pinned closed forms", "[fourdvar]") {
    std::vector<State> truth(60, State{1.0, 2.0, 3.0});
    std::vector<State> same = truth;
    CHECK(spatiotemporal_rmse(same, truth, 50) == 0.0);

    std::vector<State> offset = truth;
    for (State& x : offset)
        for (double& c : x) c += 0.25;
    CHECK(spatiotemporal_rmse(offset, truth, 50) == Approx(0.25).epsilon(1e-14));

    std::vector<State> single = truth;
    single[59] = {2.0, 2.0, 3.0};
    CHECK(spatiotemporal_rmse(single, truth, 59) == Approx(1.0 / std::sqrt(3.0)).epsilon(1e-14));

    // skipped entries cannot affect the value
    std::vector<State> scrambled = offset;
    for (int i = 0; i < 50; ++i) scrambled[i] = {999.0, -999.0, 0.0};
    CHECK(spatiotemporal_rmse(scrambled, truth, 50) == spatiotemporal_rmse(offset, truth, 50));

    CHECK_THROWS_AS(spatiotemporal_rmse(same, std::vector<State>(59), 0), DimensionMismatch);
    CHECK_THROWS_AS(spatiotemporal_rmse(same, truth, 60), DimensionMismatch);
}

TEST_CASE("analysis and trace csv exports follow the pinned layout", "[fourdvar]") {
    SequentialResult run;
    WindowResult w;
    w.analysis = {1.5, -2.25, 0.125};
    w.cost = 3.5;
    w.iterations = 7;
    w.termination = Termination::Converged;
    w.wall_time_s = 0.25;
    run.windows.push_back(w);
    std::ostringstream os;
    write_analyses_csv(os, run);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "step,x,y,z,cost,iterations,termination,wall_time_s");
    std::getline(is, line);
    CHECK(line == "0,1.5,-2.25,0.125,3.5,7,Converged,0.25");

    std::vector<TracePoint> trace = {{0, 0.0, 8.0}, {1, 0.5, 2.0}, {2, 0.75, 1.0}};
    std::ostringstream ts;
    write_opttrace_csv(ts, trace);
    std::istringstream tis(ts.str());
    std::getline(tis, line);
    CHECK(line == "iter,f_normalized,wall_time_s");
    std::getline(tis, line);
    CHECK(line == "0,1,0");
    std::getline(tis, line);
    CHECK(line == "1,0.25,0.5");
}
