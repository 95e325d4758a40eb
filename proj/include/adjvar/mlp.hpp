#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adjvar/dataset.hpp"
#include "adjvar/errors.hpp"
#include "adjvar/smallmat.hpp"

namespace adjvar {

inline constexpr int kHidden = 25;
inline constexpr int kMlpParamCount = 25 * 3 + 25 + 3 * 25 + 3;   // 178
inline constexpr int kAdjNetParamCount = 25 * 3 + 25 + 3 * 25;    // 175

// Flat parameter layout shared by both architectures:
//   W1 row-major [0, 75), b1 [75, 100), W2 row-major [100, 175), b2 [175, 178).
// The adjoint network has no b2 and stops at 175.
inline constexpr int kW1Offset = 0;
inline constexpr int kB1Offset = 75;
inline constexpr int kW2Offset = 100;
inline constexpr int kB2Offset = 175;

/// Parameters of the 3 -> 25 -> 3 surrogate u -> W2 tanh(W1 u + b1) + b2,
/// held as the flattened vector theta that the optimizers update in place.
struct MlpParams {
    Vec flat = Vec(kMlpParamCount, 0.0);

    double w1(int h, int j) const { return flat[kW1Offset + 3 * h + j]; }
    double& w1(int h, int j) { return flat[kW1Offset + 3 * h + j]; }
    double b1(int h) const { return flat[kB1Offset + h]; }
    double& b1(int h) { return flat[kB1Offset + h]; }
    double w2(int a, int h) const { return flat[kW2Offset + kHidden * a + h]; }
    double& w2(int a, int h) { return flat[kW2Offset + kHidden * a + h]; }
    double b2(int a) const { return flat[kB2Offset + a]; }
    double& b2(int a) { return flat[kB2Offset + a]; }

    static MlpParams from_flat(Vec v) {
        if (v.size() != kMlpParamCount)
            throw DimensionMismatch("MlpParams: expected 178 parameters");
        MlpParams p;
        p.flat = std::move(v);
        return p;
    }
};

/// Parameters of the derivative-architecture adjoint network
/// u -> W2 diag(sech^2(W1 u + b1)) W1, output read as a 3x3 matrix whose
/// transpose is the adjoint estimate.
struct AdjNetParams {
    Vec flat = Vec(kAdjNetParamCount, 0.0);

    double w1(int h, int j) const { return flat[kW1Offset + 3 * h + j]; }
    double& w1(int h, int j) { return flat[kW1Offset + 3 * h + j]; }
    double b1(int h) const { return flat[kB1Offset + h]; }
    double& b1(int h) { return flat[kB1Offset + h]; }
    double w2(int a, int h) const { return flat[kW2Offset + kHidden * a + h]; }
    double& w2(int a, int h) { return flat[kW2Offset + kHidden * a + h]; }

    static AdjNetParams from_flat(Vec v) {
        if (v.size() != kAdjNetParamCount)
            throw DimensionMismatch("AdjNetParams: expected 175 parameters");
        AdjNetParams p;
        p.flat = std::move(v);
        return p;
    }
};

enum class LossKind { Standard, Adj, AdjVec, IndepFwd, IndepAdj, IndepAdjVec };

/// Derivative-term weights of the composite losses.
inline constexpr double kAlphaAdj = 100.0 / 3.0;
inline constexpr double kAlphaRandomVec = 1e-3;
inline constexpr double kAlphaLagrangeVec = 1e-5;
inline constexpr double kAlphaRandColVec = 5e-2;

struct LossSpec {
    LossKind kind = LossKind::Standard;
    double alpha = 0.0;
};

namespace detail {

struct HiddenActs {
    std::array<double, kHidden> t;  // tanh(z)
    std::array<double, kHidden> s;  // sech^2(z) = 1 - tanh^2(z)
};

template <class P>
inline HiddenActs hidden_acts(const P& p, const State& u) {
    HiddenActs a;
    for (int h = 0; h < kHidden; ++h) {
        const double z = p.w1(h, 0) * u[0] + p.w1(h, 1) * u[1] + p.w1(h, 2) * u[2] + p.b1(h);
        const double t = std::tanh(z);
        a.t[h] = t;
        a.s[h] = 1.0 - t * t;
    }
    return a;
}

} // namespace detail

inline State forward(const MlpParams& p, const State& u) {
    const auto acts = detail::hidden_acts(p, u);
    State out{};
    for (int a = 0; a < 3; ++a) {
        double s = p.b2(a);
        for (int h = 0; h < kHidden; ++h) s += p.w2(a, h) * acts.t[h];
        out[a] = s;
    }
    return out;
}

/// Exact input-Jacobian of forward: W2 diag(sech^2(W1 u + b1)) W1.
inline Mat jacobian(const MlpParams& p, const State& u) {
    const auto acts = detail::hidden_acts(p, u);
    Mat j(3, 3);
    for (int a = 0; a < 3; ++a)
        for (int h = 0; h < kHidden; ++h) {
            const double w = p.w2(a, h) * acts.s[h];
            for (int c = 0; c < 3; ++c) j(a, c) += w * p.w1(h, c);
        }
    return j;
}

/// jacobian(p, u)^T v without materializing the 3x3 matrix:
/// W1^T (sech^2(W1 u + b1) ⊙ (W2^T v)).
inline State jacobian_t_vec(const MlpParams& p, const State& u, const State& v) {
    const auto acts = detail::hidden_acts(p, u);
    State out{};
    for (int h = 0; h < kHidden; ++h) {
        const double c = p.w2(0, h) * v[0] + p.w2(1, h) * v[1] + p.w2(2, h) * v[2];
        const double sc = acts.s[h] * c;
        out[0] += p.w1(h, 0) * sc;
        out[1] += p.w1(h, 1) * sc;
        out[2] += p.w1(h, 2) * sc;
    }
    return out;
}

/// The adjoint network evaluated at u, as a 3x3 matrix (row-major reading of
/// the 9 induced entries of W2 diag(sech^2(W1 u + b1)) W1). This derivative
/// form natively expresses a tangent-linear-oriented matrix, so consumers that
/// need the adjoint estimate apply its transpose; the losses and the model
/// adjoint below follow that convention.
inline Mat adjnet_forward(const AdjNetParams& p, const State& u) {
    const auto acts = detail::hidden_acts(p, u);
    Mat j(3, 3);
    for (int a = 0; a < 3; ++a)
        for (int h = 0; h < kHidden; ++h) {
            const double w = p.w2(a, h) * acts.s[h];
            for (int c = 0; c < 3; ++c) j(a, c) += w * p.w1(h, c);
        }
    return j;
}

/// adjnet_forward(p, u)^T v without forming the matrix; the hot path of the
/// two-network model pair inside the window optimization.
inline State adjnet_t_vec(const AdjNetParams& p, const State& u, const State& v) {
    const auto acts = detail::hidden_acts(p, u);
    State out{};
    for (int h = 0; h < kHidden; ++h) {
        const double c = p.w2(0, h) * v[0] + p.w2(1, h) * v[1] + p.w2(2, h) * v[2];
        const double sc = acts.s[h] * c;
        out[0] += p.w1(h, 0) * sc;
        out[1] += p.w1(h, 1) * sc;
        out[2] += p.w1(h, 2) * sc;
    }
    return out;
}

namespace detail {

template <class P>
inline void require_adjoint(const TrainingRecord& r) {
    if (!r.adjoint)
        throw MissingAdjointData("loss requires adjoint matrices the batch lacks");
}

inline void require_vec_product(const TrainingRecord& r) {
    if (!r.v || !r.mtv)
        throw MissingAdjointData("loss requires adjoint-vector products the batch lacks");
}

/// Forward-mismatch term ||f(u) - target||^2 and its parameter gradient,
/// accumulated with weight `scale`.
inline double accum_forward_term(const MlpParams& p, const TrainingRecord& rec,
                                 double scale, Vec& grad) {
    const auto acts = hidden_acts(p, rec.input);
    State out{};
    for (int a = 0; a < 3; ++a) {
        double s = p.b2(a);
        for (int h = 0; h < kHidden; ++h) s += p.w2(a, h) * acts.t[h];
        out[a] = s;
    }
    State r{};
    double loss = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double d = out[a] - rec.target[a];
        loss += d * d;
        r[a] = 2.0 * d;
    }
    for (int a = 0; a < 3; ++a) {
        grad[kB2Offset + a] += scale * r[a];
        for (int h = 0; h < kHidden; ++h)
            grad[kW2Offset + kHidden * a + h] += scale * r[a] * acts.t[h];
    }
    for (int h = 0; h < kHidden; ++h) {
        const double back = p.w2(0, h) * r[0] + p.w2(1, h) * r[1] + p.w2(2, h) * r[2];
        const double delta = back * acts.s[h];
        grad[kB1Offset + h] += scale * delta;
        for (int j = 0; j < 3; ++j)
            grad[kW1Offset + 3 * h + j] += scale * delta * rec.input[j];
    }
    return loss;
}

/// Frobenius mismatch ||W2 diag(s) W1 - target||_F^2 for either architecture
/// (P is MlpParams or AdjNetParams; the b2 block, when present, is untouched).
template <class P>
inline double accum_jacobian_term(const P& p, const TrainingRecord& rec,
                                  const Mat& target, double scale, Vec& grad) {
    const auto acts = hidden_acts(p, rec.input);
    // D = net jacobian - target
    double D[3][3];
    double loss = 0.0;
    for (int a = 0; a < 3; ++a)
        for (int c = 0; c < 3; ++c) {
            double n = 0.0;
            for (int h = 0; h < kHidden; ++h) n += p.w2(a, h) * acts.s[h] * p.w1(h, c);
            const double d = n - target(a, c);
            D[a][c] = d;
            loss += d * d;
        }
    for (int h = 0; h < kHidden; ++h) {
        // P_ah = (D W1^T)_ah for this h; g_h = sum_a W2_ah P_ah
        double g = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double dw1 = D[a][0] * p.w1(h, 0) + D[a][1] * p.w1(h, 1) + D[a][2] * p.w1(h, 2);
            grad[kW2Offset + kHidden * a + h] += scale * 2.0 * acts.s[h] * dw1;
            g += p.w2(a, h) * dw1;
        }
        const double zpath = -4.0 * acts.t[h] * acts.s[h] * g;
        grad[kB1Offset + h] += scale * zpath;
        for (int j = 0; j < 3; ++j) {
            const double w2td = p.w2(0, h) * D[0][j] + p.w2(1, h) * D[1][j] + p.w2(2, h) * D[2][j];
            grad[kW1Offset + 3 * h + j] += scale * (2.0 * acts.s[h] * w2td + zpath * rec.input[j]);
        }
    }
    return loss;
}

/// Adjoint-vector mismatch ||W1^T diag(s) W2^T v - mtv||^2 for either
/// architecture: the transposed derivative form applied to v, compared against
/// the stored high-fidelity adjoint product.
template <class P>
inline double accum_adjvec_term(const P& p, const TrainingRecord& rec,
                                double scale, Vec& grad) {
    const auto acts = hidden_acts(p, rec.input);
    const State& v = *rec.v;
    std::array<double, kHidden> c;
    for (int h = 0; h < kHidden; ++h)
        c[h] = p.w2(0, h) * v[0] + p.w2(1, h) * v[1] + p.w2(2, h) * v[2];
    State q{};
    for (int h = 0; h < kHidden; ++h) {
        const double sc = acts.s[h] * c[h];
        for (int j = 0; j < 3; ++j) q[j] += p.w1(h, j) * sc;
    }
    double loss = 0.0;
    for (int j = 0; j < 3; ++j) {
        q[j] -= (*rec.mtv)[j];
        loss += q[j] * q[j];
    }
    for (int h = 0; h < kHidden; ++h) {
        const double w1q = p.w1(h, 0) * q[0] + p.w1(h, 1) * q[1] + p.w1(h, 2) * q[2];
        for (int a = 0; a < 3; ++a)
            grad[kW2Offset + kHidden * a + h] += scale * 2.0 * v[a] * acts.s[h] * w1q;
        const double zpath = -4.0 * acts.t[h] * acts.s[h] * c[h] * w1q;
        grad[kB1Offset + h] += scale * zpath;
        for (int j = 0; j < 3; ++j)
            grad[kW1Offset + 3 * h + j] +=
                scale * (2.0 * acts.s[h] * c[h] * q[j] + zpath * rec.input[j]);
    }
    return loss;
}

} // namespace detail

inline int param_count_for(LossKind kind) {
    return (kind == LossKind::IndepAdj || kind == LossKind::IndepAdjVec)
               ? kAdjNetParamCount
               : kMlpParamCount;
}

/// Batch-mean loss for `spec` and its exact gradient with respect to the flat
/// parameter vector. The derivative terms carry weight alpha; alpha = 0 skips
/// them entirely, which keeps Adj-with-alpha-0 bit-identical to Standard.
inline std::pair<double, Vec> loss_value_and_param_grad(
    const LossSpec& spec, const Vec& params, const std::vector<TrainingRecord>& batch) {
    if (batch.empty()) throw DimensionMismatch("loss: empty batch");
    if (static_cast<int>(params.size()) != param_count_for(spec.kind))
        throw DimensionMismatch("loss: parameter vector length does not match the architecture");

    const double inv_n = 1.0 / static_cast<double>(batch.size());
    Vec grad(params.size(), 0.0);
    double loss = 0.0;

    switch (spec.kind) {
        case LossKind::Standard:
        case LossKind::IndepFwd: {
            const MlpParams p = MlpParams::from_flat(params);
            for (const TrainingRecord& rec : batch)
                loss += inv_n * detail::accum_forward_term(p, rec, inv_n, grad);
            break;
        }
        case LossKind::Adj: {
            const MlpParams p = MlpParams::from_flat(params);
            for (const TrainingRecord& rec : batch) {
                loss += inv_n * detail::accum_forward_term(p, rec, inv_n, grad);
                if (spec.alpha != 0.0) {
                    detail::require_adjoint<MlpParams>(rec);
                    const Mat m = rec.adjoint->transpose();
                    loss += spec.alpha * inv_n *
                            detail::accum_jacobian_term(p, rec, m, spec.alpha * inv_n, grad);
                }
            }
            break;
        }
        case LossKind::AdjVec: {
            const MlpParams p = MlpParams::from_flat(params);
            for (const TrainingRecord& rec : batch) {
                loss += inv_n * detail::accum_forward_term(p, rec, inv_n, grad);
                if (spec.alpha != 0.0) {
                    detail::require_vec_product(rec);
                    loss += spec.alpha * inv_n *
                            detail::accum_adjvec_term(p, rec, spec.alpha * inv_n, grad);
                }
            }
            break;
        }
        case LossKind::IndepAdj: {
            const AdjNetParams p = AdjNetParams::from_flat(params);
            for (const TrainingRecord& rec : batch) {
                detail::require_adjoint<AdjNetParams>(rec);
                const Mat m = rec.adjoint->transpose();
                loss += inv_n * detail::accum_jacobian_term(p, rec, m, inv_n, grad);
            }
            break;
        }
        case LossKind::IndepAdjVec: {
            const AdjNetParams p = AdjNetParams::from_flat(params);
            for (const TrainingRecord& rec : batch) {
                detail::require_vec_product(rec);
                loss += inv_n * detail::accum_adjvec_term(p, rec, inv_n, grad);
            }
            break;
        }
    }
    return {loss, std::move(grad)};
}

// --- parameter serialization -------------------------------------------------

inline constexpr const char* kForwardArchTag = "mlp_3_25_3";
inline constexpr const char* kAdjointArchTag = "adjnet_3_25_9";

struct ParamEnvelope {
    std::string architecture;
    int input_dim = 3;
    int hidden_dim = kHidden;
    int output_dim = 3;
    std::uint64_t seed = 0;
    Vec params;
};

inline nlohmann::json to_json(const ParamEnvelope& env) {
    return nlohmann::json{
        {"architecture", env.architecture},
        {"dims", {{"input", env.input_dim}, {"hidden", env.hidden_dim}, {"output", env.output_dim}}},
        {"seed", env.seed},
        {"params", env.params},
    };
}

inline ParamEnvelope envelope_from_json(const nlohmann::json& j) {
    ParamEnvelope env;
    env.architecture = j.at("architecture").get<std::string>();
    env.input_dim = j.at("dims").at("input").get<int>();
    env.hidden_dim = j.at("dims").at("hidden").get<int>();
    env.output_dim = j.at("dims").at("output").get<int>();
    env.seed = j.at("seed").get<std::uint64_t>();
    env.params = j.at("params").get<Vec>();
    const std::size_t expect = env.architecture == kForwardArchTag
                                   ? kMlpParamCount
                                   : env.architecture == kAdjointArchTag
                                         ? kAdjNetParamCount
                                         : 0;
    if (expect == 0)
        throw DimensionMismatch("unknown architecture tag: " + env.architecture);
    if (env.params.size() != expect)
        throw DimensionMismatch("parameter array length does not match architecture tag");
    return env;
}

inline ParamEnvelope make_forward_envelope(const MlpParams& p, std::uint64_t seed) {
    ParamEnvelope env;
    env.architecture = kForwardArchTag;
    env.output_dim = 3;
    env.seed = seed;
    env.params = p.flat;
    return env;
}

inline ParamEnvelope make_adjoint_envelope(const AdjNetParams& p, std::uint64_t seed) {
    ParamEnvelope env;
    env.architecture = kAdjointArchTag;
    env.output_dim = 9;
    env.seed = seed;
    env.params = p.flat;
    return env;
}

inline void save_params(const std::string& path, const ParamEnvelope& env) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << to_json(env).dump(2) << "\n";
}

inline ParamEnvelope load_params(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    is >> j;
    return envelope_from_json(j);
}

} // namespace adjvar
