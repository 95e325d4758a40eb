#pragma once

#include <optional>
#include <vector>

#include "adjvar/lorenz.hpp"
#include "adjvar/smallmat.hpp"

namespace adjvar {

/// One training sample: input state, forward target, and the derivative
/// information the derivative-informed losses consume. `adjoint` stores the
/// transposed tangent-linear matrix M^T; `v`/`mtv` store one adjoint-vector
/// product M^T v per record when a vector scheme is active.
struct TrainingRecord {
    State input{};
    State target{};
    std::optional<Mat> adjoint;
    std::optional<State> v;
    std::optional<State> mtv;
};

enum class VectorScheme { Lagrange, Random, RandCol };

} // namespace adjvar
