#pragma once

#include <functional>

#include "mtn/tensor.hpp"

namespace mtn {

// A scalar-valued function of one tensor, built through the given tape so
// it can be differentiated. Must be deterministic across calls.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

// Compare the taped gradient of f at x against central finite differences,
// coordinate by coordinate. Returns the worst relative error
//   |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
// Raises EvalError if f(x) is not a finite 1x1 value.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h);

}  // namespace mtn
