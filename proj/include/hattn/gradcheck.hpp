#pragma once

#include <functional>

#include "hattn/tensor.hpp"

namespace hattn {

// Scalar-valued function of one tensor, built on the supplied tape.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

// Compares the analytic gradient of f at x against central finite
// differences. Returns max over coordinates of
//   |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
// Caller is responsible for x being away from kinks and saturation.
double grad_check(const ScalarFn& f, const Tensor& x, double epsilon);

}  // namespace hattn
