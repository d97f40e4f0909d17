#pragma once

#include <functional>
#include <vector>

#include "clamp/autograd.hpp"
#include "clamp/rng.hpp"

namespace clamp {

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0);

using ScalarFn = std::function<ag::Var(const std::vector<ag::Var>&)>;

/// Central-difference gradient of a scalar function with respect to one
/// input, evaluated without recording a graph.
Tensor numeric_gradient(const ScalarFn& fn, const std::vector<Tensor>& inputs, std::size_t which, double h);

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over
/// every element of every input.
double gradcheck(const ScalarFn& fn, const std::vector<Tensor>& inputs, double h = 1e-6, double floor = 1.0);

}  // namespace clamp
