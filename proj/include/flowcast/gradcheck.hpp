#pragma once

#include "flowcast/tensor.hpp"

#include <cstdint>
#include <functional>

namespace flowcast {

/// Central-difference verification of reverse-mode gradients. `f` must
/// rebuild its graph from the current parameter values on every call and
/// return a scalar. Compares (f(θ+eps)−f(θ−eps))/(2·eps) against the
/// autodiff gradient for every coordinate of every parameter and returns the
/// maximum relative error, with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double eps = 1e-5);

/// Same, but probes only `coords` randomly chosen parameter coordinates
/// (without replacement across the concatenated parameter vector).
double grad_check_sampled(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                          double eps, std::size_t coords, std::uint64_t seed);

} // namespace flowcast
