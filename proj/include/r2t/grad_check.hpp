#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "r2t/tensor.hpp"

namespace r2t {

// Scalar-valued function of tensors whose ops are recorded on the active tape.
using ScalarFn = std::function<Tensor()>;

// max_i |grad_i - fd_i| / max(1, |grad_i|) with central differences of step h.
// `x` is perturbed in place and restored. Throws NumericDomainError if f is
// non-finite at a probe point.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5);

// Same check over several parameter tensors. When max_coords_per_tensor > 0
// only that many coordinates per tensor are probed, chosen from `seed`.
double grad_check_params(const ScalarFn& f, std::vector<Tensor> params, double h = 1e-5,
                         std::size_t max_coords_per_tensor = 0, std::uint64_t seed = 0);

}  // namespace r2t
