#include "r2t/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "r2t/errors.hpp"

namespace r2t {

namespace {

double eval_plain(const ScalarFn& f) {
  NoGradScope no_grad;
  Tensor y = f();
  if (y.numel() != 1) throw ContractViolation("grad_check: function must return a scalar");
  const double v = y.item();
  if (!std::isfinite(v)) throw NumericDomainError("grad_check: non-finite function value at probe point");
  return v;
}

}  // namespace

double grad_check_params(const ScalarFn& f, std::vector<Tensor> params, double h,
                         std::size_t max_coords_per_tensor, std::uint64_t seed) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f();
    if (!std::isfinite(y.item())) throw NumericDomainError("grad_check: non-finite function value");
    tape.backward(y);
  }
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                : std::vector<double>(p.numel(), 0.0);
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords_per_tensor > 0 && coords.size() > max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_tensor);
    }
    auto data = p.mutable_data();
    for (auto i : coords) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = eval_plain(f);
      data[i] = saved - h;
      const double down = eval_plain(f);
      data[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  return grad_check_params([&] { return f(x); }, {x}, h);
}

}  // namespace r2t
