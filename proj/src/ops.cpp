#include "r2t/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "r2t/errors.hpp"

namespace r2t::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
using ImplPtr = std::shared_ptr<detail::TensorImpl>;

[[noreturn]] void shape_error(const char* kind, const std::string& detail) {
  throw ContractViolation(std::string(kind) + ": " + detail);
}

std::string shapes2(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " vs " + shape_str(b.shape());
}

bool wants_grad(const ImplPtr& p) { return p->requires_grad; }

// Output gradient, or nullptr when nothing flowed into this node.
const double* out_grad(const ImplPtr& out) {
  return out->grad.empty() ? nullptr : out->grad.data();
}

double* in_grad(const ImplPtr& in) {
  in->ensure_grad();
  return in->grad.data();
}

Tensor make(Shape shape, std::vector<double> values, const char* kind) {
  Tensor out(std::move(shape), std::move(values));
  require_finite(out, kind);
  return out;
}

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Index map for an axis permutation: out[i] = in[map[i]].
std::shared_ptr<std::vector<std::size_t>> permute_map(const Shape& in_shape,
                                                      const std::vector<std::size_t>& perm,
                                                      Shape& out_shape) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  out_shape.resize(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  const std::size_t n = shape_numel(in_shape);
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
    (*map)[flat] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

// Bilinear tap: value = sum_k w[k] * in[idx[k]].
struct Tap4 {
  std::array<std::size_t, 4> idx;
  std::array<double, 4> w;
};

Tap4 bilinear_tap(double u, double v, std::size_t h, std::size_t w) {
  u = std::clamp(u, 0.0, static_cast<double>(w - 1));
  v = std::clamp(v, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(u));
  const auto y0 = static_cast<std::size_t>(std::floor(v));
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const double fx = u - static_cast<double>(x0);
  const double fy = v - static_cast<double>(y0);
  return Tap4{{y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1},
              {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy}};
}

// Shared forward/backward for ops expressed as per-output-pixel bilinear
// taps over a [H, W, C] input.
Tensor apply_taps(const Tensor& x, Shape out_shape, std::shared_ptr<std::vector<Tap4>> taps,
                  const char* kind) {
  const std::size_t c = x.dim(2);
  const auto& in = x.values();
  std::vector<double> out(taps->size() * c, 0.0);
  for (std::size_t p = 0; p < taps->size(); ++p) {
    const Tap4& t = (*taps)[p];
    double* o = out.data() + p * c;
    for (int k = 0; k < 4; ++k) {
      if (t.w[k] == 0.0) continue;
      const double* src = in.data() + t.idx[k] * c;
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] += t.w[k] * src[ch];
    }
  }
  Tensor result = make(std::move(out_shape), std::move(out), kind);
  ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&x}, [xi, oi, taps, c] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* gx = in_grad(xi);
    for (std::size_t p = 0; p < taps->size(); ++p) {
      const Tap4& t = (*taps)[p];
      const double* g = go + p * c;
      for (int k = 0; k < 4; ++k) {
        if (t.w[k] == 0.0) continue;
        double* dst = gx + t.idx[k] * c;
        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += t.w[k] * g[ch];
      }
    }
  });
  return result;
}

void require_map(const Tensor& x, const char* kind) {
  if (x.rank() != 3) shape_error(kind, "expected [H, W, C], got " + shape_str(x.shape()));
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* kind, Fwd fwd, Deriv deriv) {
  require_finite(x, kind);
  const auto& in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  Tensor result = make(x.shape(), std::move(out), kind);
  ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&x}, [xi, oi, deriv] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* gx = in_grad(xi);
    const auto& xv = *xi->data;
    const auto& yv = *oi->data;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += go[i] * deriv(xv[i], yv[i]);
  });
  return result;
}

}  // namespace

void require_finite(const Tensor& t, const char* kind) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericDomainError(std::string(kind) + ": non-finite value in tensor of shape " +
                               shape_str(t.shape()));
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    shape_error("matmul", "incompatible shapes " + shapes2(a, b));
  }
  require_finite(a, "matmul");
  require_finite(b, "matmul");
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  Shape shape = a.shape();
  shape.back() = n;
  Tensor result = make(std::move(shape), std::move(out), "matmul");
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&a, &b}, [ai, bi, oi, m, k, n] {
    const double* go = out_grad(oi);
    if (!go) return;
    MapC g(go, m, n);
    if (wants_grad(ai)) Map(in_grad(ai), m, k).noalias() += g * MapC(bi->data->data(), k, n).transpose();
    if (wants_grad(bi)) Map(in_grad(bi), k, n).noalias() += MapC(ai->data->data(), m, k).transpose() * g;
  });
  return result;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    shape_error("bmm", "incompatible shapes " + shapes2(a, b));
  }
  require_finite(a, "bmm");
  require_finite(b, "bmm");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    Map(out.data() + i * m * n, m, n).noalias() =
        MapC(a.data().data() + i * m * k, m, k) * MapC(b.data().data() + i * k * n, k, n);
  }
  Tensor result = make({batch, m, n}, std::move(out), "bmm");
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&a, &b}, [ai, bi, oi, batch, m, k, n] {
    const double* go = out_grad(oi);
    if (!go) return;
    const bool ga = wants_grad(ai), gb = wants_grad(bi);
    double* da = ga ? in_grad(ai) : nullptr;
    double* db = gb ? in_grad(bi) : nullptr;
    for (std::size_t i = 0; i < batch; ++i) {
      MapC g(go + i * m * n, m, n);
      if (ga) Map(da + i * m * k, m, k).noalias() += g * MapC(bi->data->data() + i * k * n, k, n).transpose();
      if (gb) Map(db + i * k * n, k, n).noalias() += MapC(ai->data->data() + i * m * k, m, k).transpose() * g;
    }
  });
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_error("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor result = make(std::move(shape), x.values(), "reshape");
  ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&x}, [xi, oi] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* gx = in_grad(xi);
    for (std::size_t i = 0; i < xi->grad.size(); ++i) gx[i] += go[i];
  });
  return result;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  if (perm.size() != x.rank()) shape_error("permute", "permutation rank mismatch for " + shape_str(x.shape()));
  std::vector<std::size_t> seen(perm.size(), 0);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]++) shape_error("permute", "invalid axis permutation");
  }
  Shape out_shape;
  auto map = permute_map(x.shape(), perm, out_shape);
  const auto& in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*map)[i]];
  Tensor result = make(std::move(out_shape), std::move(out), "permute");
  ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&x}, [xi, oi, map] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* gx = in_grad(xi);
    for (std::size_t i = 0; i < map->size(); ++i) gx[(*map)[i]] += go[i];
  });
  return result;
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  if (axis0 >= x.rank() || axis1 >= x.rank()) {
    shape_error("transpose", "axis out of range for " + shape_str(x.shape()));
  }
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[axis0], perm[axis1]);
  return permute(x, perm);
}

namespace {

Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* kind, bool multiply) {
  if (!is_suffix(a.shape(), b.shape())) shape_error(kind, "shapes do not broadcast " + shapes2(a, b));
  require_finite(a, kind);
  require_finite(b, kind);
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = multiply ? av[i] * bv[i % nb] : av[i] + bv[i % nb];
  }
  Tensor result = make(a.shape(), std::move(out), kind);
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&a, &b}, [ai, bi, oi, nb, multiply] {
    const double* go = out_grad(oi);
    if (!go) return;
    const std::size_t n = ai->data->size();
    if (wants_grad(ai)) {
      double* ga = in_grad(ai);
      for (std::size_t i = 0; i < n; ++i) ga[i] += multiply ? go[i] * (*bi->data)[i % nb] : go[i];
    }
    if (wants_grad(bi)) {
      double* gb = in_grad(bi);
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += multiply ? go[i] * (*ai->data)[i] : go[i];
    }
  });
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return broadcast_binary(a, b, "add", false); }
Tensor mul(const Tensor& a, const Tensor& b) { return broadcast_binary(a, b, "mul", true); }

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", "shape mismatch " + shapes2(a, b));
  return add(a, scale(b, -1.0));
}

Tensor scale(const Tensor& x, double factor) {
  return unary(x, "scale", [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor softmax(const Tensor& x) {
  const std::size_t n = x.shape().back();
  return masked_softmax(x, std::vector<std::uint8_t>(n, 1));
}

Tensor masked_softmax(const Tensor& x, const std::vector<std::uint8_t>& mask) {
  const std::size_t cols = x.shape().back();
  if (mask.empty() || mask.size() % cols != 0) {
    shape_error("softmax", "mask of " + std::to_string(mask.size()) + " entries does not fit " + shape_str(x.shape()));
  }
  const std::size_t mask_rows = mask.size() / cols;
  if (mask_rows > 1 && (x.rank() < 2 || x.dim(x.rank() - 2) != mask_rows)) {
    shape_error("softmax", "mask rows " + std::to_string(mask_rows) + " do not match " + shape_str(x.shape()));
  }
  require_finite(x, "softmax");
  const auto& in = x.values();
  const std::size_t rows = in.size() / cols;
  std::vector<double> out(in.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* m = mask.data() + (r % mask_rows) * cols;
    const double* src = in.data() + r * cols;
    double* dst = out.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      if (m[j]) mx = std::max(mx, src[j]);
    }
    if (!std::isfinite(mx)) shape_error("softmax", "mask row " + std::to_string(r % mask_rows) + " allows no column");
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (m[j]) {
        dst[j] = std::exp(src[j] - mx);
        z += dst[j];
      }
    }
    for (std::size_t j = 0; j < cols; ++j) dst[j] /= z;
  }
  Tensor result = make(x.shape(), std::move(out), "softmax");
  ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&x}, [xi, oi, rows, cols] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* gx = in_grad(xi);
    const auto& y = *oi->data;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * cols;
      const double* gr = go + r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += yr[j] * (gr[j] - dot);
    }
  });
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    shape_error("layer_norm", "gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                                  " do not match last axis of " + shape_str(x.shape()));
  }
  require_finite(x, "layer_norm");
  const auto& in = x.values();
  const std::size_t rows = in.size() / d;
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(in.size());
  const auto& g = gamma.values();
  const auto& b = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += src[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (src[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = g[j] * h + b[j];
    }
  }
  Tensor result = make(x.shape(), std::move(out), "layer_norm");
  ImplPtr xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&x, &gamma, &beta}, [xi, gi, bi, oi, xhat, inv_std, rows, d] {
    const double* go = out_grad(oi);
    if (!go) return;
    const auto& gv = *gi->data;
    if (wants_grad(gi) || wants_grad(bi)) {
      double* dg = wants_grad(gi) ? in_grad(gi) : nullptr;
      double* db = wants_grad(bi) ? in_grad(bi) : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          if (dg) dg[j] += go[r * d + j] * (*xhat)[r * d + j];
          if (db) db[j] += go[r * d + j];
        }
      }
    }
    if (!wants_grad(xi)) return;
    double* dx = in_grad(xi);
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dh = go[r * d + j] * gv[j];
        mean_dh += dh;
        mean_dh_h += dh * (*xhat)[r * d + j];
      }
      mean_dh *= inv_d;
      mean_dh_h *= inv_d;
      for (std::size_t j = 0; j < d; ++j) {
        const double dh = go[r * d + j] * gv[j];
        dx[r * d + j] += (*inv_std)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
      }
    }
  });
  return result;
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& x) {
  return unary(x, "abs", [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor smooth_l1(const Tensor& x, double beta) {
  if (!(beta > 0)) throw ConfigError("smooth_l1: beta must be positive");
  return unary(
      x, "smooth_l1",
      [beta](double v) {
        const double a = std::abs(v);
        return a < beta ? 0.5 * v * v / beta : a - 0.5 * beta;
      },
      [beta](double v, double) {
        if (std::abs(v) < beta) return v / beta;
        return v > 0 ? 1.0 : -1.0;
      });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  return gather_rows(table, ids);
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() < 1 || rows.empty()) shape_error("gather_rows", "need rows from " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t width = x.numel() / n;
  for (auto r : rows) {
    if (r >= n) throw IndexError("gather_rows: row " + std::to_string(r) + " out of range " + std::to_string(n));
  }
  require_finite(x, "gather_rows");
  std::vector<double> out(rows.size() * width);
  const auto& in = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(in.data() + rows[i] * width, width, out.data() + i * width);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  Tensor result = make(std::move(shape), std::move(out), "gather_rows");
  ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  record_op(result, {&x}, [xi, oi, idx, width] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* gx = in_grad(xi);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      double* dst = gx + (*idx)[i] * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += go[i * width + j];
    }
  });
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) shape_error("concat", "axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = ref;
    if (a.size() != b.size()) shape_error("concat", "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) shape_error("concat", "shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    total += p.dim(axis);
    require_finite(p, "concat");
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  Shape shape = ref;
  shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t block = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * block, block, out.data() + o * total * inner + offset);
    }
    offset += block;
  }
  Tensor result = make(std::move(shape), std::move(out), "concat");
  std::vector<ImplPtr> ins;
  for (const auto& p : parts) ins.push_back(p.impl_ptr());
  ImplPtr oi = result.impl_ptr();
  record_op(result, parts, [ins, oi, outer, total, inner] {
    const double* go = out_grad(oi);
    if (!go) return;
    std::size_t off = 0;
    for (const auto& in : ins) {
      const std::size_t block = in->shape[0] == 0 ? 0 : in->data->size() / outer;
      if (wants_grad(in)) {
        double* g = in_grad(in);
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = go + o * total * inner + off;
          for (std::size_t j = 0; j < block; ++j) g[o * block + j] += src[j];
        }
      }
      off += block;
    }
  });
  return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                             std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t full = x.dim(axis) * inner;
  const std::size_t block = (end - begin) * inner;
  std::vector<double> out(outer * block);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * full + begin * inner, block, out.data() + o * block);
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  Tensor result = make(std::move(shape), std::move(out), "slice");
  ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&x}, [xi, oi, outer, full, block, begin, inner] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* gx = in_grad(xi);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < block; ++j) gx[o * full + begin * inner + j] += go[o * block + j];
    }
  });
  return result;
}

Tensor sum(const Tensor& x) {
  require_finite(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor result = make({1}, {s}, "sum");
  ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
  record_op(result, {&x}, [xi, oi] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* gx = in_grad(xi);
    for (std::size_t i = 0; i < xi->grad.size(); ++i) gx[i] += go[0];
  });
  return result;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_map(x, "resize_bilinear");
  if (out_h == 0 || out_w == 0) shape_error("resize_bilinear", "output size must be positive");
  require_finite(x, "resize_bilinear");
  const std::size_t h = x.dim(0), w = x.dim(1);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  auto taps = std::make_shared<std::vector<Tap4>>();
  taps->reserve(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      taps->push_back(bilinear_tap((j + 0.5) * sx - 0.5, (i + 0.5) * sy - 0.5, h, w));
    }
  }
  return apply_taps(x, {out_h, out_w, x.dim(2)}, taps, "resize_bilinear");
}

Tensor avg_pool2(const Tensor& x) {
  require_map(x, "avg_pool2");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h % 2 || w % 2) shape_error("avg_pool2", "spatial sides must be even, got " + shape_str(x.shape()));
  // Average of a 2x2 block is the bilinear sample at the block center.
  auto taps = std::make_shared<std::vector<Tap4>>();
  for (std::size_t i = 0; i < h / 2; ++i) {
    for (std::size_t j = 0; j < w / 2; ++j) {
      const std::size_t y0 = 2 * i, x0 = 2 * j;
      taps->push_back(Tap4{{y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1},
                           {0.25, 0.25, 0.25, 0.25}});
    }
  }
  require_finite(x, "avg_pool2");
  return apply_taps(x, {h / 2, w / 2, c}, taps, "avg_pool2");
}

Tensor upsample2_nearest(const Tensor& x) {
  require_map(x, "upsample2_nearest");
  require_finite(x, "upsample2_nearest");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto taps = std::make_shared<std::vector<Tap4>>();
  for (std::size_t i = 0; i < 2 * h; ++i) {
    for (std::size_t j = 0; j < 2 * w; ++j) {
      const std::size_t src = (i / 2) * w + j / 2;
      taps->push_back(Tap4{{src, src, src, src}, {1.0, 0.0, 0.0, 0.0}});
    }
  }
  return apply_taps(x, {2 * h, 2 * w, c}, taps, "upsample2_nearest");
}

Tensor roi_align(const Tensor& feat, const std::vector<FeatBox>& boxes, std::size_t out) {
  require_map(feat, "roi_align");
  if (boxes.empty() || out == 0) shape_error("roi_align", "need at least one box and out >= 1");
  require_finite(feat, "roi_align");
  const std::size_t h = feat.dim(0), w = feat.dim(1);
  auto taps = std::make_shared<std::vector<Tap4>>();
  taps->reserve(boxes.size() * out * out);
  for (const auto& b : boxes) {
    for (double v : b) {
      if (!std::isfinite(v)) throw NumericDomainError("roi_align: non-finite box coordinate");
    }
    const double bw = (b[2] - b[0]) / static_cast<double>(out);
    const double bh = (b[3] - b[1]) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      for (std::size_t j = 0; j < out; ++j) {
        taps->push_back(bilinear_tap(b[0] + (j + 0.5) * bw - 0.5, b[1] + (i + 0.5) * bh - 0.5, h, w));
      }
    }
  }
  return apply_taps(feat, {boxes.size(), out, out, feat.dim(2)}, taps, "roi_align");
}

Tensor cross_entropy_label_smoothed(const Tensor& logits, std::span<const std::size_t> targets,
                                    double epsilon) {
  const std::size_t v = logits.shape().back();
  const std::size_t rows = logits.numel() / v;
  if (logits.rank() > 2 || v < 2) {
    shape_error("cross_entropy", "expected [V] or [n, V] with V >= 2, got " + shape_str(logits.shape()));
  }
  if (targets.size() != rows) {
    shape_error("cross_entropy", std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  }
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("cross_entropy: epsilon must be in [0, 1)");
  for (auto t : targets) {
    if (t >= v) throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range [0, " + std::to_string(v) + ")");
  }
  require_finite(logits, "cross_entropy");
  const double off = epsilon / static_cast<double>(v);
  const double on = 1.0 - epsilon + off;
  const auto& in = logits.values();
  auto probs = std::make_shared<std::vector<double>>(in.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * v;
    const double mx = *std::max_element(x, x + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    double qx = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      (*probs)[r * v + j] = std::exp(x[j] - lse);
      qx += (j == targets[r] ? on : off) * x[j];
    }
    total += lse - qx;
  }
  Tensor result = make({1}, {total / static_cast<double>(rows)}, "cross_entropy");
  ImplPtr li = logits.impl_ptr(), oi = result.impl_ptr();
  auto tg = std::make_shared<std::vector<std::size_t>>(targets.begin(), targets.end());
  record_op(result, {&logits}, [li, oi, probs, tg, rows, v, on, off] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* g = in_grad(li);
    const double s = go[0] / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < v; ++j) {
        g[r * v + j] += s * ((*probs)[r * v + j] - (j == (*tg)[r] ? on : off));
      }
    }
  });
  return result;
}

Tensor bce_with_logits(const Tensor& x, std::span<const double> targets) {
  if (targets.size() != x.numel()) {
    shape_error("bce_with_logits", std::to_string(targets.size()) + " targets for " + shape_str(x.shape()));
  }
  require_finite(x, "bce_with_logits");
  const auto& in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = softplus(in[i]) - targets[i] * in[i];
  Tensor result = make(x.shape(), std::move(out), "bce_with_logits");
  ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
  auto tg = std::make_shared<std::vector<double>>(targets.begin(), targets.end());
  record_op(result, {&x}, [xi, oi, tg] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* g = in_grad(xi);
    const auto& xv = *xi->data;
    for (std::size_t i = 0; i < xv.size(); ++i) g[i] += go[i] * (sigmoid_scalar(xv[i]) - (*tg)[i]);
  });
  return result;
}

Tensor heatmap_focal_loss(const Tensor& logits, std::span<const double> target) {
  if (target.size() != logits.numel()) {
    shape_error("heatmap_focal_loss", std::to_string(target.size()) + " targets for " + shape_str(logits.shape()));
  }
  require_finite(logits, "heatmap_focal_loss");
  const auto& in = logits.values();
  double total = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double p = sigmoid_scalar(in[i]);
    if (target[i] == 1.0) {
      total += (1 - p) * (1 - p) * softplus(-in[i]);
    } else {
      const double w = std::pow(1 - target[i], 4);
      total += w * p * p * softplus(in[i]);
    }
  }
  Tensor result = make({1}, {total}, "heatmap_focal_loss");
  ImplPtr xi = logits.impl_ptr(), oi = result.impl_ptr();
  auto tg = std::make_shared<std::vector<double>>(target.begin(), target.end());
  record_op(result, {&logits}, [xi, oi, tg] {
    const double* go = out_grad(oi);
    if (!go) return;
    double* g = in_grad(xi);
    const auto& xv = *xi->data;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double p = sigmoid_scalar(xv[i]);
      double d;
      if ((*tg)[i] == 1.0) {
        // d/dx [(1-p)^2 softplus(-x)]
        d = -2.0 * p * (1 - p) * (1 - p) * softplus(-xv[i]) - (1 - p) * (1 - p) * (1 - p);
      } else {
        const double w = std::pow(1 - (*tg)[i], 4);
        d = w * (2.0 * p * p * (1 - p) * softplus(xv[i]) + p * p * p);
      }
      g[i] += go[0] * d;
    }
  });
  return result;
}

}  // namespace r2t::ops
