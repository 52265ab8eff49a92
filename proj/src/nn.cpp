#include "r2t/nn.hpp"

#include <cmath>

#include "r2t/errors.hpp"
#include "r2t/ops.hpp"

namespace r2t::nn {

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor xavier_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = dist(rng);
  return Tensor({fan_in, fan_out}, std::move(v), true);
}

Linear Linear::make(std::size_t in, std::size_t out, Rng& rng) {
  return Linear{xavier_init(in, out, rng), Tensor::zeros({out}, true)};
}

Tensor Linear::operator()(const Tensor& x) const { return ops::add(ops::matmul(x, weight), bias); }

void Linear::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".weight", weight);
  f(prefix + ".bias", bias);
}

LayerNorm LayerNorm::make(std::size_t dim) {
  return LayerNorm{Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)};
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".gamma", gamma);
  f(prefix + ".beta", beta);
}

Mlp Mlp::make(std::size_t dim, std::size_t hidden, Rng& rng) {
  return Mlp{Linear::make(dim, hidden, rng), Linear::make(hidden, dim, rng)};
}

Tensor Mlp::operator()(const Tensor& x) const { return fc2(ops::gelu(fc1(x))); }

void Mlp::visit(const std::string& prefix, const ParamVisitor& f) {
  fc1.visit(prefix + ".fc1", f);
  fc2.visit(prefix + ".fc2", f);
}

SelfAttention SelfAttention::make(std::size_t dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  }
  return SelfAttention{Linear::make(dim, 3 * dim, rng), Linear::make(dim, dim, rng), heads};
}

Tensor SelfAttention::operator()(const Tensor& x, const Tensor* bias,
                                 const std::vector<std::uint8_t>* mask) const {
  if (x.rank() != 3) throw ContractViolation("attention: expected [B, T, D], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2), dh = d / heads;
  if (bias && bias->shape() != Shape{heads, t, t}) {
    throw ContractViolation("attention: bias " + shape_str(bias->shape()) + " does not match [" +
                            std::to_string(heads) + "," + std::to_string(t) + "," + std::to_string(t) + "]");
  }
  Tensor packed = ops::reshape(qkv(x), {b, t, 3, heads, dh});
  packed = ops::reshape(ops::permute(packed, {2, 0, 3, 1, 4}), {3, b * heads, t, dh});
  Tensor q = ops::reshape(ops::slice(packed, 0, 0, 1), {b * heads, t, dh});
  Tensor k = ops::reshape(ops::slice(packed, 0, 1, 2), {b * heads, t, dh});
  Tensor v = ops::reshape(ops::slice(packed, 0, 2, 3), {b * heads, t, dh});
  Tensor logits = ops::scale(ops::bmm(q, ops::transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (bias) logits = ops::reshape(ops::add(ops::reshape(logits, {b, heads, t, t}), *bias), {b * heads, t, t});
  Tensor weights = mask ? ops::masked_softmax(logits, *mask) : ops::softmax(logits);
  Tensor mixed = ops::reshape(ops::bmm(weights, v), {b, heads, t, dh});
  mixed = ops::reshape(ops::permute(mixed, {0, 2, 1, 3}), {b, t, d});
  return proj(mixed);
}

void SelfAttention::visit(const std::string& prefix, const ParamVisitor& f) {
  qkv.visit(prefix + ".qkv", f);
  proj.visit(prefix + ".proj", f);
}

TransformerBlock TransformerBlock::make(std::size_t dim, std::size_t heads, std::size_t mlp_hidden, Rng& rng) {
  return TransformerBlock{LayerNorm::make(dim), SelfAttention::make(dim, heads, rng), LayerNorm::make(dim),
                          Mlp::make(dim, mlp_hidden, rng)};
}

Tensor TransformerBlock::operator()(const Tensor& x, const Tensor* bias,
                                    const std::vector<std::uint8_t>* mask) const {
  Tensor h = ops::add(x, attn(ln1(x), bias, mask));
  return ops::add(h, mlp(ln2(h)));
}

void TransformerBlock::visit(const std::string& prefix, const ParamVisitor& f) {
  ln1.visit(prefix + ".ln1", f);
  attn.visit(prefix + ".attn", f);
  ln2.visit(prefix + ".ln2", f);
  mlp.visit(prefix + ".mlp", f);
}

}  // namespace r2t::nn
