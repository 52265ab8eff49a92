#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "r2t/tensor.hpp"

// Learned building blocks shared by the encoder, extractor and decoder.
namespace r2t::nn {

using Rng = std::mt19937_64;
using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

Tensor normal_init(Shape shape, double stddev, Rng& rng);
Tensor xavier_init(std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear make(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm make(std::size_t dim);
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp make(std::size_t dim, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

// Multi-head self-attention over a batch of independent sequences.
struct SelfAttention {
  Linear qkv;
  Linear proj;
  std::size_t heads = 1;

  static SelfAttention make(std::size_t dim, std::size_t heads, Rng& rng);
  // x: [B, T, D]. bias: optional [heads, T, T] added to the logits.
  // mask: optional row-major [T, T] (nonzero = may attend).
  Tensor operator()(const Tensor& x, const Tensor* bias = nullptr,
                    const std::vector<std::uint8_t>* mask = nullptr) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
struct TransformerBlock {
  LayerNorm ln1;
  SelfAttention attn;
  LayerNorm ln2;
  Mlp mlp;

  static TransformerBlock make(std::size_t dim, std::size_t heads, std::size_t mlp_hidden, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor* bias = nullptr,
                    const std::vector<std::uint8_t>* mask = nullptr) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

}  // namespace r2t::nn
