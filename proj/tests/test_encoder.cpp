#include <cmath>
#include <random>

#include "doctest.h"
#include "r2t/encoder.hpp"
#include "r2t/errors.hpp"
#include "r2t/grad_check.hpp"
#include "r2t/ops.hpp"

using namespace r2t;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v));
}

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.patch_size = 2;
  c.embed_dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.window = 4;
  c.global_blocks = {1};
  c.mlp_ratio = 2;
  c.pyramid_channels = 4;
  return c;
}

// Plain-loop reference of one pre-norm block applied to a set of tokens.
std::vector<double> reference_block(const nn::TransformerBlock& blk, const std::vector<double>& x, std::size_t t,
                                    std::size_t d, const std::vector<double>* bias /* [heads, t, t] */) {
  auto ln = [&](const std::vector<double>& in, const nn::LayerNorm& p) {
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < t; ++i) {
      double mu = 0, var = 0;
      for (std::size_t j = 0; j < d; ++j) mu += in[i * d + j];
      mu /= d;
      for (std::size_t j = 0; j < d; ++j) var += (in[i * d + j] - mu) * (in[i * d + j] - mu);
      var /= d;
      for (std::size_t j = 0; j < d; ++j) {
        out[i * d + j] = p.gamma.data()[j] * (in[i * d + j] - mu) / std::sqrt(var + 1e-6) + p.beta.data()[j];
      }
    }
    return out;
  };
  auto linear = [&](const std::vector<double>& in, std::size_t rows, const nn::Linear& l) {
    const std::size_t din = l.weight.dim(0), dout = l.weight.dim(1);
    std::vector<double> out(rows * dout);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < dout; ++o) {
        double s = l.bias.data()[o];
        for (std::size_t i = 0; i < din; ++i) s += in[r * din + i] * l.weight.data()[i * dout + o];
        out[r * dout + o] = s;
      }
    return out;
  };
  const std::size_t heads = blk.attn.heads, dh = d / heads;
  auto h1 = ln(x, blk.ln1);
  auto qkv = linear(h1, t, blk.attn.qkv);
  std::vector<double> mixed(t * d, 0.0);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t q = 0; q < t; ++q) {
      std::vector<double> s(t);
      double mx = -1e300;
      for (std::size_t k = 0; k < t; ++k) {
        double dot = 0;
        for (std::size_t e = 0; e < dh; ++e) dot += qkv[q * 3 * d + hd * dh + e] * qkv[k * 3 * d + d + hd * dh + e];
        s[k] = dot / std::sqrt(static_cast<double>(dh)) + (bias ? (*bias)[(hd * t + q) * t + k] : 0.0);
        mx = std::max(mx, s[k]);
      }
      double z = 0;
      for (auto& v : s) z += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < t; ++k)
        for (std::size_t e = 0; e < dh; ++e) mixed[q * d + hd * dh + e] += s[k] / z * qkv[k * 3 * d + 2 * d + hd * dh + e];
    }
  }
  auto attn = linear(mixed, t, blk.attn.proj);
  std::vector<double> r1(t * d);
  for (std::size_t i = 0; i < t * d; ++i) r1[i] = x[i] + attn[i];
  auto h2 = linear(ln(r1, blk.ln2), t, blk.mlp.fc1);
  for (auto& v : h2) v = 0.5 * v * (1 + std::erf(v / std::sqrt(2.0)));
  auto m = linear(h2, t, blk.mlp.fc2);
  for (std::size_t i = 0; i < t * d; ++i) r1[i] += m[i];
  return r1;
}

}  // namespace

TEST_CASE("config validation") {
  EncoderConfig c;
  CHECK_NOTHROW(c.validate());
  c.heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EncoderConfig{};
  c.global_blocks = {0, 1};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.depth = 12;
  c.global_blocks = {2, 5, 8, 11};
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("patchify token counts") {
  nn::Rng rng(1);
  EncoderConfig c;
  VisualEncoder enc(c, rng);
  CHECK(enc.patchify(Tensor::zeros({64, 64, 3})).shape() == Shape{64, 64});
  CHECK_THROWS_AS(enc.patchify(Tensor::zeros({65, 64, 3})), ContractViolation);

  EncoderConfig big;
  big.patch_size = 16;
  big.embed_dim = 8;
  big.heads = 1;
  VisualEncoder paper_scale(big, rng);
  CHECK(paper_scale.patchify(Tensor::zeros({1024, 1024, 3})).shape() == Shape{4096, 8});
}

TEST_CASE("window partition counts and inverse") {
  Tensor m = random_tensor({28, 28, 3}, 2);
  CHECK(window_partition(m, 14).dim(0) == 4);
  Tensor m8 = random_tensor({8, 8, 2}, 3);
  Tensor w = window_partition(m8, 4);
  CHECK(w.dim(0) == 4);
  CHECK(window_merge(w, 8, 8).values() == m8.values());
  // window 0 covers rows 0..3, cols 0..3; window 1 covers cols 4..7
  CHECK(w.at({1, 2, 3, 1}) == m8.at({2, 7, 1}));
  Tensor one = window_partition(m8, 8);
  CHECK(one.dim(0) == 1);
  CHECK(one.values() == m8.values());
  CHECK_THROWS_AS(window_partition(m8, 3), ContractViolation);
}

TEST_CASE("windowed block with a full-map window and zero bias equals the global block") {
  nn::Rng rng(4);
  auto blk = nn::TransformerBlock::make(8, 2, 16, rng);
  Tensor map = random_tensor({4, 4, 8}, 5);
  Tensor zero_bias = Tensor::zeros({49, 2});
  Tensor a = attention_block(blk, map, 4, &zero_bias);
  Tensor b = attention_block(blk, map, 0, nullptr);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-13));
  Tensor wrong = Tensor::zeros({9, 2});
  CHECK_THROWS_AS(attention_block(blk, map, 4, &wrong), ContractViolation);
}

TEST_CASE("windowed block matches a per-window dense attention oracle") {
  nn::Rng rng(6);
  const std::size_t d = 8, w = 2;
  auto blk = nn::TransformerBlock::make(d, 2, 16, rng);
  Tensor table = random_tensor({9, 2}, 7, -0.5, 0.5);
  Tensor map = random_tensor({4, 6, d}, 8);
  Tensor out = attention_block(blk, map, w, &table);
  const auto ridx = relative_position_index(w);
  for (std::size_t wy = 0; wy < 2; ++wy) {
    for (std::size_t wx = 0; wx < 3; ++wx) {
      std::vector<double> tokens;
      for (std::size_t y = 0; y < w; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t c = 0; c < d; ++c) tokens.push_back(map.at({wy * w + y, wx * w + x, c}));
      std::vector<double> bias(2 * 4 * 4);
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t q = 0; q < 4; ++q)
          for (std::size_t k = 0; k < 4; ++k) bias[(h * 4 + q) * 4 + k] = table.at({ridx[q * 4 + k], h});
      auto ref = reference_block(blk, tokens, 4, d, &bias);
      std::size_t i = 0;
      for (std::size_t y = 0; y < w; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t c = 0; c < d; ++c) CHECK(out.at({wy * w + y, wx * w + x, c}) == doctest::Approx(ref[i++]).epsilon(1e-12));
    }
  }
}

TEST_CASE("window isolation and global mixing") {
  nn::Rng rng(9);
  const std::size_t d = 8;
  auto blk = nn::TransformerBlock::make(d, 2, 16, rng);
  Tensor table = random_tensor({9, 2}, 10, -0.5, 0.5);
  Tensor map = random_tensor({4, 4, d}, 11);
  // Zero everything outside window 0 (rows 0-1, cols 0-1).
  Tensor masked = map.clone();
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      if (y >= 2 || x >= 2)
        for (std::size_t c = 0; c < d; ++c) masked.mutable_data()[(y * 4 + x) * d + c] = 0.0;
  Tensor a = attention_block(blk, map, 2, &table);
  Tensor b = attention_block(blk, masked, 2, &table);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x)
      for (std::size_t c = 0; c < d; ++c) CHECK(a.at({y, x, c}) == b.at({y, x, c}));

  // One global block: perturbing a single token moves every output token.
  Tensor g0 = attention_block(blk, map, 0, nullptr);
  Tensor bumped = map.clone();
  bumped.mutable_data()[5 * d + 3] += 0.5;
  Tensor g1 = attention_block(blk, bumped, 0, nullptr);
  for (std::size_t tok = 0; tok < 16; ++tok) {
    double diff = 0;
    for (std::size_t c = 0; c < d; ++c) diff += std::abs(g0.data()[tok * d + c] - g1.data()[tok * d + c]);
    CHECK(diff > 0.0);
  }
}

TEST_CASE("pyramid side ladder") {
  nn::Rng rng(12);
  VisualEncoder enc(EncoderConfig{}, rng);
  FeaturePyramid p = enc.encode(random_tensor({64, 64, 3}, 13, 0, 1));
  const std::size_t sides[] = {16, 8, 4, 2, 1};
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    CHECK(p.levels[l].dim(0) == sides[l]);
    CHECK(p.levels[l].dim(1) == sides[l]);
    CHECK(p.levels[l].dim(2) == 32);
  }
  CHECK(p.strides[0] == 4.0);
  CHECK(p.strides[4] == 64.0);
}

TEST_CASE("paper-scale input gives sides 128..8") {
  nn::Rng rng(14);
  EncoderConfig c;
  c.patch_size = 16;
  c.embed_dim = 4;
  c.heads = 1;
  c.depth = 2;
  c.global_blocks = {1};
  c.window = 16;
  c.mlp_ratio = 1;
  c.pyramid_channels = 2;
  VisualEncoder enc(c, rng);
  FeaturePyramid p = enc.encode(Tensor::full({1024, 1024, 3}, 0.3));
  const std::size_t sides[] = {128, 64, 32, 16, 8};
  for (std::size_t l = 0; l < kNumLevels; ++l) CHECK(p.levels[l].dim(0) == sides[l]);
}

TEST_CASE("constant image gives spatially constant levels") {
  nn::Rng rng(15);
  VisualEncoder enc(EncoderConfig{}, rng);
  FeaturePyramid p = enc.encode(Tensor::full({64, 64, 3}, 0.7));
  for (const auto& level : p.levels) {
    const std::size_t c = level.dim(2), n = level.numel() / c;
    for (std::size_t i = 1; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        CHECK(level.data()[i * c + ch] == doctest::Approx(level.data()[ch]).epsilon(1e-9));
  }
}

TEST_CASE("full encoder gradient check on a tiny config") {
  nn::Rng rng(16);
  VisualEncoder enc(tiny_config(), rng);
  Tensor image = random_tensor({16, 16, 3}, 17, 0, 1);
  std::vector<Tensor> params;
  enc.visit("enc", [&](const std::string&, Tensor& p) { params.push_back(p); });
  auto f = [&] {
    FeaturePyramid p = enc.encode(image);
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t l = 0; l < kNumLevels; ++l) {
      Tensor w = random_tensor(p.levels[l].shape(), 100 + l);
      total = ops::add(total, ops::sum(ops::mul(p.levels[l], w)));
    }
    return total;
  };
  CHECK(grad_check_params(f, params, 1e-5, 6, 18) < 1e-4);
}
