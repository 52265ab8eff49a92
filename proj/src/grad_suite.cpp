#include "r2t/grad_suite.hpp"

#include <functional>
#include <random>

#include "r2t/grad_check.hpp"
#include "r2t/decoder.hpp"
#include "r2t/encoder.hpp"
#include "r2t/extractor.hpp"
#include "r2t/ops.hpp"

namespace r2t {

namespace {

using Rng = std::mt19937_64;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor random(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Projects a tensor to a scalar with fixed random weights so that adjoints
// are exercised with non-uniform upstream gradients.
Tensor probe(const Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random(t.shape(), rng);
  w.set_requires_grad(false);
  return ops::sum(ops::mul(t, w));
}

struct Case {
  std::string kind;
  std::function<double(Rng&)> run;
};

double check(std::function<Tensor()> f, std::vector<Tensor> params) {
  return grad_check_params(f, std::move(params), 1e-5);
}

std::vector<Case> cases() {
  std::vector<Case> c;
  c.push_back({"matmul", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 5)}, r);
                 Tensor b = random({a.shape().back(), pick(r, 1, 5)}, r);
                 return check([=] { return probe(ops::matmul(a, b), 1); }, {a, b});
               }});
  c.push_back({"bmm", [](Rng& r) {
                 const std::size_t n = pick(r, 1, 3), m = pick(r, 1, 4), k = pick(r, 1, 4);
                 Tensor a = random({n, m, k}, r), b = random({n, k, pick(r, 1, 4)}, r);
                 return check([=] { return probe(ops::bmm(a, b), 2); }, {a, b});
               }});
  c.push_back({"reshape", [](Rng& r) {
                 const std::size_t m = pick(r, 1, 4), n = pick(r, 1, 4);
                 Tensor a = random({m, n}, r);
                 return check([=] { return probe(ops::reshape(a, {n, m}), 3); }, {a});
               }});
  c.push_back({"transpose", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 3)}, r);
                 return check([=] { return probe(ops::transpose(a, 0, 2), 4); }, {a});
               }});
  c.push_back({"permute", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 2)}, r);
                 return check([=] { return probe(ops::permute(a, {2, 0, 3, 1}), 5); }, {a});
               }});
  c.push_back({"add", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 3), pick(r, 1, 4)}, r), b = random(a.shape(), r);
                 return check([=] { return probe(ops::add(a, b), 6); }, {a, b});
               }});
  c.push_back({"add_broadcast", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 4)}, r);
                 Tensor b = random({a.dim(1), a.dim(2)}, r);
                 return check([=] { return probe(ops::add(a, b), 7); }, {a, b});
               }});
  c.push_back({"mul", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 3), pick(r, 1, 4)}, r), b = random({a.dim(1)}, r);
                 return check([=] { return probe(ops::mul(a, b), 8); }, {a, b});
               }});
  c.push_back({"sub", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 5)}, r), b = random(a.shape(), r);
                 return check([=] { return probe(ops::sub(a, b), 9); }, {a, b});
               }});
  c.push_back({"scale", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 6)}, r);
                 const double s = std::uniform_real_distribution<double>(-2, 2)(r);
                 return check([=] { return probe(ops::scale(a, s), 10); }, {a});
               }});
  c.push_back({"softmax", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 3), pick(r, 2, 6)}, r, -3, 3);
                 return check([=] { return probe(ops::softmax(a), 11); }, {a});
               }});
  c.push_back({"masked_softmax", [](Rng& r) {
                 const std::size_t t = pick(r, 2, 5);
                 Tensor a = random({pick(r, 1, 3), t, t}, r, -3, 3);
                 std::vector<std::uint8_t> mask(t * t);
                 for (std::size_t i = 0; i < t; ++i)
                   for (std::size_t j = 0; j < t; ++j) mask[i * t + j] = j <= i;
                 return check([=] { return probe(ops::masked_softmax(a, mask), 12); }, {a});
               }});
  c.push_back({"layer_norm", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 4), pick(r, 2, 6)}, r, -2, 2);
                 Tensor g = random({a.dim(1)}, r, 0.5, 1.5), b = random({a.dim(1)}, r);
                 return check([=] { return probe(ops::layer_norm(a, g, b), 13); }, {a, g, b});
               }});
  c.push_back({"gelu", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 8)}, r, -3, 3);
                 return check([=] { return probe(ops::gelu(a), 14); }, {a});
               }});
  c.push_back({"relu", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 8)}, r, -3, 3);
                 return check([=] { return probe(ops::relu(a), 15); }, {a});
               }});
  c.push_back({"sigmoid", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 8)}, r, -4, 4);
                 return check([=] { return probe(ops::sigmoid(a), 16); }, {a});
               }});
  c.push_back({"abs", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 8)}, r, -3, 3);
                 return check([=] { return probe(ops::abs(a), 17); }, {a});
               }});
  c.push_back({"smooth_l1", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 8)}, r, -3, 3);
                 return check([=] { return probe(ops::smooth_l1(a, 1.0), 18); }, {a});
               }});
  c.push_back({"embedding", [](Rng& r) {
                 Tensor table = random({pick(r, 2, 6), pick(r, 1, 4)}, r);
                 std::vector<std::size_t> ids(pick(r, 1, 6));
                 for (auto& i : ids) i = pick(r, 0, table.dim(0) - 1);
                 return check([=] { return probe(ops::embedding(table, ids), 19); }, {table});
               }});
  c.push_back({"gather_rows", [](Rng& r) {
                 Tensor x = random({pick(r, 2, 5), pick(r, 1, 3), 2}, r);
                 std::vector<std::size_t> rows(pick(r, 1, 6));
                 for (auto& i : rows) i = pick(r, 0, x.dim(0) - 1);
                 return check([=] { return probe(ops::gather_rows(x, rows), 20); }, {x});
               }});
  c.push_back({"concat", [](Rng& r) {
                 const std::size_t m = pick(r, 1, 3);
                 Tensor a = random({m, pick(r, 1, 3), 2}, r), b = random({m, pick(r, 1, 3), 2}, r);
                 return check([=] { return probe(ops::concat({a, b}, 1), 21); }, {a, b});
               }});
  c.push_back({"slice", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 3), pick(r, 2, 5)}, r);
                 const std::size_t e = pick(r, 1, a.dim(1));
                 const std::size_t s = pick(r, 0, e - 1);
                 return check([=] { return probe(ops::slice(a, 1, s, e), 22); }, {a});
               }});
  c.push_back({"sum", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 4), pick(r, 1, 4)}, r);
                 return check([=] { return ops::scale(ops::sum(ops::mul(a, a)), 0.5); }, {a});
               }});
  c.push_back({"mean", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 4), pick(r, 1, 4)}, r);
                 return check([=] { return ops::mean(ops::mul(a, a)); }, {a});
               }});
  c.push_back({"resize_bilinear", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 4), pick(r, 1, 4), pick(r, 1, 3)}, r);
                 const std::size_t oh = pick(r, 1, 7), ow = pick(r, 1, 7);
                 return check([=] { return probe(ops::resize_bilinear(a, oh, ow), 23); }, {a});
               }});
  c.push_back({"avg_pool2", [](Rng& r) {
                 Tensor a = random({2 * pick(r, 1, 3), 2 * pick(r, 1, 3), pick(r, 1, 3)}, r);
                 return check([=] { return probe(ops::avg_pool2(a), 24); }, {a});
               }});
  c.push_back({"upsample2_nearest", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 3)}, r);
                 return check([=] { return probe(ops::upsample2_nearest(a), 25); }, {a});
               }});
  c.push_back({"roi_align", [](Rng& r) {
                 Tensor a = random({pick(r, 2, 6), pick(r, 2, 6), pick(r, 1, 3)}, r);
                 std::uniform_real_distribution<double> u(0.0, 1.0);
                 std::vector<ops::FeatBox> boxes(pick(r, 1, 3));
                 for (auto& b : boxes) {
                   const double x1 = u(r) * a.dim(1) * 0.6, y1 = u(r) * a.dim(0) * 0.6;
                   b = {x1, y1, x1 + 0.3 + u(r) * (a.dim(1) - x1), y1 + 0.3 + u(r) * (a.dim(0) - y1)};
                 }
                 const std::size_t out = pick(r, 1, 4);
                 return check([=] { return probe(ops::roi_align(a, boxes, out), 26); }, {a});
               }});
  c.push_back({"cross_entropy", [](Rng& r) {
                 const std::size_t n = pick(r, 1, 4), v = pick(r, 2, 7);
                 Tensor a = random({n, v}, r, -3, 3);
                 std::vector<std::size_t> t(n);
                 for (auto& x : t) x = pick(r, 0, v - 1);
                 return check([=] { return ops::cross_entropy_label_smoothed(a, t, 0.1); }, {a});
               }});
  c.push_back({"bce_with_logits", [](Rng& r) {
                 Tensor a = random({pick(r, 1, 6)}, r, -4, 4);
                 std::vector<double> t(a.numel());
                 for (auto& x : t) x = std::uniform_real_distribution<double>(0, 1)(r);
                 return check([=] { return probe(ops::bce_with_logits(a, t), 27); }, {a});
               }});
  c.push_back({"heatmap_focal_loss", [](Rng& r) {
                 Tensor a = random({pick(r, 2, 8)}, r, -4, 4);
                 std::vector<double> t(a.numel());
                 for (auto& x : t) x = std::uniform_real_distribution<double>(0, 0.9)(r);
                 t[pick(r, 0, t.size() - 1)] = 1.0;
                 return check([=] { return ops::heatmap_focal_loss(a, t); }, {a});
               }});
  return c;
}

}  // namespace

std::vector<GradResult> primitive_grad_suite(std::uint64_t seed) {
  std::vector<GradResult> out;
  Rng rng(seed);
  for (const auto& c : cases()) out.push_back({c.kind, c.run(rng)});
  return out;
}

std::vector<GradResult> composed_grad_suite(std::uint64_t seed) {
  Rng r(seed);
  EncoderConfig ec;
  ec.patch_size = 2;
  ec.embed_dim = 8;
  ec.depth = 2;
  ec.heads = 2;
  ec.window = 4;
  ec.global_blocks = {1};
  ec.mlp_ratio = 2;
  ec.pyramid_channels = 4;
  ExtractorConfig xc;
  xc.rois_per_image = 6;
  xc.fc_dim = 6;
  xc.head_hidden = 5;
  xc.roi_side = 2;
  DecoderConfig dc;
  dc.layers = 2;
  dc.dim = 8;
  dc.heads = 2;
  dc.mlp_ratio = 2;
  dc.max_tokens = 8;
  dc.crop_side = 2;
  const auto vocab = text::build_vocab({"a red circle", "square", "a blue ring"}, 40);

  nn::Rng init(seed);
  VisualEncoder enc(ec, init);
  RegionExtractor ext(xc, ec.pyramid_channels, init);
  TextDecoder dec(dc, vocab, ec.pyramid_channels, init);

  const double side = 16;
  Tensor image = random({16, 16, 3}, r, 0, 1);
  image.set_requires_grad(false);
  auto random_box = [&] {
    std::uniform_real_distribution<double> u(0, 1);
    const double w = 3 + 5 * u(r), h = 3 + 5 * u(r);
    const double x = (side - w) * u(r), y = (side - h) * u(r);
    return Box{x, y, x + w, y + h};
  };
  const std::vector<Box> gts = {random_box(), random_box()};
  std::vector<Box> proposals;
  for (int i = 0; i < 6; ++i) proposals.push_back(random_box());
  const std::vector<std::vector<text::TokenId>> targets = {text::encode("a red circle", vocab),
                                                          text::encode("square", vocab)};
  const std::vector<std::size_t> tasks = {2, 1};

  auto losses = [&] {
    nn::Rng sample(seed + 1);
    return ext.losses(enc.encode(image), gts, {side, side}, sample, &proposals);
  };
  auto text_loss = [&] {
    Tensor objs = dec.project_objects(crop_regions(enc.encode(image), gts, dc.crop_side, xc.level_base));
    return dec.lm_loss_batch(objs, targets, tasks);
  };

  std::vector<Tensor> joint;
  std::array<std::vector<Tensor>, kCascadeStages> stage;
  enc.visit("encoder", [&](const std::string&, Tensor& t) { joint.push_back(t); });
  ext.visit("extractor", [&](const std::string& name, Tensor& t) {
    for (std::size_t s = 0; s < kCascadeStages; ++s) {
      if (name.find(".stage" + std::to_string(s) + ".") != std::string::npos) {
        (s == 0 ? joint : stage[s]).push_back(t);
        return;
      }
    }
    joint.push_back(t);
  });
  dec.visit("decoder", [&](const std::string&, Tensor& t) { joint.push_back(t); });

  constexpr std::size_t kCoords = 3;
  std::vector<GradResult> out;
  out.push_back({"encoder+extractor+decoder",
                 grad_check_params(
                     [&] {
                       auto l = losses();
                       Tensor obj = ops::add(ops::add(l.heatmap, l.size), ops::add(l.cls[0], l.box[0]));
                       return ops::add(obj, text_loss());
                     },
                     joint, 1e-5, kCoords, seed)});
  for (std::size_t s = 1; s < kCascadeStages; ++s) {
    out.push_back({"cascade stage " + std::to_string(s + 1), grad_check_params(
                                                                 [&] {
                                                                   auto l = losses();
                                                                   return ops::add(l.cls[s], l.box[s]);
                                                                 },
                                                                 stage[s], 1e-5, kCoords, seed)});
  }
  return out;
}

}  // namespace r2t
