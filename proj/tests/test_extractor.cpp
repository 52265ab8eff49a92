#include <cmath>
#include <random>

#include "doctest.h"
#include "r2t/errors.hpp"
#include "r2t/extractor.hpp"
#include "r2t/grad_check.hpp"
#include "r2t/grad_suite.hpp"
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

// Pyramid for a 64x64 image: sides 16, 8, 4, 2, 1.
FeaturePyramid random_pyramid(std::size_t c, std::uint64_t seed) {
  FeaturePyramid p;
  std::size_t side = 16;
  double stride = 4;
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    p.levels[l] = random_tensor({side, side, c}, seed + l);
    p.strides[l] = stride;
    side /= 2;
    stride *= 2;
  }
  return p;
}

ForegroundObject obj(Box b, double s) {
  ForegroundObject o;
  o.box = b;
  o.objectness = s;
  return o;
}

Box random_box(std::mt19937_64& rng, double extent = 64) {
  std::uniform_real_distribution<double> u(0, extent - 4);
  std::uniform_real_distribution<double> side(4, extent / 2);
  const double x = u(rng), y = u(rng);
  return Box{x, y, x + side(rng), y + side(rng)};
}

// Independent bilinear sample with edge clamping, cell centres at integer coordinates.
double bilinear(const Tensor& m, double y, double x, std::size_t ch) {
  const std::size_t h = m.dim(0), w = m.dim(1), c = m.dim(2);
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  auto v = [&](std::size_t i, std::size_t j) { return m.data()[(i * w + j) * c + ch]; };
  return (1 - fy) * ((1 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1 - fx) * v(y1, x0) + fx * v(y1, x1));
}

}  // namespace

TEST_CASE("iou examples and properties") {
  CHECK(iou({0, 0, 2, 2}, {1, 0, 3, 2}) == doctest::Approx(1.0 / 3.0));
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
  CHECK(iou({0, 0, 1, 1}, {1, 1, 2, 2}) == 0.0);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    Box a = random_box(rng), b = random_box(rng);
    const double v = iou(a, b);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == doctest::Approx(iou(b, a)).epsilon(1e-12));
    CHECK(iou(a, a) == doctest::Approx(1.0));
  }
}

TEST_CASE("box delta round trip and identity") {
  std::mt19937_64 rng(5);
  for (const auto& w : cascade_delta_weights()) {
    for (int i = 0; i < 200; ++i) {
      Box anchor = random_box(rng), target = random_box(rng);
      Box back = decode_deltas(encode_deltas(target, anchor, w), anchor, w);
      CHECK(back.x1 == doctest::Approx(target.x1).epsilon(1e-9));
      CHECK(back.y1 == doctest::Approx(target.y1).epsilon(1e-9));
      CHECK(back.x2 == doctest::Approx(target.x2).epsilon(1e-9));
      CHECK(back.y2 == doctest::Approx(target.y2).epsilon(1e-9));
      Box same = decode_deltas({0, 0, 0, 0}, anchor, w);
      CHECK(same.x1 == doctest::Approx(anchor.x1));
      CHECK(same.y2 == doctest::Approx(anchor.y2));
    }
  }
}

TEST_CASE("level assignment by area") {
  CHECK(level_for_box({0, 0, 16, 16}, 16) == Level::kBase);
  CHECK(level_for_box({0, 0, 8, 8}, 16) == Level::kHi);
  CHECK(level_for_box({0, 0, 2, 2}, 16) == Level::kHi);
  CHECK(level_for_box({0, 0, 32, 32}, 16) == Level::kLow1);
  CHECK(level_for_box({0, 0, 64, 64}, 16) == Level::kLow2);
  CHECK(level_for_box({0, 0, 512, 512}, 16) == Level::kLow3);
  CHECK(level_for_box({0, 0, 31, 31}, 16) == Level::kBase);
}

TEST_CASE("hard and soft suppression") {
  auto hard = nms({obj({0, 0, 10, 10}, 0.9), obj({0, 0, 10, 10}, 0.8)}, 0.5);
  REQUIRE(hard.size() == 1);
  CHECK(hard[0].objectness == 0.9);

  auto soft = soft_nms({obj({0, 0, 10, 10}, 0.9), obj({0, 0, 10, 10}, 0.8)}, 0.5, 0.001);
  REQUIRE(soft.size() == 2);
  CHECK(soft[0].objectness == 0.9);
  CHECK(soft[1].objectness == doctest::Approx(0.8 * std::exp(-2.0)).epsilon(1e-12));
  CHECK(soft[1].objectness == doctest::Approx(0.1083).epsilon(1e-3));

  // Disjoint boxes are untouched.
  auto apart = soft_nms({obj({0, 0, 5, 5}, 0.3), obj({10, 10, 20, 20}, 0.6)}, 0.5, 0.001);
  REQUIRE(apart.size() == 2);
  CHECK(apart[0].objectness == 0.6);
  CHECK(apart[1].objectness == 0.3);
}

TEST_CASE("suppression properties on random sets") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ForegroundObject> objs;
    for (int i = 0; i < 12; ++i) objs.push_back(obj(random_box(rng, 40), u(rng)));
    auto shuffled = objs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);

    auto a = nms(objs, 0.5), b = nms(shuffled, 0.5);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].box == b[i].box);
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = i + 1; j < a.size(); ++j) CHECK(iou(a[i].box, a[j].box) <= 0.5);

    auto sa = soft_nms(objs, 0.5, 0.001), sb = soft_nms(shuffled, 0.5, 0.001);
    REQUIRE(sa.size() == sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
      CHECK(sa[i].box == sb[i].box);
      CHECK(sa[i].objectness == doctest::Approx(sb[i].objectness).epsilon(1e-12));
      CHECK(sa[i].objectness >= 0.001);
    }
    // Scores never increase.
    for (const auto& s : sa) {
      double original = 0;
      for (const auto& o : objs)
        if (o.box == s.box) original = o.objectness;
      CHECK(s.objectness <= original + 1e-15);
    }

    // Tiny sigma behaves like hard suppression at IoU 0.
    auto limit = soft_nms(objs, 1e-9, 0.001), zero = nms(objs, 0.0);
    REQUIRE(limit.size() == zero.size());
    for (std::size_t i = 0; i < limit.size(); ++i) CHECK(limit[i].box == zero[i].box);
  }
}

TEST_CASE("target assignment per stage") {
  // IoU of 0.55 with the only ground truth.
  const Box gt{0, 0, 100, 100};
  const Box box{0, 0, 100, 55};
  REQUIRE(iou(box, gt) == doctest::Approx(0.55));
  CHECK(assign_targets({box}, {gt}, 0)[0] == std::optional<std::size_t>(0));
  CHECK_FALSE(assign_targets({box}, {gt}, 1)[0].has_value());
  CHECK_FALSE(assign_targets({box}, {gt}, 2)[0].has_value());

  auto none = assign_targets({box, gt}, {}, 0);
  CHECK_FALSE(none[0].has_value());
  CHECK_FALSE(none[1].has_value());

  // Tie goes to the lowest index.
  CHECK(assign_targets({gt}, {gt, gt}, 2)[0] == std::optional<std::size_t>(0));
  CHECK_THROWS_AS(assign_targets({box}, {gt}, 3), ContractViolation);
}

TEST_CASE("single heatmap peak is the first proposal") {
  nn::Rng rng(1);
  RegionExtractor ex(ExtractorConfig{}, 4, rng);
  FeaturePyramid pyr = random_pyramid(4, 2);
  HeadMaps maps;
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    const std::size_t s = pyr.levels[l].dim(0);
    std::vector<double> v(s * s * 3, 0.0);
    for (std::size_t i = 0; i < s * s; ++i) v[i * 3] = -20.0;
    maps[l] = Tensor({s, s, 3}, v);
  }
  // Peak at P_base cell (row 3, col 5), box of 2x1 cells.
  auto v = maps[1].mutable_data();
  const std::size_t idx = 3 * 8 + 5;
  v[idx * 3] = 20.0;
  v[idx * 3 + 1] = std::log(2.0);
  v[idx * 3 + 2] = 0.0;
  auto props = ex.generate_proposals(maps, pyr, 10, {64, 64});
  REQUIRE_FALSE(props.empty());
  CHECK(props[0].level == Level::kBase);
  CHECK(props[0].score == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(props[0].box.cx() == doctest::Approx(5.5 * 8));
  CHECK(props[0].box.cy() == doctest::Approx(3.5 * 8));
  CHECK(props[0].box.width() == doctest::Approx(16));
  CHECK(props[0].box.height() == doctest::Approx(8));
  for (std::size_t i = 1; i < props.size(); ++i) CHECK(props[i].score <= props[i - 1].score);
  CHECK(ex.generate_proposals(maps, pyr, 3, {64, 64}).size() == 3);
  CHECK_THROWS_AS(ex.generate_proposals(maps, pyr, 0, {64, 64}), ConfigError);
}

TEST_CASE("region crops") {
  Tensor constant = Tensor::full({8, 8, 3}, 0.25);
  auto c = roi_crop(constant, {3, 5, 40, 29}, 4, 8, {64, 64});
  REQUIRE(c.has_value());
  CHECK(c->shape() == Shape{4, 4, 3});
  for (double x : c->data()) CHECK(x == doctest::Approx(0.25));

  Tensor ramp = random_tensor({8, 8, 2}, 9);
  const Box box{0, 0, 64, 64};
  auto full = roi_crop(ramp, box, 4, 8, {64, 64});
  REQUIRE(full.has_value());
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t ch = 0; ch < 2; ++ch) {
        const double y = (i + 0.5) * 2.0 - 0.5, x = (j + 0.5) * 2.0 - 0.5;
        CHECK(full->at({i, j, ch}) == doctest::Approx(bilinear(ramp, y, x, ch)).epsilon(1e-12));
      }

  Box odd{10.3, 7.1, 37.9, 22.6};
  auto part = roi_crop(ramp, odd, 3, 8, {64, 64});
  REQUIRE(part.has_value());
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const double y = (odd.y1 + (i + 0.5) * odd.height() / 3) / 8 - 0.5;
      const double x = (odd.x1 + (j + 0.5) * odd.width() / 3) / 8 - 0.5;
      CHECK(part->at({i, j, 1}) == doctest::Approx(bilinear(ramp, y, x, 1)).epsilon(1e-12));
    }

  CHECK_FALSE(roi_crop(constant, {5, 5, 5.5, 5.5}, 4, 8, {64, 64}).has_value());
  CHECK_FALSE(roi_crop(constant, {70, 70, 90, 90}, 4, 8, {64, 64}).has_value());
}

TEST_CASE("crop_regions keeps input order across levels") {
  FeaturePyramid pyr = random_pyramid(3, 4);
  std::vector<Box> boxes = {{0, 0, 40, 40}, {2, 2, 8, 8}, {10, 10, 26, 26}, {1, 1, 5, 6}};
  Tensor all = crop_regions(pyr, boxes, 2, 16);
  REQUIRE(all.shape() == Shape{4, 4, 3});
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    const auto l = static_cast<std::size_t>(level_for_box(boxes[r], 16));
    auto one = roi_crop(pyr.levels[l], boxes[r], 2, pyr.strides[l], {64, 64});
    REQUIRE(one.has_value());
    for (std::size_t k = 0; k < 12; ++k) CHECK(all.data()[r * 12 + k] == doctest::Approx(one->data()[k]));
  }
}

TEST_CASE("cascade objectness is the mean of stage scores") {
  nn::Rng rng(7);
  RegionExtractor ex(ExtractorConfig{}, 4, rng);
  FeaturePyramid pyr = random_pyramid(4, 8);
  NoGradScope ng;
  auto props = ex.generate_proposals(ex.heads(pyr), pyr, 16, {64, 64});
  REQUIRE_FALSE(props.empty());
  auto objs = ex.cascade_refine(props, pyr, {64, 64});
  REQUIRE(objs.size() == props.size());
  for (const auto& o : objs) {
    const double m = (o.stage_scores[0] + o.stage_scores[1] + o.stage_scores[2]) / 3.0;
    CHECK(o.objectness == doctest::Approx(m).epsilon(1e-12));
    CHECK(o.box.valid());
    CHECK(o.box.x1 >= 0);
    CHECK(o.box.x2 <= 64);
  }
  auto det = ex.detect(pyr, {64, 64});
  CHECK(det.size() <= ex.config().max_detections);
  for (std::size_t i = 0; i < det.size(); ++i) {
    CHECK(det[i].objectness >= ex.config().min_objectness);
    if (i > 0) CHECK(det[i].objectness <= det[i - 1].objectness);
  }
}

TEST_CASE("extractor gradient check through proposal head and first stage") {
  ExtractorConfig cfg;
  cfg.rois_per_image = 6;
  cfg.train_proposals = 8;
  cfg.fc_dim = 6;
  cfg.head_hidden = 5;
  cfg.roi_side = 2;
  nn::Rng rng(3);
  RegionExtractor ex(cfg, 3, rng);
  FeaturePyramid pyr = random_pyramid(3, 12);
  // Proposal boxes are detached, so the head is probed on its own losses and
  // the first stage on its own.
  std::vector<Tensor> head, stage0;
  ex.visit("x", [&](const std::string& name, Tensor& t) {
    if (name.find("proposal_head") != std::string::npos) head.push_back(t);
    if (name.find("stage0") != std::string::npos) stage0.push_back(t);
  });
  head.push_back(pyr.levels[0]);
  head.push_back(pyr.levels[1]);
  const std::vector<Box> gts = {{4, 6, 20, 18}, {30, 30, 58, 60}};
  auto losses = [&]() {
    nn::Rng sample_rng(99);
    return ex.losses(pyr, gts, {64, 64}, sample_rng);
  };
  CHECK(grad_check_params([&] { auto l = losses(); return ops::add(l.heatmap, l.size); }, head, 1e-6, 8, 5) < 1e-5);
  CHECK(grad_check_params([&] { auto l = losses(); return ops::add(l.cls[0], l.box[0]); }, stage0, 1e-6, 8, 5) <
        1e-5);
}

TEST_CASE("extractor losses fall when fitting one image") {
  nn::Rng rng(21);
  RegionExtractor ex(ExtractorConfig{}, 8, rng);
  FeaturePyramid pyr = random_pyramid(8, 30);
  const std::vector<Box> gts = {{4, 6, 20, 18}, {30, 30, 58, 60}};
  std::vector<Tensor> params;
  ex.visit("x", [&](const std::string&, Tensor& t) {
    t.set_requires_grad(true);
    params.push_back(t);
  });
  // Plain Adam.
  std::vector<std::vector<double>> m(params.size()), v(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) m[i].assign(params[i].numel(), 0), v[i] = m[i];
  double first = 0, last = 0;
  for (int step = 1; step <= 150; ++step) {
    for (auto& p : params) p.zero_grad();
    Tape tape;
    double loss;
    {
      TapeScope scope(tape);
      nn::Rng sample_rng(step);
      auto l = ex.losses(pyr, gts, {64, 64}, sample_rng);
      loss = l.total.item();
      tape.backward(l.total);
    }
    if (step == 1) first = loss;
    last = loss;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) continue;
      auto w = params[i].mutable_data();
      auto g = params[i].grad();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[i][k] = 0.9 * m[i][k] + 0.1 * g[k];
        v[i][k] = 0.999 * v[i][k] + 0.001 * g[k] * g[k];
        const double mh = m[i][k] / (1 - std::pow(0.9, step)), vh = v[i][k] / (1 - std::pow(0.999, step));
        w[k] -= 3e-3 * mh / (std::sqrt(vh) + 1e-8);
      }
    }
  }
  MESSAGE("extractor loss " << first << " -> " << last);
  CHECK(last < 0.3 * first);
}

TEST_CASE("composed encoder-extractor-decoder gradient suite") {
  for (std::uint64_t seed : {1, 2}) {
    for (const auto& r : composed_grad_suite(seed)) {
      INFO(r.kind << " seed " << seed);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}
