#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "r2t/metrics.hpp"

using namespace r2t;
using namespace r2t::metrics;
using namespace r2t::oracle;

TEST_CASE("interpolated AP helper matches the definition") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    std::vector<bool> tp(rng() % 12);
    for (std::size_t i = 0; i < tp.size(); ++i) tp[i] = rng() % 2;
    const std::size_t hits = std::count(tp.begin(), tp.end(), true);
    const std::size_t ngt = hits + rng() % 3;
    CHECK(interpolated_ap(tp, ngt) == doctest::Approx(oracle_ap(tp, ngt)).epsilon(1e-12));
  }
}

TEST_CASE("detection AP examples") {
  std::vector<GroundTruthRegion> gts = {{1, {0, 0, 10, 10}, "a"}};
  for (double s : {0.01, 0.5, 1.0}) {
    auto r = detection_ap({{1, {0, 0, 10, 10}, "a", s}}, gts, {"a", "b"});
    CHECK(r.ap == doctest::Approx(1.0));
    CHECK(r.ap50 == doctest::Approx(1.0));
    CHECK(r.ar1 == doctest::Approx(1.0));
    CHECK(r.evaluated_classes == std::vector<std::string>{"a"});
  }
  auto none = detection_ap({}, gts, {"a"});
  CHECK(none.ap == 0.0);
  CHECK(none.ar10 == 0.0);
  // Open-set filtering: an unknown class name is dropped before matching.
  auto dropped = detection_ap({{1, {0, 0, 10, 10}, "unicorn", 0.9}}, gts, {"a"});
  CHECK(dropped.ap == 0.0);
  // Wrong image never matches.
  CHECK(detection_ap({{2, {0, 0, 10, 10}, "a", 0.9}}, gts, {"a"}).ap == 0.0);
  // A higher-scored false positive halves the precision at full recall.
  auto fp = detection_ap({{1, {50, 50, 60, 60}, "a", 0.9}, {1, {0, 0, 10, 10}, "a", 0.8}}, gts, {"a"});
  CHECK(fp.ap == doctest::Approx(0.5));
  CHECK(fp.ar1 == 0.0);
  CHECK(fp.ar10 == doctest::Approx(1.0));
}

TEST_CASE("detection AP equals the exhaustive matching oracle") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 150; ++trial) {
    auto ins = random_instance(rng, false);
    double o50 = 0;
    const double o = oracle_detection_ap(ins.preds, ins.gts, {"a", "b"}, &o50);
    auto r = detection_ap(ins.preds, ins.gts, {"a", "b"});
    CHECK(std::abs(r.ap - o) <= 1e-12);
    CHECK(std::abs(r.ap50 - o50) <= 1e-12);
  }
}

TEST_CASE("AP is invariant under monotone score transforms") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto ins = random_instance(rng, false);
    auto moved = ins.preds;
    for (auto& p : moved) p.score = std::exp(3 * p.score) - 7;
    CHECK(detection_ap(ins.preds, ins.gts, {"a", "b"}).ap == detection_ap(moved, ins.gts, {"a", "b"}).ap);
    auto ins2 = random_instance(rng, true);
    auto moved2 = ins2.preds;
    for (auto& p : moved2) p.score = p.score * p.score * p.score;
    CHECK(densecap_map(ins2.preds, ins2.gts).map == densecap_map(moved2, ins2.gts).map);
  }
}

TEST_CASE("meteor examples") {
  CHECK(meteor("a red big circle", "a red big circle") == doctest::Approx(1.0 - 1.0 / 128).epsilon(1e-15));
  CHECK(meteor("red circle", "blue square") == 0.0);
  CHECK(meteor("", "blue square") == 0.0);
  CHECK(meteor("red circle on grass", "a red circle on the grass") ==
        doctest::Approx(oracle_meteor(words("red circle on grass"), words("a red circle on the grass"))).epsilon(1e-15));
  auto a = meteor_align(words("red circle on grass"), words("a red circle on the grass"));
  CHECK(a.matches == 4);
  CHECK(a.chunks == 2);
  // Repeated-word-free self score depends only on length.
  for (std::size_t n = 1; n <= 8; ++n) {
    std::vector<std::string> s(kWords.begin(), kWords.begin() + n);
    CHECK(meteor_tokens(s, s) == doctest::Approx(1.0 - 0.5 / std::pow(static_cast<double>(n), 3)).epsilon(1e-15));
  }
}

TEST_CASE("meteor equals the exhaustive alignment oracle") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 300; ++trial) {
    const auto c = words(random_sentence(rng, 7)), r = words(random_sentence(rng, 7));
    const auto fast = meteor_align(c, r), slow = oracle_align(c, r);
    CHECK(fast.matches == slow.matches);
    if (slow.matches) CHECK(fast.chunks == slow.chunks);
    CHECK(std::abs(meteor_tokens(c, r) - oracle_meteor(c, r)) <= 1e-12);
    const double s = meteor_tokens(c, r);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("dense-captioning mAP examples") {
  std::vector<GroundTruthRegion> gts = {{1, {0, 0, 10, 10}, "a red circle"}, {1, {20, 20, 30, 30}, "a blue square"}};
  std::vector<PredictionRecord> perfect = {{1, {0, 0, 10, 10}, "a red circle", 0.9},
                                           {1, {20, 20, 30, 30}, "a blue square", 0.8}};
  CHECK(densecap_map(perfect, gts).map == doctest::Approx(1.0));
  CHECK(densecap_map({}, gts).map == 0.0);
  // Right box, wrong words: only the vacuous METEOR column credits it.
  std::vector<PredictionRecord> wrong = {{1, {0, 0, 10, 10}, "green", 0.9}};
  auto r = densecap_map(wrong, gts);
  for (std::size_t a = 0; a < 5; ++a) {
    CHECK(r.cell_ap[a][0] > 0.0);
    for (std::size_t b = 1; b < 6; ++b) CHECK(r.cell_ap[a][b] == 0.0);
  }
}

TEST_CASE("dense-captioning mAP equals the brute-force oracle") {
  std::mt19937_64 rng(10);
  const ThresholdGrid grid;
  for (int trial = 0; trial < 120; ++trial) {
    auto ins = random_instance(rng, true);
    std::vector<std::vector<double>> cells;
    const double o = oracle_densecap(ins.preds, ins.gts, grid, &cells);
    auto r = densecap_map(ins.preds, ins.gts, grid);
    CHECK(std::abs(r.map - o) <= 1e-12);
    for (std::size_t a = 0; a < 5; ++a) {
      // Vacuous METEOR column is localization-only AP.
      ThresholdGrid loc{{grid.iou[a]}, {0.0}};
      std::vector<PredictionRecord> stripped = ins.preds;
      for (auto& p : stripped) p.text = "zzz";
      CHECK(r.cell_ap[a][0] == densecap_map(stripped, ins.gts, loc).map);
      for (std::size_t b = 0; b < 6; ++b) {
        CHECK(std::abs(r.cell_ap[a][b] - cells[a][b]) <= 1e-12);
        // Non-increasing in both thresholds.
        if (a > 0) CHECK(r.cell_ap[a][b] <= r.cell_ap[a - 1][b] + 1e-15);
        if (b > 0) CHECK(r.cell_ap[a][b] <= r.cell_ap[a][b - 1] + 1e-15);
      }
    }
  }
}
