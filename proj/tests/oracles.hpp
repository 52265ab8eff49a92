#pragma once

// Brute-force references for the evaluation metrics, plus random instances.
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>

#include "r2t/metrics.hpp"

namespace r2t::oracle {

using namespace r2t::metrics;

// 101-point AP straight from the definition.
inline double oracle_ap(const std::vector<bool>& tp, std::size_t num_gt) {
  if (num_gt == 0) return 0;
  double total = 0;
  for (int r = 0; r <= 100; ++r) {
    double best = 0;
    std::size_t hits = 0;
    for (std::size_t k = 0; k < tp.size(); ++k) {
      hits += tp[k];
      const double recall = static_cast<double>(hits) / num_gt;
      if (recall >= r / 100.0) best = std::max(best, static_cast<double>(hits) / (k + 1));
    }
    total += best;
  }
  return total / 101;
}

// Enumerates every partial injective assignment of ranked predictions to
// eligible ground truths and keeps the lexicographically best one under the
// key (IoU of the match, then lower ground-truth index), rank by rank.
inline std::vector<bool> oracle_match(const std::vector<std::size_t>& ranked, std::size_t num_gt,
                               const std::function<bool(std::size_t, std::size_t)>& eligible,
                               const std::function<double(std::size_t, std::size_t)>& overlap) {
  using Key = std::vector<std::pair<double, long>>;
  Key best_key;
  std::vector<long> best, cur(ranked.size(), -1);
  std::vector<bool> used(num_gt, false);
  std::function<void(std::size_t)> rec = [&](std::size_t r) {
    if (r == ranked.size()) {
      Key key;
      for (std::size_t i = 0; i < ranked.size(); ++i) {
        key.push_back(cur[i] < 0 ? std::make_pair(-1.0, 0L)
                                 : std::make_pair(overlap(ranked[i], static_cast<std::size_t>(cur[i])), -cur[i]));
      }
      if (best.empty() || key > best_key) {
        best_key = key;
        best = cur;
      }
      return;
    }
    rec(r + 1);
    for (std::size_t g = 0; g < num_gt; ++g) {
      if (used[g] || !eligible(ranked[r], g)) continue;
      used[g] = true;
      cur[r] = static_cast<long>(g);
      rec(r + 1);
      used[g] = false;
      cur[r] = -1;
    }
  };
  rec(0);
  std::vector<bool> tp(ranked.size());
  for (std::size_t i = 0; i < ranked.size(); ++i) tp[i] = best.empty() ? false : best[i] >= 0;
  return tp;
}

inline std::vector<std::size_t> ranked_indices(const std::vector<PredictionRecord>& preds, const std::vector<std::size_t>& idx) {
  auto out = idx;
  std::stable_sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  return out;
}

inline double oracle_detection_ap(const std::vector<PredictionRecord>& preds, const std::vector<GroundTruthRegion>& gts,
                           const std::vector<std::string>& classes, double* ap50 = nullptr) {
  double total = 0, total50 = 0;
  int evaluated = 0;
  for (const auto& cls : classes) {
    std::vector<std::size_t> p, g;
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (preds[i].text == cls) p.push_back(i);
    for (std::size_t i = 0; i < gts.size(); ++i)
      if (gts[i].text == cls) g.push_back(i);
    if (g.empty()) continue;
    ++evaluated;
    const auto ranked = ranked_indices(preds, p);
    double sum = 0;
    for (int t = 0; t < 10; ++t) {
      const double thr = 0.5 + 0.05 * t;
      auto overlap = [&](std::size_t pi, std::size_t gi) { return iou(preds[pi].box, gts[g[gi]].box); };
      auto ok = [&](std::size_t pi, std::size_t gi) {
        return preds[pi].image_id == gts[g[gi]].image_id && overlap(pi, gi) >= thr;
      };
      const double a = oracle_ap(oracle_match(ranked, g.size(), ok, overlap), g.size());
      sum += a;
      if (t == 0) total50 += a;
    }
    total += sum / 10;
  }
  if (ap50) *ap50 = evaluated ? total50 / evaluated : 0;
  return evaluated ? total / evaluated : 0;
}

// Every partial injective word alignment; max matches, then min chunks.
inline MeteorAlignment oracle_align(const std::vector<std::string>& c, const std::vector<std::string>& r) {
  MeteorAlignment best;
  bool any = false;
  std::vector<long> map(c.size(), -1);
  std::vector<bool> used(r.size(), false);
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == c.size()) {
      std::size_t m = 0, chunks = 0;
      long prev_i = -10, prev_j = -10;
      for (std::size_t k = 0; k < c.size(); ++k) {
        if (map[k] < 0) continue;
        ++m;
        if (!(static_cast<long>(k) == prev_i + 1 && map[k] == prev_j + 1)) ++chunks;
        prev_i = static_cast<long>(k);
        prev_j = map[k];
      }
      if (!any || m > best.matches || (m == best.matches && chunks < best.chunks)) best = {m, chunks};
      any = true;
      return;
    }
    rec(i + 1);
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (used[j] || r[j] != c[i]) continue;
      used[j] = true;
      map[i] = static_cast<long>(j);
      rec(i + 1);
      used[j] = false;
      map[i] = -1;
    }
  };
  rec(0);
  return best;
}

inline double oracle_meteor(const std::vector<std::string>& c, const std::vector<std::string>& r) {
  if (c.empty() || r.empty()) return 0;
  auto a = oracle_align(c, r);
  if (a.matches == 0) return 0;
  const double p = static_cast<double>(a.matches) / c.size(), rc = static_cast<double>(a.matches) / r.size();
  const double f = 10 * p * rc / (9 * p + rc);
  return f * (1 - 0.5 * std::pow(static_cast<double>(a.chunks) / a.matches, 3));
}

inline double oracle_densecap(const std::vector<PredictionRecord>& preds, const std::vector<GroundTruthRegion>& gts,
                       const ThresholdGrid& grid, std::vector<std::vector<double>>* cells = nullptr) {
  std::vector<std::size_t> all(preds.size());
  std::iota(all.begin(), all.end(), 0);
  const auto ranked = ranked_indices(preds, all);
  double total = 0;
  if (cells) cells->assign(grid.iou.size(), std::vector<double>(grid.meteor.size()));
  for (std::size_t a = 0; a < grid.iou.size(); ++a)
    for (std::size_t b = 0; b < grid.meteor.size(); ++b) {
      auto overlap = [&](std::size_t pi, std::size_t gi) { return iou(preds[pi].box, gts[gi].box); };
      auto ok = [&](std::size_t pi, std::size_t gi) {
        return preds[pi].image_id == gts[gi].image_id && overlap(pi, gi) >= grid.iou[a] &&
               oracle_meteor(words(preds[pi].text), words(gts[gi].text)) >= grid.meteor[b];
      };
      const double ap = oracle_ap(oracle_match(ranked, gts.size(), ok, overlap), gts.size());
      if (cells) (*cells)[a][b] = ap;
      total += ap;
    }
  return total / (grid.iou.size() * grid.meteor.size());
}

inline const std::vector<std::string> kWords = {"a", "red", "blue", "circle", "square", "left", "of", "the"};

inline std::string random_sentence(std::mt19937_64& rng, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(1, max_len), w(0, kWords.size() - 1);
  std::string s;
  const std::size_t n = len(rng);
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + kWords[w(rng)];
  return s;
}

inline Box jitter(const Box& b, std::mt19937_64& rng, double amount) {
  std::uniform_real_distribution<double> u(-amount, amount);
  Box out{b.x1 + u(rng), b.y1 + u(rng), b.x2 + u(rng), b.y2 + u(rng)};
  if (!out.valid()) return b;
  return out;
}

struct Instance {
  std::vector<PredictionRecord> preds;
  std::vector<GroundTruthRegion> gts;
};

inline Instance random_instance(std::mt19937_64& rng, bool free_text) {
  Instance ins;
  std::uniform_int_distribution<int> count(1, 6), image(0, 1), cls(0, 2), coin(0, 1);
  std::uniform_real_distribution<double> pos(0, 20), size(4, 14);
  const std::vector<std::string> names = {"a", "b", "zzz"};
  const int ng = count(rng);
  for (int i = 0; i < ng; ++i) {
    const double x = pos(rng), y = pos(rng);
    ins.gts.push_back({image(rng), {x, y, x + size(rng), y + size(rng)},
                       free_text ? random_sentence(rng, 5) : names[cls(rng) % 2]});
  }
  std::uniform_int_distribution<int> npred(0, 6);
  const int np = npred(rng);
  for (int i = 0; i < np; ++i) {
    PredictionRecord p;
    if (coin(rng)) {
      const auto& g = ins.gts[std::uniform_int_distribution<int>(0, ng - 1)(rng)];
      p.image_id = g.image_id;
      p.box = jitter(g.box, rng, 3.0);
      p.text = free_text ? (coin(rng) ? g.text : random_sentence(rng, 5)) : g.text;
    } else {
      const double x = pos(rng), y = pos(rng);
      p.image_id = image(rng);
      p.box = {x, y, x + size(rng), y + size(rng)};
      p.text = free_text ? random_sentence(rng, 5) : names[cls(rng)];
    }
    // Coarse scores so that ties occur.
    p.score = std::round(std::uniform_real_distribution<double>(0, 1)(rng) * 5) / 5;
    ins.preds.push_back(p);
  }
  return ins;
}

}  // namespace r2t::oracle
