#include "r2t/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "r2t/errors.hpp"
#include "r2t/tokenizer.hpp"

namespace r2t::metrics {

double coco_iou_threshold(std::size_t i) { return 0.5 + 0.05 * static_cast<double>(i); }

double interpolated_ap(const std::vector<bool>& tp, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  const std::size_t n = tp.size();
  std::vector<double> precision(n), recall(n);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    hits += tp[i] ? 1 : 0;
    precision[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(hits) / static_cast<double>(num_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0;
  std::size_t k = 0;
  for (std::size_t r = 0; r <= 100; ++r) {
    const double level = static_cast<double>(r) / 100.0;
    while (k < n && recall[k] < level) ++k;
    if (k < n) total += precision[k];
  }
  return total / 101.0;
}

namespace {

// Stable descending-score order of the given prediction indices.
std::vector<std::size_t> by_score(const std::vector<PredictionRecord>& preds, std::vector<std::size_t> idx) {
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  return idx;
}

struct Candidate {
  std::size_t gt;
  double iou;
  double meteor;
};

// Greedy matching in rank order: each prediction takes the unmatched
// eligible ground truth of highest IoU (lowest index on ties).
template <typename Eligible>
std::vector<bool> greedy_match(const std::vector<std::size_t>& ranked,
                               const std::vector<std::vector<Candidate>>& candidates, std::size_t num_gt,
                               Eligible eligible) {
  std::vector<bool> used(num_gt, false), tp(ranked.size(), false);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    double best = -1;
    std::size_t arg = 0;
    for (const auto& c : candidates[ranked[r]]) {
      if (used[c.gt] || !eligible(c)) continue;
      if (c.iou > best || (c.iou == best && c.gt < arg)) {
        best = c.iou;
        arg = c.gt;
      }
    }
    if (best >= 0) {
      used[arg] = true;
      tp[r] = true;
    }
  }
  return tp;
}

std::vector<std::vector<Candidate>> pair_up(const std::vector<PredictionRecord>& preds,
                                            const std::vector<std::size_t>& pred_idx,
                                            const std::vector<GroundTruthRegion>& gts,
                                            const std::vector<std::size_t>& gt_idx, bool with_meteor) {
  std::map<std::int64_t, std::vector<std::size_t>> by_image;  // local gt positions
  for (std::size_t g = 0; g < gt_idx.size(); ++g) by_image[gts[gt_idx[g]].image_id].push_back(g);
  std::vector<std::vector<std::string>> gt_words;
  if (with_meteor) {
    for (auto g : gt_idx) gt_words.push_back(words(gts[g].text));
  }
  std::vector<std::vector<Candidate>> out(preds.size());
  for (auto p : pred_idx) {
    auto it = by_image.find(preds[p].image_id);
    if (it == by_image.end()) continue;
    const auto pw = with_meteor ? words(preds[p].text) : std::vector<std::string>{};
    for (auto g : it->second) {
      const double v = iou(preds[p].box, gts[gt_idx[g]].box);
      out[p].push_back({g, v, with_meteor ? meteor_tokens(pw, gt_words[g]) : 0.0});
    }
  }
  return out;
}

}  // namespace

DetectionResult detection_ap(const std::vector<PredictionRecord>& preds, const std::vector<GroundTruthRegion>& gts,
                             const std::vector<std::string>& classes) {
  DetectionResult res;
  std::vector<double> ap(kNumIouThresholds, 0.0), ar1(kNumIouThresholds, 0.0), ar10(kNumIouThresholds, 0.0);
  for (const auto& cls : classes) {
    std::vector<std::size_t> p_idx, g_idx;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i].text == cls) p_idx.push_back(i);
    }
    for (std::size_t i = 0; i < gts.size(); ++i) {
      if (gts[i].text == cls) g_idx.push_back(i);
    }
    if (g_idx.empty()) continue;
    res.evaluated_classes.push_back(cls);
    const auto cands = pair_up(preds, p_idx, gts, g_idx, false);
    const auto ranked = by_score(preds, p_idx);

    // Top-n per image for AR@n, keeping rank order.
    auto top_n = [&](std::size_t n) {
      std::map<std::int64_t, std::size_t> seen;
      std::vector<std::size_t> kept;
      for (auto p : ranked) {
        if (seen[preds[p].image_id]++ < n) kept.push_back(p);
      }
      return kept;
    };
    const auto top1 = top_n(1), top10 = top_n(10);
    auto recall = [&](const std::vector<std::size_t>& r, double t) {
      auto tp = greedy_match(r, cands, g_idx.size(), [t](const Candidate& c) { return c.iou >= t; });
      return static_cast<double>(std::count(tp.begin(), tp.end(), true)) / static_cast<double>(g_idx.size());
    };
    for (std::size_t t = 0; t < kNumIouThresholds; ++t) {
      const double thr = coco_iou_threshold(t);
      auto tp = greedy_match(ranked, cands, g_idx.size(), [thr](const Candidate& c) { return c.iou >= thr; });
      ap[t] += interpolated_ap(tp, g_idx.size());
      ar1[t] += recall(top1, thr);
      ar10[t] += recall(top10, thr);
    }
  }
  const double nc = static_cast<double>(res.evaluated_classes.size());
  if (nc == 0) return res;
  for (std::size_t t = 0; t < kNumIouThresholds; ++t) {
    res.ap += ap[t] / nc;
    res.ar1 += ar1[t] / nc;
    res.ar10 += ar10[t] / nc;
  }
  res.ap /= kNumIouThresholds;
  res.ar1 /= kNumIouThresholds;
  res.ar10 /= kNumIouThresholds;
  res.ap50 = ap[0] / nc;
  res.ap75 = ap[5] / nc;
  return res;
}

std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  const std::string norm = text::normalize(text);
  std::size_t start = 0;
  while (start < norm.size()) {
    std::size_t end = norm.find(' ', start);
    if (end == std::string::npos) end = norm.size();
    if (end > start) out.push_back(norm.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

namespace {

struct AlignSearch {
  const std::vector<std::string>& cand;
  const std::vector<std::string>& ref;
  std::unordered_map<std::string, std::size_t> skips_left;
  std::vector<bool> ref_used;
  std::vector<long> cand_to_ref;
  std::size_t best_chunks;

  void run(std::size_t i, std::size_t chunks) {
    if (chunks >= best_chunks) return;
    if (i == cand.size()) {
      best_chunks = chunks;
      return;
    }
    const auto& w = cand[i];
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (ref_used[j] || ref[j] != w) continue;
      const bool extends = i > 0 && j > 0 && cand_to_ref[i - 1] == static_cast<long>(j - 1);
      ref_used[j] = true;
      cand_to_ref[i] = static_cast<long>(j);
      run(i + 1, chunks + (extends ? 0 : 1));
      ref_used[j] = false;
      cand_to_ref[i] = -1;
    }
    auto it = skips_left.find(w);
    if (it != skips_left.end() && it->second > 0) {
      --it->second;
      run(i + 1, chunks);
      ++it->second;
    }
  }
};

}  // namespace

MeteorAlignment meteor_align(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  std::unordered_map<std::string, std::size_t> cc, rc;
  for (const auto& w : candidate) ++cc[w];
  for (const auto& w : reference) ++rc[w];
  MeteorAlignment out;
  AlignSearch s{candidate, reference, {}, std::vector<bool>(reference.size(), false),
                std::vector<long>(candidate.size(), -1), 0};
  for (const auto& [w, n] : cc) {
    const std::size_t r = rc.count(w) ? rc[w] : 0;
    out.matches += std::min(n, r);
    s.skips_left[w] = n - std::min(n, r);
  }
  if (out.matches == 0) return out;
  s.best_chunks = out.matches + 1;
  s.run(0, 0);
  out.chunks = s.best_chunks;
  return out;
}

double meteor_tokens(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const auto a = meteor_align(candidate, reference);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double f = p * r / (0.9 * p + 0.1 * r);
  const double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
  return f * (1.0 - penalty);
}

double meteor(std::string_view candidate, std::string_view reference) {
  return meteor_tokens(words(candidate), words(reference));
}

DensecapResult densecap_map(const std::vector<PredictionRecord>& preds, const std::vector<GroundTruthRegion>& gts,
                            const ThresholdGrid& grid) {
  if (grid.iou.empty() || grid.meteor.empty()) throw ConfigError("densecap_map: empty threshold grid");
  DensecapResult res;
  res.cell_ap.assign(grid.iou.size(), std::vector<double>(grid.meteor.size(), 0.0));
  std::vector<std::size_t> p_idx(preds.size()), g_idx(gts.size());
  std::iota(p_idx.begin(), p_idx.end(), 0);
  std::iota(g_idx.begin(), g_idx.end(), 0);
  const auto cands = pair_up(preds, p_idx, gts, g_idx, true);
  const auto ranked = by_score(preds, p_idx);
  double total = 0;
  for (std::size_t a = 0; a < grid.iou.size(); ++a) {
    for (std::size_t b = 0; b < grid.meteor.size(); ++b) {
      const double ti = grid.iou[a], tm = grid.meteor[b];
      auto tp = greedy_match(ranked, cands, gts.size(),
                             [ti, tm](const Candidate& c) { return c.iou >= ti && c.meteor >= tm; });
      res.cell_ap[a][b] = interpolated_ap(tp, gts.size());
      total += res.cell_ap[a][b];
    }
  }
  res.map = total / static_cast<double>(grid.iou.size() * grid.meteor.size());
  return res;
}

}  // namespace r2t::metrics
