#include "r2t/extractor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "r2t/errors.hpp"
#include "r2t/ops.hpp"

namespace r2t {

namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

std::size_t level_index(Level l) { return static_cast<std::size_t>(l); }

// Columns [begin, end) of a [H, W, 3] head map flattened to [H*W, end-begin].
Tensor head_channels(const Tensor& map, std::size_t begin, std::size_t end) {
  const std::size_t n = map.dim(0) * map.dim(1);
  return ops::slice(ops::reshape(map, {n, 3}), 1, begin, end);
}

}  // namespace

void ExtractorConfig::validate() const {
  if (train_proposals == 0 || test_proposals == 0) throw ConfigError("extractor: proposal count k must be positive");
  if (roi_side == 0 || fc_dim == 0 || head_hidden == 0 || rois_per_image == 0) {
    throw ConfigError("extractor: sizes must be positive");
  }
  if (!(positive_fraction > 0 && positive_fraction <= 1)) throw ConfigError("extractor: positive_fraction in (0, 1]");
  if (!(soft_nms_sigma > 0)) throw ConfigError("extractor: soft_nms_sigma must be positive");
}

Level level_for_box(const Box& box, double base) {
  const double s = std::sqrt(std::max(box.area(), 1e-12));
  const double k = std::floor(std::log2(s / base)) + 1.0;
  return static_cast<Level>(static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(kNumLevels - 1))));
}

std::optional<Tensor> roi_crop(const Tensor& feat, const Box& box, std::size_t out, double stride, ImageSize image) {
  if (out == 0) throw ContractViolation("roi_crop: output side must be >= 1");
  const Box b = clip(box, image.width, image.height);
  if (!b.valid() || b.area() < 1.0) return std::nullopt;
  Tensor crop = ops::roi_align(feat, {{b.x1 / stride, b.y1 / stride, b.x2 / stride, b.y2 / stride}}, out);
  return ops::reshape(crop, {out, out, feat.dim(2)});
}

Tensor crop_regions(const FeaturePyramid& pyr, const std::vector<Box>& boxes, std::size_t out, double level_base) {
  if (boxes.empty()) throw ContractViolation("crop_regions: no boxes");
  std::array<std::vector<std::size_t>, kNumLevels> groups;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (!boxes[i].valid()) throw ContractViolation("crop_regions: invalid box");
    groups[level_index(level_for_box(boxes[i], level_base))].push_back(i);
  }
  std::vector<Tensor> parts;
  std::vector<std::size_t> order;  // input index of each stacked row
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    if (groups[l].empty()) continue;
    const double s = pyr.strides[l];
    std::vector<ops::FeatBox> fb;
    for (auto i : groups[l]) {
      const Box& b = boxes[i];
      fb.push_back({b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s});
      order.push_back(i);
    }
    parts.push_back(ops::roi_align(pyr.levels[l], fb, out));
  }
  Tensor stacked = parts.size() == 1 ? parts[0] : ops::concat(parts, 0);
  const std::size_t c = stacked.dim(3);
  stacked = ops::reshape(stacked, {boxes.size(), out * out, c});
  std::vector<std::size_t> inverse(boxes.size());
  for (std::size_t row = 0; row < order.size(); ++row) inverse[order[row]] = row;
  bool identity = true;
  for (std::size_t i = 0; i < inverse.size(); ++i) identity = identity && inverse[i] == i;
  return identity ? stacked : ops::gather_rows(stacked, inverse);
}

std::vector<ForegroundObject> nms(std::vector<ForegroundObject> objs, double iou_thresh) {
  std::vector<std::size_t> order(objs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return objs[a].objectness > objs[b].objectness; });
  std::vector<ForegroundObject> kept;
  for (auto i : order) {
    bool suppressed = false;
    for (const auto& k : kept) suppressed = suppressed || iou(k.box, objs[i].box) > iou_thresh;
    if (!suppressed) kept.push_back(objs[i]);
  }
  return kept;
}

std::vector<ForegroundObject> soft_nms(std::vector<ForegroundObject> objs, double sigma, double floor) {
  std::vector<ForegroundObject> kept;
  while (!objs.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < objs.size(); ++i) {
      if (objs[i].objectness > objs[best].objectness) best = i;
    }
    ForegroundObject top = objs[best];
    objs.erase(objs.begin() + static_cast<std::ptrdiff_t>(best));
    std::vector<ForegroundObject> rest;
    for (auto& o : objs) {
      const double ov = iou(top.box, o.box);
      o.objectness *= std::exp(-ov * ov / sigma);
      if (o.objectness >= floor) rest.push_back(o);
    }
    kept.push_back(top);
    objs = std::move(rest);
  }
  return kept;
}

std::vector<std::optional<std::size_t>> assign_targets(const std::vector<Box>& boxes, const std::vector<Box>& gts,
                                                       std::size_t stage,
                                                       const std::array<double, kCascadeStages>& thresholds) {
  if (stage >= kCascadeStages) throw ContractViolation("assign_targets: stage must be in {0, 1, 2}");
  std::vector<std::optional<std::size_t>> out(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(boxes[i], gts[g]);
      if (v > best) {
        best = v;
        arg = g;
      }
    }
    if (!gts.empty() && best >= thresholds[stage]) out[i] = arg;
  }
  return out;
}

const std::array<DeltaWeights, kCascadeStages>& cascade_delta_weights() {
  static const std::array<DeltaWeights, kCascadeStages> w = {
      DeltaWeights{0.1, 0.1, 0.2, 0.2}, DeltaWeights{0.05, 0.05, 0.1, 0.1},
      DeltaWeights{1.0 / 30, 1.0 / 30, 1.0 / 15, 1.0 / 15}};
  return w;
}

RegionExtractor::RegionExtractor(const ExtractorConfig& cfg, std::size_t channels, nn::Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  head_fc1_ = nn::Linear::make(channels, cfg_.head_hidden, rng);
  head_fc2_ = nn::Linear::make(cfg_.head_hidden, 3, rng);
  // Heatmap prior of 0.1 and a size prior of ~3 cells.
  auto b = head_fc2_.bias.mutable_data();
  b[0] = -std::log((1 - 0.1) / 0.1);
  b[1] = b[2] = std::log(3.0);
  const std::size_t in = cfg_.roi_side * cfg_.roi_side * channels;
  for (auto& s : stages_) {
    s.fc1 = nn::Linear::make(in, cfg_.fc_dim, rng);
    s.fc2 = nn::Linear::make(cfg_.fc_dim, cfg_.fc_dim, rng);
    s.cls = nn::Linear::make(cfg_.fc_dim, 1, rng);
    s.box = nn::Linear::make(cfg_.fc_dim, 4, rng);
    for (auto& w : s.box.weight.mutable_data()) w *= 0.1;
  }
}

HeadMaps RegionExtractor::heads(const FeaturePyramid& pyr) const {
  HeadMaps maps;
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    const Tensor& f = pyr.levels[l];
    const std::size_t h = f.dim(0), w = f.dim(1);
    Tensor x = ops::reshape(f, {h * w, f.dim(2)});
    maps[l] = ops::reshape(head_fc2_(ops::gelu(head_fc1_(x))), {h, w, 3});
  }
  return maps;
}

std::vector<Proposal> RegionExtractor::generate_proposals(const HeadMaps& maps, const FeaturePyramid& pyr,
                                                          std::size_t k, ImageSize image) const {
  if (k == 0) throw ConfigError("generate_proposals: k must be positive");
  struct Peak {
    double score;
    std::size_t level, index;
  };
  std::vector<Peak> peaks;
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    const Tensor& m = maps[l];
    const std::size_t h = m.dim(0), w = m.dim(1);
    const auto v = m.data();
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double c = v[(i * w + j) * 3];
        bool peak = true;
        for (std::size_t y = i > 0 ? i - 1 : 0; y <= std::min(i + 1, h - 1) && peak; ++y) {
          for (std::size_t x = j > 0 ? j - 1 : 0; x <= std::min(j + 1, w - 1); ++x) {
            if (v[(y * w + x) * 3] > c) {
              peak = false;
              break;
            }
          }
        }
        if (peak) peaks.push_back({sigmoid(c), l, i * w + j});
      }
    }
  }
  std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.score > b.score; });
  std::vector<Proposal> out;
  for (const auto& p : peaks) {
    if (out.size() == k) break;
    const Tensor& m = maps[p.level];
    const std::size_t w = m.dim(1);
    const double s = pyr.strides[p.level];
    const double cx = (static_cast<double>(p.index % w) + 0.5) * s;
    const double cy = (static_cast<double>(p.index / w) + 0.5) * s;
    const double bw = s * std::exp(std::clamp(m.data()[p.index * 3 + 1], -5.0, 5.0));
    const double bh = s * std::exp(std::clamp(m.data()[p.index * 3 + 2], -5.0, 5.0));
    Box b = clip(Box{cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh}, image.width, image.height);
    if (!b.valid() || b.area() < 1.0) continue;
    out.push_back({b, p.score, static_cast<Level>(p.level)});
  }
  return out;
}

std::pair<Tensor, Tensor> RegionExtractor::run_stage(std::size_t stage, const FeaturePyramid& pyr,
                                                     const std::vector<Box>& boxes) const {
  const Stage& s = stages_[stage];
  Tensor crops = crop_regions(pyr, boxes, cfg_.roi_side, cfg_.level_base);
  Tensor x = ops::reshape(crops, {boxes.size(), crops.dim(1) * crops.dim(2)});
  Tensor h = ops::gelu(s.fc2(ops::gelu(s.fc1(x))));
  return {s.cls(h), s.box(h)};
}

namespace {

std::vector<Box> refine(const std::vector<Box>& boxes, const Tensor& deltas, const DeltaWeights& w, ImageSize image) {
  std::vector<Box> out(boxes.size());
  const auto d = deltas.data();
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    Box b = clip(decode_deltas({d[i * 4], d[i * 4 + 1], d[i * 4 + 2], d[i * 4 + 3]}, boxes[i], w), image.width,
                 image.height);
    out[i] = (b.valid() && b.area() >= 1.0) ? b : boxes[i];
  }
  return out;
}

}  // namespace

std::vector<ForegroundObject> RegionExtractor::cascade_refine(const std::vector<Proposal>& proposals,
                                                              const FeaturePyramid& pyr, ImageSize image) const {
  if (proposals.empty()) throw ContractViolation("cascade_refine: no proposals");
  std::vector<Box> boxes;
  for (const auto& p : proposals) boxes.push_back(p.box);
  std::vector<ForegroundObject> objs(boxes.size());
  for (std::size_t t = 0; t < kCascadeStages; ++t) {
    auto [logits, deltas] = run_stage(t, pyr, boxes);
    for (std::size_t i = 0; i < boxes.size(); ++i) objs[i].stage_scores[t] = sigmoid(logits.data()[i]);
    boxes = refine(boxes, deltas, cascade_delta_weights()[t], image);
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    objs[i].box = boxes[i];
    double s = 0;
    for (double p : objs[i].stage_scores) s += p;
    objs[i].objectness = s / static_cast<double>(kCascadeStages);
  }
  return objs;
}

std::vector<ForegroundObject> RegionExtractor::detect(const FeaturePyramid& pyr, ImageSize image) const {
  NoGradScope no_grad;
  HeadMaps maps = heads(pyr);
  auto proposals = generate_proposals(maps, pyr, cfg_.test_proposals, image);
  if (proposals.empty()) return {};
  auto objs = soft_nms(cascade_refine(proposals, pyr, image), cfg_.soft_nms_sigma, cfg_.soft_nms_floor);
  std::vector<ForegroundObject> out;
  for (const auto& o : objs) {
    if (o.objectness < cfg_.min_objectness || out.size() == cfg_.max_detections) break;
    out.push_back(o);
  }
  return out;
}

ExtractorLosses RegionExtractor::losses(const FeaturePyramid& pyr, const std::vector<Box>& gts, ImageSize image,
                                        nn::Rng& rng, const std::vector<Box>* proposals) const {
  ExtractorLosses out;
  HeadMaps maps = heads(pyr);
  const double norm = std::max<double>(1.0, static_cast<double>(gts.size()));

  // Proposal heatmap and size regression.
  std::array<std::vector<double>, kNumLevels> heat;
  std::array<std::vector<std::size_t>, kNumLevels> centers;
  std::array<std::vector<double>, kNumLevels> size_targets;
  for (std::size_t l = 0; l < kNumLevels; ++l) heat[l].assign(maps[l].dim(0) * maps[l].dim(1), 0.0);
  for (const auto& g : gts) {
    const std::size_t l = level_index(level_for_box(g, cfg_.level_base));
    const double s = pyr.strides[l];
    const std::size_t h = maps[l].dim(0), w = maps[l].dim(1);
    const auto ci = std::min<std::size_t>(static_cast<std::size_t>(g.cy() / s), h - 1);
    const auto cj = std::min<std::size_t>(static_cast<std::size_t>(g.cx() / s), w - 1);
    const double sigma = std::max(0.5, std::sqrt(g.area()) / s / 6.0);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double di = static_cast<double>(i) - static_cast<double>(ci);
        const double dj = static_cast<double>(j) - static_cast<double>(cj);
        const double v = (i == ci && j == cj) ? 1.0 : std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
        heat[l][i * w + j] = std::max(heat[l][i * w + j], v);
      }
    }
    centers[l].push_back(ci * w + cj);
    size_targets[l].push_back(std::log(g.width() / s));
    size_targets[l].push_back(std::log(g.height() / s));
  }
  Tensor heat_loss = Tensor::scalar(0.0);
  Tensor size_loss = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < kNumLevels; ++l) {
    heat_loss = ops::add(heat_loss, ops::heatmap_focal_loss(head_channels(maps[l], 0, 1), heat[l]));
    if (!centers[l].empty()) {
      Tensor pred = ops::gather_rows(head_channels(maps[l], 1, 3), centers[l]);
      Tensor target({centers[l].size(), 2}, size_targets[l]);
      size_loss = ops::add(size_loss, ops::sum(ops::abs(ops::sub(pred, target))));
    }
  }
  out.heatmap = ops::scale(heat_loss, 1.0 / norm);
  out.size = ops::scale(size_loss, 1.0 / norm);

  // RoI sampling from proposals plus ground truth.
  std::vector<Box> candidates;
  if (proposals) {
    candidates = *proposals;
  } else {
    NoGradScope no_grad;
    for (const auto& p : generate_proposals(maps, pyr, cfg_.train_proposals, image)) candidates.push_back(p.box);
  }
  candidates.insert(candidates.end(), gts.begin(), gts.end());
  std::vector<Box> boxes;
  if (candidates.empty()) {
    boxes.push_back(Box{0, 0, image.width, image.height});
  } else {
    auto labels = assign_targets(candidates, gts, 0, cfg_.stage_iou);
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < candidates.size(); ++i) (labels[i] ? pos : neg).push_back(i);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    const std::size_t budget = std::min(cfg_.rois_per_image, candidates.size());
    std::size_t take_pos = std::min(pos.size(), static_cast<std::size_t>(cfg_.positive_fraction * budget));
    std::size_t take_neg = std::min(neg.size(), budget - take_pos);
    take_pos = std::min(pos.size(), budget - take_neg);
    std::vector<std::size_t> chosen(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(take_pos));
    chosen.insert(chosen.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(take_neg));
    std::sort(chosen.begin(), chosen.end());
    for (auto i : chosen) boxes.push_back(candidates[i]);
  }

  std::vector<double> objectness(boxes.size(), 0.0);
  Tensor total = ops::add(out.heatmap, out.size);
  const double r = static_cast<double>(boxes.size());
  for (std::size_t t = 0; t < kCascadeStages; ++t) {
    const auto match = assign_targets(boxes, gts, t, cfg_.stage_iou);
    auto [logits, deltas] = run_stage(t, pyr, boxes);
    std::vector<double> labels(boxes.size());
    std::vector<std::size_t> fg;
    std::vector<double> delta_targets;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      labels[i] = match[i] ? 1.0 : 0.0;
      if (!match[i]) continue;
      fg.push_back(i);
      const auto d = encode_deltas(gts[*match[i]], boxes[i], cascade_delta_weights()[t]);
      delta_targets.insert(delta_targets.end(), d.begin(), d.end());
    }
    out.cls[t] = ops::mean(ops::bce_with_logits(logits, labels));
    if (fg.empty()) {
      out.box[t] = Tensor::scalar(0.0);
    } else {
      Tensor pred = ops::gather_rows(deltas, fg);
      Tensor target({fg.size(), 4}, delta_targets);
      out.box[t] = ops::scale(ops::sum(ops::smooth_l1(ops::sub(pred, target), 1.0)), 1.0 / r);
    }
    total = ops::add(total, ops::add(out.cls[t], out.box[t]));
    for (std::size_t i = 0; i < boxes.size(); ++i) objectness[i] += sigmoid(logits.data()[i]) / kCascadeStages;
    boxes = refine(boxes, deltas, cascade_delta_weights()[t], image);
  }
  out.total = total;
  out.final_boxes = boxes;
  out.final_match = assign_targets(boxes, gts, kCascadeStages - 1, cfg_.stage_iou);
  out.final_objectness = std::move(objectness);
  return out;
}

void RegionExtractor::visit(const std::string& prefix, const nn::ParamVisitor& f) {
  head_fc1_.visit(prefix + ".proposal_head.fc1", f);
  head_fc2_.visit(prefix + ".proposal_head.fc2", f);
  for (std::size_t t = 0; t < kCascadeStages; ++t) {
    const std::string p = prefix + ".stage" + std::to_string(t);
    stages_[t].fc1.visit(p + ".fc1", f);
    stages_[t].fc2.visit(p + ".fc2", f);
    stages_[t].cls.visit(p + ".cls", f);
    stages_[t].box.visit(p + ".box", f);
  }
}

}  // namespace r2t
