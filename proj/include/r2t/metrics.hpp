#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "r2t/box.hpp"

namespace r2t::metrics {

struct PredictionRecord {
  std::int64_t image_id = 0;
  Box box;
  std::string text;
  double score = 0;
  std::size_t task = 1;
};

struct GroundTruthRegion {
  std::int64_t image_id = 0;
  Box box;
  std::string text;
};

inline constexpr std::size_t kNumIouThresholds = 10;  // 0.50:0.05:0.95
double coco_iou_threshold(std::size_t i);

struct DetectionResult {
  double ap = 0, ap50 = 0, ap75 = 0, ar1 = 0, ar10 = 0;
  std::vector<std::string> evaluated_classes;  // classes with at least one ground truth
};

// Class-aware COCO-style evaluation. Predictions whose text is not in
// `classes` are dropped; classes without ground truth are left out of the
// mean. AR@n keeps the n best detections per image and class.
DetectionResult detection_ap(const std::vector<PredictionRecord>& preds, const std::vector<GroundTruthRegion>& gts,
                             const std::vector<std::string>& classes);

// 101-point interpolated AP from true-positive flags in descending score order.
double interpolated_ap(const std::vector<bool>& tp_in_rank_order, std::size_t num_gt);

// Exact-match METEOR (alpha 0.9, beta 3, gamma 0.5).
struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};
MeteorAlignment meteor_align(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);
double meteor(std::string_view candidate, std::string_view reference);
double meteor_tokens(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);
std::vector<std::string> words(std::string_view text);

struct ThresholdGrid {
  std::vector<double> iou = {0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<double> meteor = {0.0, 0.05, 0.1, 0.15, 0.2, 0.25};
};

struct DensecapResult {
  double map = 0;
  std::vector<std::vector<double>> cell_ap;  // [iou][meteor]
};

DensecapResult densecap_map(const std::vector<PredictionRecord>& preds, const std::vector<GroundTruthRegion>& gts,
                            const ThresholdGrid& grid = {});

}  // namespace r2t::metrics
