#pragma once

#include <array>
#include <optional>
#include <vector>

#include "r2t/box.hpp"
#include "r2t/encoder.hpp"
#include "r2t/nn.hpp"

namespace r2t {

inline constexpr std::size_t kCascadeStages = 3;

struct ExtractorConfig {
  std::size_t train_proposals = 256;
  std::size_t test_proposals = 64;
  std::size_t head_hidden = 32;
  std::size_t roi_side = 4;
  std::size_t fc_dim = 64;
  std::size_t rois_per_image = 32;
  double positive_fraction = 0.5;
  std::array<double, kCascadeStages> stage_iou = {0.5, 0.6, 0.7};
  double level_base = 16.0;  // sqrt(area) at which boxes map to P_base
  double soft_nms_sigma = 0.5;
  double soft_nms_floor = 0.001;
  double min_objectness = 0.05;
  std::size_t max_detections = 20;

  void validate() const;
};

struct Proposal {
  Box box;
  double score = 0;
  Level level = Level::kBase;
};

struct ForegroundObject {
  Box box;
  double objectness = 0;
  std::array<double, kCascadeStages> stage_scores{};
};

struct ImageSize {
  double width = 0;
  double height = 0;
};

// Pyramid level for a box by sqrt(area): floor(log2(sqrt(area)/base)) + 1,
// clamped to [P_hi, P_low3].
Level level_for_box(const Box& box, double base);

// Bilinear crop of one box from a [H, W, C] map with the given stride.
// nullopt when the box is degenerate (area < 1 px^2) after clipping.
std::optional<Tensor> roi_crop(const Tensor& feat, const Box& box, std::size_t out, double stride,
                               ImageSize image);

// Crops every box from its level-by-area map: [R, out*out, C] in input order.
// Boxes must be valid (clip first).
Tensor crop_regions(const FeaturePyramid& pyr, const std::vector<Box>& boxes, std::size_t out, double level_base);

// Greedy by descending score; drops others with IoU > thresh.
std::vector<ForegroundObject> nms(std::vector<ForegroundObject> objs, double iou_thresh);
// Gaussian rescoring score *= exp(-IoU^2 / sigma), then drops scores < floor.
std::vector<ForegroundObject> soft_nms(std::vector<ForegroundObject> objs, double sigma, double floor);

// Matched ground-truth index if max IoU >= stage threshold, else nullopt.
// Ties go to the lowest ground-truth index.
std::vector<std::optional<std::size_t>> assign_targets(const std::vector<Box>& boxes, const std::vector<Box>& gts,
                                                       std::size_t stage,
                                                       const std::array<double, kCascadeStages>& thresholds = {0.5, 0.6,
                                                                                                              0.7});

const std::array<DeltaWeights, kCascadeStages>& cascade_delta_weights();

// Per-level proposal-head outputs: [H, W, 3] = (heat logit, log w/stride, log h/stride).
using HeadMaps = std::array<Tensor, kNumLevels>;

struct ExtractorLosses {
  Tensor total;
  Tensor heatmap;
  Tensor size;
  std::array<Tensor, kCascadeStages> cls;
  std::array<Tensor, kCascadeStages> box;
  // Final-stage refined boxes of the sampled RoIs, their final-stage match and objectness.
  std::vector<Box> final_boxes;
  std::vector<std::optional<std::size_t>> final_match;
  std::vector<double> final_objectness;
};

class RegionExtractor {
 public:
  RegionExtractor(const ExtractorConfig& cfg, std::size_t channels, nn::Rng& rng);

  const ExtractorConfig& config() const { return cfg_; }

  HeadMaps heads(const FeaturePyramid& pyr) const;
  // Top-k local maxima (3x3) of the sigmoid heatmap across all levels.
  std::vector<Proposal> generate_proposals(const HeadMaps& maps, const FeaturePyramid& pyr, std::size_t k,
                                           ImageSize image) const;
  std::vector<ForegroundObject> cascade_refine(const std::vector<Proposal>& proposals, const FeaturePyramid& pyr,
                                               ImageSize image) const;
  // proposals -> cascade -> soft-NMS -> objectness floor -> top max_detections.
  std::vector<ForegroundObject> detect(const FeaturePyramid& pyr, ImageSize image) const;

  // Heatmap focal + size L1 + per-stage binary CE + per-stage smooth-L1.
  // RoIs are sampled from `proposals` when given, else from the heatmap peaks.
  ExtractorLosses losses(const FeaturePyramid& pyr, const std::vector<Box>& gts, ImageSize image, nn::Rng& rng,
                         const std::vector<Box>* proposals = nullptr) const;

  void visit(const std::string& prefix, const nn::ParamVisitor& f);

 private:
  struct Stage {
    nn::Linear fc1, fc2, cls, box;
  };
  // Stage forward on boxes: (fg logits [R,1], deltas [R,4]).
  std::pair<Tensor, Tensor> run_stage(std::size_t stage, const FeaturePyramid& pyr, const std::vector<Box>& boxes) const;

  ExtractorConfig cfg_;
  nn::Linear head_fc1_, head_fc2_;
  std::array<Stage, kCascadeStages> stages_;
};

}  // namespace r2t
