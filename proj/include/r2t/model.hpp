#pragma once

#include <vector>

#include "r2t/config.hpp"
#include "r2t/decoder.hpp"
#include "r2t/encoder.hpp"
#include "r2t/extractor.hpp"
#include "r2t/metrics.hpp"
#include "r2t/tokenizer.hpp"

namespace r2t {

// A ground-truth region with the text and begin token it is trained on.
struct TextRegion {
  Box box;
  std::vector<text::TokenId> tokens;
  std::size_t task_id = 1;
};

struct ModelLosses {
  Tensor total;
  double objects = 0;
  double text = 0;
  std::size_t text_regions = 0;
};

struct LossOptions {
  double object_weight = 1.0;
  double text_weight = 1.0;
  bool gt_text_regions = true;
  std::size_t max_text_regions = 8;
};

class Model {
 public:
  Model(const ModelConfig& cfg, const text::Vocabulary& vocab, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const text::Vocabulary& vocab() const { return decoder_.vocab(); }

  VisualEncoder& encoder() { return encoder_; }
  const RegionExtractor& extractor() const { return extractor_; }
  const TextDecoder& decoder() const { return decoder_; }

  // L = w_o * L_o + w_t * L_t for one image. The text loss runs on
  // final-stage boxes matched to a region (taking that region's text) and,
  // optionally, on the region boxes themselves.
  ModelLosses losses(const Tensor& image, const std::vector<TextRegion>& regions, nn::Rng& rng,
                     const LossOptions& opt = {}) const;

  // encode -> proposals -> cascade -> soft-NMS -> crop -> branch-first decode.
  std::vector<DetectedObject> infer(const Tensor& image, std::size_t task_id, std::size_t beam) const;

  // Stable, sorted-by-construction parameter names.
  void visit(const nn::ParamVisitor& f);
  std::vector<Tensor> parameters();

 private:
  ModelConfig cfg_;
  nn::Rng init_rng_;
  VisualEncoder encoder_;
  RegionExtractor extractor_;
  TextDecoder decoder_;
};

// One record per (box, candidate), text decoded from the candidate tokens.
std::vector<metrics::PredictionRecord> to_records(std::int64_t image_id, const std::vector<DetectedObject>& objs,
                                                  const text::Vocabulary& vocab);

}  // namespace r2t
