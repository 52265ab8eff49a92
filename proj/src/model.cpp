#include "r2t/model.hpp"

#include <algorithm>

#include "r2t/errors.hpp"
#include "r2t/ops.hpp"

namespace r2t {

namespace {

const ModelConfig& checked(const ModelConfig& cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

Model::Model(const ModelConfig& cfg, const text::Vocabulary& vocab, std::uint64_t seed)
    : cfg_(checked(cfg)),
      init_rng_(seed),
      encoder_(cfg_.encoder, init_rng_),
      extractor_(cfg_.extractor, cfg_.encoder.pyramid_channels, init_rng_),
      decoder_(cfg_.decoder, vocab, cfg_.encoder.pyramid_channels, init_rng_) {}

ModelLosses Model::losses(const Tensor& image, const std::vector<TextRegion>& regions, nn::Rng& rng,
                          const LossOptions& opt) const {
  const ImageSize size{static_cast<double>(image.dim(1)), static_cast<double>(image.dim(0))};
  FeaturePyramid pyr = encoder_.encode(image);
  std::vector<Box> gts;
  for (const auto& r : regions) gts.push_back(r.box);
  ExtractorLosses ext = extractor_.losses(pyr, gts, size, rng);

  ModelLosses out;
  out.objects = ext.total.item();
  out.total = opt.object_weight == 1.0 ? ext.total : ops::scale(ext.total, opt.object_weight);
  if (opt.text_weight == 0.0 || regions.empty()) return out;

  // (box, region) pairs for the text loss.
  std::vector<std::pair<Box, std::size_t>> picks;
  if (opt.gt_text_regions) {
    for (std::size_t i = 0; i < regions.size() && picks.size() < opt.max_text_regions; ++i) {
      picks.emplace_back(regions[i].box, i);
    }
  }
  std::vector<std::size_t> matched;
  for (std::size_t i = 0; i < ext.final_boxes.size(); ++i) {
    if (ext.final_match[i]) matched.push_back(i);
  }
  std::shuffle(matched.begin(), matched.end(), rng);
  for (auto i : matched) {
    if (picks.size() >= opt.max_text_regions) break;
    picks.emplace_back(ext.final_boxes[i], *ext.final_match[i]);
  }
  if (picks.empty()) return out;

  std::vector<Box> boxes;
  std::vector<std::vector<text::TokenId>> targets;
  std::vector<std::size_t> tasks;
  for (const auto& [box, idx] : picks) {
    boxes.push_back(box);
    targets.push_back(regions[idx].tokens);
    tasks.push_back(regions[idx].task_id);
  }
  Tensor objs = decoder_.project_objects(
      crop_regions(pyr, boxes, cfg_.decoder.crop_side, cfg_.extractor.level_base));
  Tensor lm = decoder_.lm_loss_batch(objs, targets, tasks);
  out.text = lm.item();
  out.text_regions = picks.size();
  out.total = ops::add(out.total, opt.text_weight == 1.0 ? lm : ops::scale(lm, opt.text_weight));
  return out;
}

std::vector<DetectedObject> Model::infer(const Tensor& image, std::size_t task_id, std::size_t beam) const {
  const auto& vocab = decoder_.vocab();
  if (task_id < 1 || task_id > vocab.num_tasks()) {
    std::string valid;
    for (std::size_t t = 1; t <= vocab.num_tasks(); ++t) {
      valid += (t > 1 ? ", " : "") + std::to_string(t) + " " + vocab.token(vocab.task(t));
    }
    throw ConfigError("unknown task id " + std::to_string(task_id) + "; valid ids: " + valid);
  }
  if (beam == 0) throw ConfigError("beam size must be >= 1");
  NoGradScope no_grad;
  const ImageSize size{static_cast<double>(image.dim(1)), static_cast<double>(image.dim(0))};
  FeaturePyramid pyr = encoder_.encode(image);
  auto dets = extractor_.detect(pyr, size);
  if (dets.empty()) return {};
  std::vector<Box> boxes;
  for (const auto& d : dets) boxes.push_back(d.box);
  Tensor objs = decoder_.project_objects(
      crop_regions(pyr, boxes, cfg_.decoder.crop_side, cfg_.extractor.level_base));
  auto cands = decoder_.generate_branch_first_batch(objs, task_id, beam);
  std::vector<DetectedObject> out;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    DetectedObject o;
    o.box = dets[i].box;
    o.objectness = dets[i].objectness;
    o.task_id = task_id;
    o.candidates = std::move(cands[i]);
    for (const auto& c : o.candidates) o.final_scores.push_back(score_object(o.objectness, c));
    out.push_back(std::move(o));
  }
  return out;
}

void Model::visit(const nn::ParamVisitor& f) {
  encoder_.visit("encoder", f);
  extractor_.visit("extractor", f);
  decoder_.visit("decoder", f);
}

std::vector<Tensor> Model::parameters() {
  std::vector<Tensor> out;
  visit([&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

std::vector<metrics::PredictionRecord> to_records(std::int64_t image_id, const std::vector<DetectedObject>& objs,
                                                  const text::Vocabulary& vocab) {
  std::vector<metrics::PredictionRecord> out;
  for (const auto& o : objs) {
    for (std::size_t j = 0; j < o.candidates.size(); ++j) {
      out.push_back({image_id, o.box, text::decode(o.candidates[j].token_ids, vocab), o.final_scores[j], o.task_id});
    }
  }
  return out;
}

}  // namespace r2t
