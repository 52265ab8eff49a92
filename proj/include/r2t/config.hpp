#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "r2t/decoder.hpp"
#include "r2t/encoder.hpp"
#include "r2t/extractor.hpp"

namespace r2t {

struct ModelConfig {
  EncoderConfig encoder;
  ExtractorConfig extractor;
  DecoderConfig decoder;

  void validate() const;
};

struct UnlockStep {
  std::size_t iteration = 0;
  std::vector<std::string> classes;
};

struct TrainConfig {
  std::uint64_t seed = 1;        // parameter init
  std::uint64_t data_seed = 2;   // batch order, jitter, task sampling
  std::size_t iterations = 5000;
  std::size_t batch_size = 2;
  double lr = 1e-3;
  bool cosine = true;
  std::size_t warmup = 100;
  double weight_decay = 0.05;
  double grad_clip = 5.0;  // global norm; 0 disables
  double object_loss_weight = 1.0;
  double text_loss_weight = 1.0;
  std::vector<double> task_mix = {0.5, 0.5};  // per begin token, sums to 1
  bool single_task_token = false;             // every region trained under token 1
  std::vector<UnlockStep> unlock;             // classes hidden until their iteration
  bool gt_text_regions = true;
  std::size_t max_text_regions = 8;
  bool scale_jitter = true;
  double jitter_min = 0.8, jitter_max = 1.25;
  std::size_t vocab_size = 200;
  std::size_t log_every = 10;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

// {"encoder": {...}, "extractor": {...}, "decoder": {...}, "train": {...}};
// every section and field optional, unknown names rejected (ConfigError).
RunConfig run_config_from_json(std::string_view text);
RunConfig load_run_config(const std::string& path);
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(std::string_view text);
std::string train_config_to_json(const TrainConfig& cfg);

// Dotted field names whose values differ, e.g. "decoder.layers".
std::vector<std::string> config_differences(const ModelConfig& a, const ModelConfig& b);

}  // namespace r2t
