#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "r2t/config.hpp"
#include "r2t/model.hpp"
#include "r2t/synthetic.hpp"

namespace r2t {

struct TrainLogEntry {
  std::size_t step = 0;  // 1-based
  double total = 0;      // means over the steps since the previous entry
  double objects = 0;
  double text = 0;
  double lr = 0;
};

struct TrainSummary {
  std::vector<double> step_loss;  // batch-mean total loss per step
  std::vector<TrainLogEntry> log;
};

struct TrainHooks {
  std::function<void(const TrainLogEntry&)> on_log;
  // Called with the parameters still at their last finite state before the
  // run aborts on a non-finite loss; returns where they were saved.
  std::function<std::string(std::size_t step)> on_abort;
};

// Vocabulary over every annotation text of the dataset.
text::Vocabulary vocab_for(const data::Dataset& ds, const TrainConfig& cfg);

// Learning rate at 1-based step: linear warmup, then cosine decay to 0.
double learning_rate(const TrainConfig& cfg, std::size_t step);

// Regions of one image visible at `step` under the unlock schedule, with a
// task drawn per region from task_mix.
std::vector<TextRegion> training_regions(const data::Dataset& ds, std::int64_t image_id, const TrainConfig& cfg,
                                         std::size_t step, const text::Vocabulary& vocab, nn::Rng& rng);

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const TrainConfig& cfg);
  // Clips by global norm, then one decoupled-decay Adam update.
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<bool> decay_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_, clip_;
  std::size_t t_ = 0;
};

TrainSummary train_model(Model& model, const data::Dataset& ds, const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace r2t
