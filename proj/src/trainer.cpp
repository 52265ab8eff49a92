#include "r2t/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include "r2t/errors.hpp"
#include "r2t/ops.hpp"

namespace r2t {

text::Vocabulary vocab_for(const data::Dataset& ds, const TrainConfig& cfg) {
  return text::build_vocab(ds.texts(), cfg.vocab_size);
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (step <= cfg.warmup) return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup + 1);
  if (!cfg.cosine) return cfg.lr;
  const double span = static_cast<double>(cfg.iterations - std::min(cfg.warmup, cfg.iterations - 1));
  const double t = static_cast<double>(step - cfg.warmup) / span;
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

std::vector<TextRegion> training_regions(const data::Dataset& ds, std::int64_t image_id, const TrainConfig& cfg,
                                         std::size_t step, const text::Vocabulary& vocab, nn::Rng& rng) {
  std::set<std::string> locked;
  for (const auto& u : cfg.unlock) {
    if (step <= u.iteration) locked.insert(u.classes.begin(), u.classes.end());
  }
  // Annotations sharing a box describe the same region.
  struct Texts {
    Box box;
    std::map<std::size_t, std::string> by_task;
  };
  std::vector<Texts> regions;
  for (const auto& a : ds.annotations) {
    if (a.image_id != image_id) continue;
    auto it = std::find_if(regions.begin(), regions.end(), [&](const Texts& t) { return t.box == a.box; });
    if (it == regions.end()) {
      regions.push_back({a.box, {}});
      it = regions.end() - 1;
    }
    it->by_task[a.task] = a.text;
  }
  std::discrete_distribution<std::size_t> pick(cfg.task_mix.begin(), cfg.task_mix.end());
  std::vector<TextRegion> out;
  for (const auto& r : regions) {
    auto cls = r.by_task.find(data::kTaskDetection);
    if (cls != r.by_task.end() && locked.count(cls->second)) continue;
    const std::size_t want = pick(rng) + 1;
    auto chosen = r.by_task.find(want);
    if (chosen == r.by_task.end()) chosen = r.by_task.begin();
    TextRegion tr;
    tr.box = r.box;
    tr.tokens = text::encode(chosen->second, vocab);
    tr.task_id = cfg.single_task_token ? 1 : chosen->first;
    out.push_back(std::move(tr));
  }
  return out;
}

AdamW::AdamW(std::vector<Tensor> params, const TrainConfig& cfg)
    : params_(std::move(params)), weight_decay_(cfg.weight_decay), clip_(cfg.grad_clip) {
  for (const auto& p : params_) {
    decay_.push_back(p.rank() >= 2);
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamW::step(double lr) {
  ++t_;
  double scale = 1.0;
  if (clip_ > 0) {
    double sq = 0;
    for (const auto& p : params_) {
      if (!p.has_grad()) continue;
      for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_) scale = clip_ / norm;
  }
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    const bool has = params_[i].has_grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = has ? params_[i].grad()[k] * scale : 0.0;
      m[k] = beta1_ * m[k] + (1 - beta1_) * g;
      v[k] = beta2_ * v[k] + (1 - beta2_) * g * g;
      if (decay_[i]) w[k] -= lr * weight_decay_ * w[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

TrainSummary train_model(Model& model, const data::Dataset& ds, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (ds.images.empty()) throw ContractViolation("train: dataset has no images");
  const auto& vocab = model.vocab();
  AdamW opt(model.parameters(), cfg);
  nn::Rng rng(cfg.data_seed);
  LossOptions lopt{cfg.object_loss_weight, cfg.text_loss_weight, cfg.gt_text_regions, cfg.max_text_regions};

  std::vector<std::size_t> order(ds.images.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  TrainSummary summary;
  TrainLogEntry window;
  std::size_t window_steps = 0;
  for (std::size_t step = 1; step <= cfg.iterations; ++step) {
    opt.zero_grad();
    double total = 0, objects = 0, text = 0;
    bool finite = true;
    try {
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        if (cursor == order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        const auto& im = ds.images[order[cursor++]];
        Tensor image = im.tensor();
        auto regions = training_regions(ds, im.id, cfg, step, vocab, rng);
        if (cfg.scale_jitter) {
          std::uniform_real_distribution<double> s(cfg.jitter_min, cfg.jitter_max);
          std::vector<Box> boxes;
          for (const auto& r : regions) boxes.push_back(r.box);
          auto j = data::scale_jitter(image, boxes, s(rng));
          image = j.image;
          std::vector<TextRegion> kept;
          for (std::size_t k = 0; k < j.kept.size(); ++k) {
            kept.push_back(regions[j.kept[k]]);
            kept.back().box = j.boxes[k];
          }
          regions = std::move(kept);
        }
        Tape tape;
        TapeScope scope(tape);
        ModelLosses l = model.losses(image, regions, rng, lopt);
        const double inv = 1.0 / static_cast<double>(cfg.batch_size);
        total += l.total.item() * inv;
        objects += l.objects * inv;
        text += l.text * inv;
        tape.backward(ops::scale(l.total, inv));
      }
    } catch (const NumericDomainError&) {
      finite = false;
    }
    if (!finite || !std::isfinite(total)) {
      std::string where = hooks.on_abort ? hooks.on_abort(step) : std::string("(not saved)");
      throw NumericDomainError("non-finite loss at step " + std::to_string(step) + "; last good checkpoint: " + where);
    }
    const double lr = learning_rate(cfg, step);
    opt.step(lr);
    summary.step_loss.push_back(total);

    window.total += total;
    window.objects += objects;
    window.text += text;
    ++window_steps;
    if (step % cfg.log_every == 0 || step == cfg.iterations) {
      const double n = static_cast<double>(window_steps);
      TrainLogEntry e{step, window.total / n, window.objects / n, window.text / n, lr};
      summary.log.push_back(e);
      if (hooks.on_log) hooks.on_log(e);
      window = {};
      window_steps = 0;
    }
  }
  return summary;
}

}  // namespace r2t
