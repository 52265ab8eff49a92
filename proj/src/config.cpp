#include "r2t/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "r2t/errors.hpp"

namespace r2t {

using nlohmann::json;

void ModelConfig::validate() const {
  encoder.validate();
  extractor.validate();
  decoder.validate();
}

void TrainConfig::validate() const {
  if (iterations < 1) throw ConfigError("train.iterations must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("train.lr must be positive");
  if (weight_decay < 0 || grad_clip < 0) throw ConfigError("train.weight_decay and grad_clip must be >= 0");
  if (task_mix.empty()) throw ConfigError("train.task_mix must name at least one task");
  double s = 0;
  for (double r : task_mix) {
    if (r < 0) throw ConfigError("train.task_mix entries must be >= 0");
    s += r;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ConfigError("train.task_mix must sum to 1");
  if (!(jitter_min > 0 && jitter_max >= jitter_min)) throw ConfigError("train.jitter range invalid");
  if (max_text_regions < 1) throw ConfigError("train.max_text_regions must be >= 1");
  if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
  for (const auto& u : unlock) {
    if (u.iteration >= iterations) throw ConfigError("train.unlock iteration beyond the run");
  }
}

void to_json(json& j, const UnlockStep& u) { j = json{{"iteration", u.iteration}, {"classes", u.classes}}; }
void from_json(const json& j, UnlockStep& u) {
  for (const auto& [k, v] : j.items()) {
    if (k != "iteration" && k != "classes") throw ConfigError("unknown field train.unlock[]." + k);
  }
  j.at("iteration").get_to(u.iteration);
  j.at("classes").get_to(u.classes);
}

namespace {

template <typename F>
void encoder_fields(EncoderConfig& c, F&& f) {
  f("patch_size", c.patch_size);
  f("embed_dim", c.embed_dim);
  f("depth", c.depth);
  f("heads", c.heads);
  f("window", c.window);
  f("global_blocks", c.global_blocks);
  f("mlp_ratio", c.mlp_ratio);
  f("pyramid_channels", c.pyramid_channels);
}

template <typename F>
void extractor_fields(ExtractorConfig& c, F&& f) {
  f("train_proposals", c.train_proposals);
  f("test_proposals", c.test_proposals);
  f("head_hidden", c.head_hidden);
  f("roi_side", c.roi_side);
  f("fc_dim", c.fc_dim);
  f("rois_per_image", c.rois_per_image);
  f("positive_fraction", c.positive_fraction);
  f("stage_iou", c.stage_iou);
  f("level_base", c.level_base);
  f("soft_nms_sigma", c.soft_nms_sigma);
  f("soft_nms_floor", c.soft_nms_floor);
  f("min_objectness", c.min_objectness);
  f("max_detections", c.max_detections);
}

template <typename F>
void decoder_fields(DecoderConfig& c, F&& f) {
  f("layers", c.layers);
  f("dim", c.dim);
  f("heads", c.heads);
  f("mlp_ratio", c.mlp_ratio);
  f("max_tokens", c.max_tokens);
  f("crop_side", c.crop_side);
  f("label_smoothing", c.label_smoothing);
}

template <typename F>
void train_fields(TrainConfig& c, F&& f) {
  f("seed", c.seed);
  f("data_seed", c.data_seed);
  f("iterations", c.iterations);
  f("batch_size", c.batch_size);
  f("lr", c.lr);
  f("cosine", c.cosine);
  f("warmup", c.warmup);
  f("weight_decay", c.weight_decay);
  f("grad_clip", c.grad_clip);
  f("object_loss_weight", c.object_loss_weight);
  f("text_loss_weight", c.text_loss_weight);
  f("task_mix", c.task_mix);
  f("single_task_token", c.single_task_token);
  f("unlock", c.unlock);
  f("gt_text_regions", c.gt_text_regions);
  f("max_text_regions", c.max_text_regions);
  f("scale_jitter", c.scale_jitter);
  f("jitter_min", c.jitter_min);
  f("jitter_max", c.jitter_max);
  f("vocab_size", c.vocab_size);
  f("log_every", c.log_every);
}

template <typename Cfg, typename Fields>
json dump(Cfg c, Fields fields) {
  json j = json::object();
  fields(c, [&](const char* name, auto& v) { j[name] = v; });
  return j;
}

template <typename Cfg, typename Fields>
void load(const json& j, const std::string& section, Cfg& c, Fields fields) {
  if (!j.is_object()) throw ConfigError(section + " must be an object");
  std::set<std::string> known;
  fields(c, [&](const char* name, auto& v) {
    known.insert(name);
    if (!j.contains(name)) return;
    try {
      j.at(name).get_to(v);
    } catch (const json::exception& e) {
      throw ConfigError(section + "." + name + ": " + e.what());
    }
  });
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown field " + section + "." + k);
  }
}

json model_json(ModelConfig c) {
  return json{{"encoder", dump(c.encoder, [](auto& x, auto&& f) { encoder_fields(x, f); })},
              {"extractor", dump(c.extractor, [](auto& x, auto&& f) { extractor_fields(x, f); })},
              {"decoder", dump(c.decoder, [](auto& x, auto&& f) { decoder_fields(x, f); })}};
}

json parse(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

RunConfig run_config_from_json(std::string_view text) {
  const json j = parse(text);
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig rc;
  for (const auto& [k, v] : j.items()) {
    if (k == "encoder") {
      load(v, k, rc.model.encoder, [](auto& x, auto&& f) { encoder_fields(x, f); });
    } else if (k == "extractor") {
      load(v, k, rc.model.extractor, [](auto& x, auto&& f) { extractor_fields(x, f); });
    } else if (k == "decoder") {
      load(v, k, rc.model.decoder, [](auto& x, auto&& f) { decoder_fields(x, f); });
    } else if (k == "train") {
      load(v, k, rc.train, [](auto& x, auto&& f) { train_fields(x, f); });
    } else {
      throw ConfigError("unknown config section " + k);
    }
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return run_config_from_json(ss.str());
}

std::string model_config_to_json(const ModelConfig& cfg) { return model_json(cfg).dump(); }

ModelConfig model_config_from_json(std::string_view text) {
  const json j = parse(text);
  ModelConfig c;
  load(j.at("encoder"), "encoder", c.encoder, [](auto& x, auto&& f) { encoder_fields(x, f); });
  load(j.at("extractor"), "extractor", c.extractor, [](auto& x, auto&& f) { extractor_fields(x, f); });
  load(j.at("decoder"), "decoder", c.decoder, [](auto& x, auto&& f) { decoder_fields(x, f); });
  return c;
}

std::string train_config_to_json(const TrainConfig& cfg) {
  return dump(cfg, [](auto& x, auto&& f) { train_fields(x, f); }).dump();
}

std::vector<std::string> config_differences(const ModelConfig& a, const ModelConfig& b) {
  const json ja = model_json(a), jb = model_json(b);
  std::vector<std::string> out;
  for (const auto& [section, fields] : ja.items()) {
    for (const auto& [name, value] : fields.items()) {
      if (jb.at(section).at(name) != value) out.push_back(section + "." + name);
    }
  }
  return out;
}

}  // namespace r2t
