// r2t: data generation, training, inference, evaluation and rendering.
// Exit codes: 0 ok, 1 contract/config violation, 2 I/O or integrity error.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "json.hpp"
#include "r2t/checkpoint.hpp"
#include "r2t/errors.hpp"
#include "r2t/grad_suite.hpp"
#include "r2t/harness.hpp"
#include "r2t/trainer.hpp"

namespace fs = std::filesystem;
using namespace r2t;
using nlohmann::json;

namespace {

// A directory argument means <dir>/<default_name>.
std::string dataset_path(const std::string& arg, const char* default_name) {
  if (fs::is_directory(arg)) return (fs::path(arg) / default_name).string();
  return arg;
}

void make_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
}

std::size_t resolve_task(const std::string& arg, const text::Vocabulary& vocab) {
  for (std::size_t t = 1; t <= vocab.num_tasks(); ++t) {
    const auto& name = vocab.token(vocab.task(t));
    if (arg == std::to_string(t) || arg == name || "[" + arg + "]" == name) return t;
  }
  std::string valid;
  for (std::size_t t = 1; t <= vocab.num_tasks(); ++t) {
    valid += (t > 1 ? ", " : "") + std::to_string(t) + " " + vocab.token(vocab.task(t));
  }
  throw ConfigError("unknown task '" + arg + "'; valid ids: " + valid);
}

int gen_data(std::uint64_t seed, std::size_t n, const std::string& out) {
  if (n == 0) throw ContractViolation("--n must be >= 1");
  make_dir(out);
  const auto train = data::generate_dataset(seed, n, "train");
  const auto val = data::generate_dataset(seed, std::max<std::size_t>(1, n / 10), "val");
  data::save_dataset(train, (fs::path(out) / "train.json").string());
  data::save_dataset(val, (fs::path(out) / "val.json").string());
  std::cout << "wrote " << train.images.size() << " train and " << val.images.size() << " val images to " << out
            << "\n";
  return 0;
}

int train(const std::string& config, const std::string& data_arg, const std::string& out) {
  const RunConfig rc = load_run_config(config);
  const auto ds = data::load_dataset(dataset_path(data_arg, "train.json"));
  make_dir(out);
  const auto vocab = vocab_for(ds, rc.train);
  Model model(rc.model, vocab, rc.train.seed);

  std::ofstream log((fs::path(out) / "train_log.ndjson").string(), std::ios::trunc);
  if (!log) throw IoError("cannot write the training log in " + out);
  const auto t0 = std::chrono::steady_clock::now();
  TrainHooks hooks;
  hooks.on_log = [&](const TrainLogEntry& e) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json j{{"step", e.step}, {"loss", e.total}, {"object_loss", e.objects}, {"text_loss", e.text},
           {"lr", e.lr},     {"seconds", secs}};
    log << j.dump() << "\n" << std::flush;
    std::cout << "step " << e.step << "  loss " << e.total << "  obj " << e.objects << "  text " << e.text << std::endl;
  };
  hooks.on_abort = [&](std::size_t) {
    const std::string path = (fs::path(out) / "last_good.ckpt").string();
    save_checkpoint(model, rc.train, path);
    return path;
  };
  train_model(model, ds, rc.train, hooks);
  const std::string ckpt = (fs::path(out) / "model.ckpt").string();
  save_checkpoint(model, rc.train, ckpt);
  std::cout << "saved " << ckpt << "\n";
  return 0;
}

int infer(const std::string& ckpt, const std::string& data_arg, const std::string& task_arg, std::size_t beam,
          const std::string& out) {
  auto loaded = load_checkpoint(ckpt);
  const std::size_t task = resolve_task(task_arg, loaded.model->vocab());
  const auto ds = data::load_dataset(dataset_path(data_arg, "val.json"));
  const auto preds = harness::predict(*loaded.model, ds, task, beam);
  harness::write_predictions(preds, out);
  std::cout << "wrote " << preds.size() << " records for " << ds.images.size() << " images to " << out << "\n";
  return 0;
}

int eval(const std::string& preds_path, const std::string& gts_path, const std::string& metric) {
  const auto preds = harness::read_predictions(preds_path);
  const auto gts = data::load_dataset(dataset_path(gts_path, "val.json"));
  json j;
  if (metric == "det") {
    const auto r = metrics::detection_ap(preds, harness::ground_truth(gts, data::kTaskDetection),
                                         harness::class_names(gts));
    j = {{"AP", r.ap}, {"AP50", r.ap50}, {"AP75", r.ap75}, {"AR1", r.ar1}, {"AR10", r.ar10},
         {"classes", r.evaluated_classes}};
  } else {
    const auto r = metrics::densecap_map(preds, harness::ground_truth(gts, data::kTaskCaption));
    j = {{"mAP", r.map}, {"cell_ap", r.cell_ap}};
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

int render(const std::string& preds_path, const std::string& data_arg, const std::string& out, double threshold) {
  const auto preds = harness::read_predictions(preds_path);
  const auto ds = data::load_dataset(dataset_path(data_arg, "val.json"));
  const auto report = harness::render(preds, ds, out, threshold);
  std::cout << "wrote " << report.written.size() << " SVG files to " << out << "\n";
  if (!report.skipped.empty()) {
    std::cerr << "skipped predictions for unknown image ids:";
    for (auto id : report.skipped) std::cerr << " " << id;
    std::cerr << "\n";
  }
  return 0;
}

int grad_check(std::size_t seeds, double tol) {
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  auto note = [&](const GradResult& r) {
    if (!worst.count(r.kind)) order.push_back(r.kind);
    worst[r.kind] = std::max(worst[r.kind], r.max_rel_error);
  };
  for (std::size_t s = 1; s <= seeds; ++s) {
    for (const auto& r : primitive_grad_suite(s)) note(r);
    for (const auto& r : composed_grad_suite(s)) note(r);
  }
  bool ok = true;
  for (const auto& k : order) {
    const bool pass = worst[k] < tol;
    ok = ok && pass;
    std::printf("%-28s %.3e  %s\n", k.c_str(), worst[k], pass ? "ok" : "FAIL");
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"region-to-text toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::string out, config, data_arg, ckpt, task = "1", preds, gts, metric;
  std::size_t beam = 1, seeds = 20;
  double threshold = 0.5, tol = 1e-4;

  auto* gen = app.add_subcommand("gen-data", "generate synthetic train/val datasets");
  gen->add_option("--seed", seed, "generator seed")->required();
  gen->add_option("--n", n, "number of training images")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config, "JSON run config")->required();
  tr->add_option("--data", data_arg, "dataset file or directory holding train.json")->required();
  tr->add_option("--out", out, "output directory")->required();

  auto* inf = app.add_subcommand("infer", "write predictions for a dataset");
  inf->add_option("--ckpt", ckpt, "checkpoint file")->required();
  inf->add_option("--data", data_arg, "dataset file or directory holding val.json")->required();
  inf->add_option("--task", task, "task id or begin-token name");
  inf->add_option("--beam", beam, "candidates per box");
  inf->add_option("--out", out, "predictions file (NDJSON)")->required();

  auto* ev = app.add_subcommand("eval", "score predictions");
  ev->add_option("--preds", preds, "predictions file")->required();
  ev->add_option("--gts", gts, "dataset file or directory holding val.json")->required();
  ev->add_option("--metric", metric, "det or densecap")->required()->check(CLI::IsMember({"det", "densecap"}));

  auto* rd = app.add_subcommand("render", "draw predictions as SVG");
  rd->add_option("--preds", preds, "predictions file")->required();
  rd->add_option("--data", data_arg, "dataset file or directory holding val.json")->required();
  rd->add_option("--out", out, "output directory")->required();
  rd->add_option("--threshold", threshold, "minimum score to draw");

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient suite");
  gc->add_option("--seeds", seeds, "random seeds per check");
  gc->add_option("--tol", tol, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return gen_data(seed, n, out);
    if (*tr) return train(config, data_arg, out);
    if (*inf) return infer(ckpt, data_arg, task, beam, out);
    if (*ev) return eval(preds, gts, metric);
    if (*rd) return render(preds, data_arg, out, threshold);
    if (*gc) return grad_check(seeds, tol);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
