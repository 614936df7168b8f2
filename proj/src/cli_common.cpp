#include <cstdlib>
#include <fstream>

#include <json.hpp>

#include "cbvit/checkpoint.hpp"
#include "cbvit/cli.hpp"
#include "cbvit/dataset.hpp"
#include "cbvit/train.hpp"
#include "cbvit/util.hpp"

namespace cbvit::cli {

namespace fs = std::filesystem;

ConfigMap resolve(const CommonArgs& args) {
  ConfigMap file_values;
  if (!args.config_path.empty()) file_values = load_config_file(args.config_path);
  auto overrides = args.overrides;
  if (args.seed) overrides.emplace_back("seed", std::to_string(*args.seed));
  return resolve_config(std::move(file_values), overrides);
}

fs::path resolve_out_dir(const CommonArgs& args, const std::string& command) {
  fs::path dir;
  if (!args.out_dir.empty()) {
    dir = args.out_dir;
  } else if (const char* env = std::getenv("CBVIT_OUT"); env && *env) {
    dir = fs::path(env) / command;
  } else {
    dir = fs::path("cbvit_out") / command;
  }
  fs::create_directories(dir);
  return dir;
}

void write_manifest(const fs::path& out_dir, const std::string& command, const ConfigMap& cfg,
                    const CommonArgs& args, const std::vector<fs::path>& artifacts) {
  nlohmann::json manifest;
  manifest["command"] = command;
  manifest["seed"] = cfg_u64(cfg, "seed");
  manifest["threads"] = args.threads;
  manifest["out_dir"] = out_dir.string();
  nlohmann::json cfg_json;
  for (const auto& [key, value] : cfg) cfg_json[key] = value;
  manifest["config"] = cfg_json;
  nlohmann::json overrides = nlohmann::json::array();
  for (const auto& [key, value] : args.overrides) overrides.push_back(key + "=" + value);
  manifest["overrides"] = overrides;
  nlohmann::json sums;
  for (const auto& path : artifacts) {
    const auto rel = path.lexically_relative(out_dir);
    sums[rel.empty() ? path.string() : rel.string()] = file_checksum(path);
  }
  manifest["artifacts"] = sums;
  write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  // loadable snapshot; rerunning with --config config.resolved reproduces the run
  write_text_file(out_dir / "config.resolved", config_to_text(cfg));
}

SyntheticDataset obtain_dataset(const ConfigMap& cfg) {
  const std::string& path = cfg_str(cfg, "data.path");
  if (!path.empty()) {
    if (!fs::exists(path)) throw std::runtime_error("dataset file not found: " + path);
    return load_dataset(path);
  }
  std::uint64_t dseed = cfg_u64(cfg, "data.seed");
  if (dseed == 0) dseed = cfg_u64(cfg, "seed") * 0x9e3779b97f4a7c15ull + 0x1234567ull;
  return make_synthetic_dataset(dseed, static_cast<int>(cfg_int(cfg, "data.n")),
                                static_cast<int>(cfg_int(cfg, "model.image_size")),
                                static_cast<int>(cfg_int(cfg, "model.num_classes")),
                                static_cast<int>(cfg_int(cfg, "data.noise")));
}

namespace {

std::string metrics_csv(const std::vector<MetricsRecord>& metrics) {
  if (metrics.empty()) return "epoch,lr,train_loss,top1,top5\n";
  const std::size_t layers = metrics.front().layer_entropy.size();
  std::string text = "epoch,lr,train_loss,top1,top5";
  for (std::size_t l = 0; l < layers; ++l) text += ",entropy_l" + std::to_string(l);
  for (std::size_t l = 0; l < layers; ++l) text += ",distance_l" + std::to_string(l);
  text += "\n";
  for (const MetricsRecord& m : metrics) {
    text += std::to_string(m.epoch) + "," + format_double(m.lr) + "," +
            format_double(m.train_loss) + "," + format_double(m.top1) + "," +
            format_double(m.top5);
    for (double h : m.layer_entropy) text += "," + format_double(h);
    for (double d : m.layer_distance) text += "," + format_double(d);
    text += "\n";
  }
  return text;
}

template <typename T>
RunSummary run_training_typed(const ConfigMap& cfg, const fs::path& out_dir,
                              std::vector<fs::path>& artifacts) {
  const ModelConfig mc = make_model_config(cfg);
  const TrainConfig tc = make_train_config(cfg);
  const SyntheticDataset ds = obtain_dataset(cfg);
  // snapshot first so the run is re-runnable on its own (sweep sub-runs too)
  write_text_file(out_dir / "config.resolved", config_to_text(cfg));
  Model<T> model(mc, tc.seed);
  const TrainOutput out = train(model, tc, ds);

  const fs::path metrics_path = out_dir / "metrics.csv";
  write_text_file(metrics_path, metrics_csv(out.metrics));
  artifacts.push_back(metrics_path);

  const fs::path ckpt = out_dir / "checkpoint";
  save_checkpoint(model, ckpt);
  artifacts.push_back(out_dir / "checkpoint.json");
  artifacts.push_back(out_dir / "checkpoint.bin");

  RunSummary summary;
  if (!out.metrics.empty()) {
    summary.final_loss = out.metrics.back().train_loss;
    summary.top1 = out.metrics.back().top1;
    summary.layer_entropy = out.metrics.back().layer_entropy;
  }
  return summary;
}

}  // namespace

RunSummary run_training(const ConfigMap& cfg, const fs::path& out_dir,
                        std::vector<fs::path>& artifacts) {
  const Precision prec = precision_from(cfg_str(cfg, "train.precision"));
  return prec == Precision::f64 ? run_training_typed<double>(cfg, out_dir, artifacts)
                                : run_training_typed<float>(cfg, out_dir, artifacts);
}

}  // namespace cbvit::cli
