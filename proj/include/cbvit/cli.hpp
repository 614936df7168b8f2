#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cbvit/config.hpp"

namespace cbvit::cli {

struct CommonArgs {
  std::string config_path;  // may be empty for commands with usable defaults
  std::optional<std::uint64_t> seed;
  std::string out_dir;  // resolved against CBVIT_OUT when empty
  int threads = 0;      // 0 = strict single-threaded deterministic mode
  std::vector<std::pair<std::string, std::string>> overrides;  // dotted key/value
};

struct AnalyzeArgs {
  std::vector<std::string> checkpoints;  // one or more checkpoint stems
  std::string dataset;                   // .cbds file
};

int cmd_train(const CommonArgs& args);
int cmd_sweep(const CommonArgs& args, const std::string& axis);
int cmd_analyze(const CommonArgs& args, const AnalyzeArgs& what);
int cmd_gradcheck(const CommonArgs& args);
int cmd_make_dataset(const CommonArgs& args);

// shared plumbing -------------------------------------------------------------

// Loads the config file (if given), applies overrides including --seed, and
// returns the fully resolved map.
ConfigMap resolve(const CommonArgs& args);

// Output directory: --out flag, else $CBVIT_OUT/<command>, else ./cbvit_out/<command>.
std::filesystem::path resolve_out_dir(const CommonArgs& args, const std::string& command);

// Writes manifest.json and config.resolved; the pair suffices to re-run the
// command bit-identically in single-threaded mode.
void write_manifest(const std::filesystem::path& out_dir, const std::string& command,
                    const ConfigMap& cfg, const CommonArgs& args,
                    const std::vector<std::filesystem::path>& artifacts);

// Dataset named by data.path, or a freshly generated one when the path is
// empty (data.* keys + model geometry).
SyntheticDataset obtain_dataset(const ConfigMap& cfg);

struct RunSummary {
  double final_loss = 0.0;
  double top1 = 0.0;
  std::vector<double> layer_entropy;  // last epoch
};

// Trains one model per the config in out_dir, writing metrics.csv and a
// checkpoint; shared by cmd_train and cmd_sweep.
RunSummary run_training(const ConfigMap& cfg, const std::filesystem::path& out_dir,
                        std::vector<std::filesystem::path>& artifacts);

}  // namespace cbvit::cli
