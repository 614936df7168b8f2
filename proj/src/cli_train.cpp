#include <iostream>

#include "cbvit/cli.hpp"
#include "cbvit/util.hpp"

namespace cbvit::cli {

int cmd_train(const CommonArgs& args) {
  try {
    const ConfigMap cfg = resolve(args);
    const auto out_dir = resolve_out_dir(args, "train");
    std::vector<std::filesystem::path> artifacts;
    const RunSummary summary = run_training(cfg, out_dir, artifacts);
    write_manifest(out_dir, "train", cfg, args, artifacts);
    std::cout << "train: final_loss=" << format_double(summary.final_loss)
              << " top1=" << format_double(summary.top1) << " out=" << out_dir.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace cbvit::cli
