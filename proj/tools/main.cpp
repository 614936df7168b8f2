#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cbvit/cli.hpp"

namespace {

// Remaining "--dotted.key value" tokens become config overrides.
int collect_overrides(const std::vector<std::string>& extras, cbvit::cli::CommonArgs& args) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string key = extras[i];
    if (key.rfind("--", 0) != 0) {
      std::cerr << "error: unexpected argument '" << key << "' (overrides look like --cb.site mlp_end)\n";
      return 1;
    }
    key = key.substr(2);
    std::string value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) {
        std::cerr << "error: override --" << key << " is missing a value\n";
        return 1;
      }
      value = extras[++i];
    }
    if (!cbvit::is_known_key(key)) {
      std::cerr << "error: unknown config key '" << key << "'\n";
      return 1;
    }
    args.overrides.emplace_back(key, value);
  }
  return 0;
}

void add_common(CLI::App* cmd, cbvit::cli::CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "config file (flat key = value lines)");
  cmd->add_option("--seed", args.seed, "override the run seed");
  cmd->add_option("--out", args.out_dir, "output directory (default $CBVIT_OUT/<command>)");
  cmd->add_option("--threads", args.threads,
                  "worker threads; 0 = strict single-threaded deterministic mode");
  cmd->allow_extras();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cbvit: a desk-scale vision-transformer laboratory for context broadcasting "
               "and attention-density diagnostics"};
  app.require_subcommand(1);

  cbvit::cli::CommonArgs args;

  auto* train = app.add_subcommand("train", "train one model and write metrics + checkpoint");
  add_common(train, args);

  auto* sweep = app.add_subcommand("sweep", "train one run per axis value, emit a comparison CSV");
  std::string axis = "site";
  sweep->add_option("--axis", axis, "site|block|layers|aggregation|heads|extra_block")
      ->required();
  add_common(sweep, args);

  auto* analyze = app.add_subcommand("analyze", "density diagnostics for trained checkpoints");
  cbvit::cli::AnalyzeArgs what;
  analyze->add_option("--checkpoint", what.checkpoints, "checkpoint stem (repeatable)")
      ->required();
  analyze->add_option("--dataset", what.dataset, "dataset file (.cbds)")->required();
  add_common(analyze, args);

  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference and softmax-maximality verification");
  add_common(gradcheck, args);

  auto* make_dataset = app.add_subcommand("make-dataset", "generate a synthetic dataset file");
  add_common(make_dataset, args);

  CLI11_PARSE(app, argc, argv);

  CLI::App* sub = app.get_subcommands().front();
  if (collect_overrides(sub->remaining(), args) != 0) return 1;

  if (sub == train) return cbvit::cli::cmd_train(args);
  if (sub == sweep) return cbvit::cli::cmd_sweep(args, axis);
  if (sub == analyze) return cbvit::cli::cmd_analyze(args, what);
  if (sub == gradcheck) return cbvit::cli::cmd_gradcheck(args);
  if (sub == make_dataset) return cbvit::cli::cmd_make_dataset(args);
  return 1;
}
