#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cbvit/checkpoint.hpp"
#include "cbvit/cli.hpp"
#include "cbvit/util.hpp"

using namespace cbvit;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "cbvit_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// micro run: depth 2, dim 16, 60 images, 1 epoch
cli::CommonArgs micro_args(const fs::path& out) {
  cli::CommonArgs args;
  args.out_dir = out.string();
  args.seed = 7;
  args.overrides = {{"model.depth", "2"},   {"model.dim", "16"},      {"model.heads", "2"},
                    {"data.n", "60"},       {"train.epochs", "1"},    {"train.batch_size", "30"},
                    {"train.base_lr", "0.001"}};
  return args;
}

std::string slurp(const fs::path& p) {
  const auto bytes = read_file_bytes(p);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace

TEST_CASE("config file parsing") {
  const auto dir = fresh_dir("config");
  const auto path = dir / "good.cfg";
  write_text_file(path, "# comment\nmodel.dim = 32\n\ncb.variant = cb  # trailing comment\n");
  const auto cfg = load_config_file(path);
  CHECK(cfg.at("model.dim") == "32");
  CHECK(cfg.at("cb.variant") == "cb");

  // missing file: message names the path
  try {
    load_config_file(dir / "missing.cfg");
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("missing.cfg") != std::string::npos);
  }

  // unknown key: named, never silently ignored
  write_text_file(dir / "bad.cfg", "model.dimension = 32\n");
  try {
    load_config_file(dir / "bad.cfg");
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("model.dimension") != std::string::npos);
  }

  // bad enum values name the key and the candidates
  write_text_file(dir / "enum.cfg", "cb.site = middle\n");
  const auto cfg2 = resolve_config(load_config_file(dir / "enum.cfg"), {});
  CHECK_THROWS_WITH_AS(make_model_config(cfg2), doctest::Contains("mlp_mid"), std::runtime_error);

  // unknown override key
  CHECK_THROWS_AS(resolve_config({}, {{"nope.key", "1"}}), std::runtime_error);
}

TEST_CASE("layer mask parsing") {
  CHECK(parse_layer_mask("all", 4) == std::set<int>{0, 1, 2, 3});
  CHECK(parse_layer_mask("upper_half", 4) == std::set<int>{2, 3});
  CHECK(parse_layer_mask("lower_half", 4) == std::set<int>{0, 1});
  CHECK(parse_layer_mask("none", 4).empty());
  CHECK(parse_layer_mask("0,2", 4) == std::set<int>{0, 2});
  CHECK_THROWS_AS(parse_layer_mask("5", 4), std::runtime_error);
  CHECK_THROWS_AS(parse_layer_mask("x", 4), std::runtime_error);
}

TEST_CASE("cmd_train: artifacts, manifest echo, deterministic rerun") {
  const auto out1 = fresh_dir("train1");
  auto args = micro_args(out1);
  args.overrides.emplace_back("cb.variant", "cb");
  args.overrides.emplace_back("cb.site", "mlp_end");
  REQUIRE(cli::cmd_train(args) == 0);

  CHECK(fs::exists(out1 / "metrics.csv"));
  CHECK(fs::exists(out1 / "checkpoint.json"));
  CHECK(fs::exists(out1 / "checkpoint.bin"));
  CHECK(fs::exists(out1 / "manifest.json"));
  CHECK(fs::exists(out1 / "config.resolved"));

  // the manifest snapshot records the placement override
  const std::string manifest = slurp(out1 / "manifest.json");
  CHECK(manifest.find("\"cb.site\": \"mlp_end\"") != std::string::npos);
  CHECK(manifest.find("\"cb.variant\": \"cb\"") != std::string::npos);

  // identical rerun: identical artifact checksums
  const auto out2 = fresh_dir("train2");
  auto args2 = micro_args(out2);
  args2.overrides.emplace_back("cb.variant", "cb");
  args2.overrides.emplace_back("cb.site", "mlp_end");
  REQUIRE(cli::cmd_train(args2) == 0);
  CHECK(file_checksum(out1 / "metrics.csv") == file_checksum(out2 / "metrics.csv"));
  CHECK(file_checksum(out1 / "checkpoint.bin") == file_checksum(out2 / "checkpoint.bin"));

  // rerun from the resolved snapshot alone
  const auto out3 = fresh_dir("train3");
  cli::CommonArgs from_snapshot;
  from_snapshot.config_path = (out1 / "config.resolved").string();
  from_snapshot.out_dir = out3.string();
  REQUIRE(cli::cmd_train(from_snapshot) == 0);
  CHECK(file_checksum(out1 / "metrics.csv") == file_checksum(out3 / "metrics.csv"));
  CHECK(file_checksum(out1 / "checkpoint.bin") == file_checksum(out3 / "checkpoint.bin"));

  // the input config file is never mutated
  const auto cfg_path = fresh_dir("cfgkeep") / "base.cfg";
  write_text_file(cfg_path, "model.dim = 16\nmodel.depth = 2\nmodel.heads = 2\ndata.n = 60\n"
                            "train.epochs = 1\ntrain.batch_size = 30\n");
  const std::string before = slurp(cfg_path);
  cli::CommonArgs args3;
  args3.config_path = cfg_path.string();
  args3.out_dir = fresh_dir("train4").string();
  args3.overrides = {{"train.base_lr", "0.002"}};
  REQUIRE(cli::cmd_train(args3) == 0);
  CHECK(slurp(cfg_path) == before);

  // missing config file: nonzero exit
  cli::CommonArgs missing;
  missing.config_path = "/nonexistent/absent.cfg";
  missing.out_dir = fresh_dir("train5").string();
  CHECK(cli::cmd_train(missing) != 0);
}

TEST_CASE("cmd_sweep: one row per axis value, all columns populated") {
  const auto out = fresh_dir("sweep");
  auto args = micro_args(out);
  args.overrides.emplace_back("cb.variant", "cb");
  REQUIRE(cli::cmd_sweep(args, "site") == 0);

  const std::string csv = slurp(out / "sweep.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line ==
        "axis,value,final_train_loss,top1,entropy_lower_half,entropy_upper_half,mid_end_logit_gap");
  int rows = 0;
  double gap = -1.0;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    ++rows;
    // every declared column populated
    int commas = 0;
    for (char c : line) commas += c == ',';
    CHECK(commas == 6);
    CHECK(line.find(",,") == std::string::npos);
    const auto last = line.rfind(',');
    gap = std::stod(line.substr(last + 1));
  }
  CHECK(rows == 3);
  // Mid/End shared-weight logit discrepancy (float training, double probe)
  CHECK(gap < 1e-5);
  CHECK(fs::exists(out / "site=mlp_front" / "metrics.csv"));
  CHECK(fs::exists(out / "site=mlp_mid" / "metrics.csv"));
  CHECK(fs::exists(out / "site=mlp_end" / "metrics.csv"));

  // dim-divisibility violation is rejected before any training
  const auto out2 = fresh_dir("sweep_bad");
  auto bad = micro_args(out2);
  bad.overrides.emplace_back("sweep.heads", "3");
  CHECK(cli::cmd_sweep(bad, "heads") != 0);
  CHECK(!fs::exists(out2 / "sweep.csv"));
  CHECK(!fs::exists(out2 / "heads=3" / "metrics.csv"));

  CHECK(cli::cmd_sweep(micro_args(fresh_dir("sweep_ax")), "bogus") != 0);
}

TEST_CASE("cmd_analyze: profiles, alignment, scaling fallback") {
  const auto out = fresh_dir("analyze");

  // zero-initialized model: uniform attention everywhere
  ModelConfig mc;
  mc.image_size = 32;
  mc.patch_size = 8;
  mc.depth = 2;
  mc.dim = 16;
  mc.heads = 2;
  mc.num_classes = 3;
  Model<double> zero(mc, 1);
  for (auto& p : zero.params())
    if (p.name != "input_norm.std") p.value.zero();
  zero.param("input_norm.std").value.fill(1.0);
  save_checkpoint(zero, out / "zero");

  Model<double> other(mc, 2);
  save_checkpoint(other, out / "other");

  const auto ds = make_synthetic_dataset(3, 40, 32, 3);
  save_dataset(ds, out / "data.cbds");

  cli::CommonArgs args;
  args.out_dir = out.string();
  args.overrides = {{"analyze.exclude_last_layers", "0"}};
  cli::AnalyzeArgs what;
  what.checkpoints = {(out / "zero").string(), (out / "other").string()};
  what.dataset = (out / "data.cbds").string();
  REQUIRE(cli::cmd_analyze(args, what) == 0);

  const std::string csv = slurp(out / "analysis.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "model_tag,layer,mean_entropy,max_entropy_bound,relative_distance,lambda_ratio,"
                "lambda_mean");
  int zero_rows = 0, other_rows = 0, na_rows = 0;
  const double ln_n = std::log(17.0);
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    if (line.find("not applicable") != std::string::npos) {
      ++na_rows;
      continue;
    }
    std::istringstream cells(line);
    std::string tag, layer, entropy;
    std::getline(cells, tag, ',');
    std::getline(cells, layer, ',');
    std::getline(cells, entropy, ',');
    if (tag.ends_with("/zero")) {
      ++zero_rows;
      CHECK(std::abs(std::stod(entropy) - ln_n) < 1e-6);  // uniform attention
    } else {
      ++other_rows;
    }
  }
  CHECK(zero_rows == 2);   // aligned by layer, one block per model
  CHECK(other_rows == 2);
  CHECK(na_rows == 2);     // neither checkpoint carries CB_S scaling weights
  CHECK(fs::exists(out / "jacobian.csv"));

  // checkpoint/dataset geometry mismatch is an error
  const auto small = make_synthetic_dataset(5, 10, 16, 3);
  save_dataset(small, out / "small.cbds");
  what.dataset = (out / "small.cbds").string();
  CHECK(cli::cmd_analyze(args, what) != 0);
}

TEST_CASE("cmd_gradcheck: tiny default passes, oversized configs are refused") {
  cli::CommonArgs args;
  args.out_dir = fresh_dir("gradcheck").string();
  args.seed = 5;
  args.overrides = {{"gradcheck.coords", "4"}, {"gradcheck.trials", "500"}};
  CHECK(cli::cmd_gradcheck(args) == 0);

  // the default model config is way over the 50k parameter cap
  const auto cfg_path = fresh_dir("gradcheck_big") / "big.cfg";
  write_text_file(cfg_path, "model.dim = 64\n");
  cli::CommonArgs big;
  big.config_path = cfg_path.string();
  big.out_dir = fresh_dir("gradcheck_big_out").string();
  CHECK(cli::cmd_gradcheck(big) != 0);
}

TEST_CASE("CBVIT_OUT is the default output root") {
  const auto root = fresh_dir("envroot");
  setenv("CBVIT_OUT", root.string().c_str(), 1);
  cli::CommonArgs args;  // no --out
  const auto dir = cli::resolve_out_dir(args, "train");
  unsetenv("CBVIT_OUT");
  CHECK(dir == root / "train");
  CHECK(fs::exists(dir));
}

TEST_CASE("cbvit binary: exit codes and error text") {
  const auto out = fresh_dir("binary");
  const std::string bin = CBVIT_BIN_PATH;
  const std::string log = (out / "stderr.txt").string();

  // missing config file mentions the path and exits nonzero
  const int rc = std::system(
      (bin + " train --config /nonexistent/gone.cfg --out " + out.string() + " 2> " + log).c_str());
  CHECK(rc != 0);
  CHECK(slurp(log).find("/nonexistent/gone.cfg") != std::string::npos);

  // unknown override key is rejected by name
  const int rc2 = std::system(
      (bin + " train --not.a.key 3 --out " + out.string() + " 2> " + log).c_str());
  CHECK(rc2 != 0);
  CHECK(slurp(log).find("not.a.key") != std::string::npos);

  // no subcommand
  CHECK(std::system((bin + " > /dev/null 2>&1").c_str()) != 0);
}
