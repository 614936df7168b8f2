#include <iostream>
#include <sstream>
#include <thread>

#include "cbvit/checkpoint.hpp"
#include "cbvit/cli.hpp"
#include "cbvit/train.hpp"
#include "cbvit/util.hpp"

namespace cbvit::cli {

namespace fs = std::filesystem;

namespace {

struct AxisPoint {
  std::string value;                                 // axis value for the CSV
  std::vector<std::pair<std::string, std::string>> patch;  // config edits
};

std::vector<AxisPoint> axis_points(const std::string& axis, const ConfigMap& cfg) {
  if (axis == "site")
    return {{"mlp_front", {{"cb.site", "mlp_front"}}},
            {"mlp_mid", {{"cb.site", "mlp_mid"}}},
            {"mlp_end", {{"cb.site", "mlp_end"}}}};
  if (axis == "block")
    return {{"mlp", {{"cb.site", "mlp_end"}}},
            {"msa", {{"cb.site", "msa"}}},
            {"both", {{"cb.site", "both_mlp_msa"}}}};
  if (axis == "layers")
    return {{"all", {{"cb.layers", "all"}}},
            {"upper_half", {{"cb.layers", "upper_half"}}},
            {"lower_half", {{"cb.layers", "lower_half"}}}};
  if (axis == "aggregation")
    return {{"mean", {{"cb.aggregation", "mean"}}},
            {"max", {{"cb.aggregation", "max"}}},
            {"class_token", {{"cb.aggregation", "class_token"}}}};
  if (axis == "extra_block")
    return {{"none", {{"model.extra_block", "none"}}},
            {"msa", {{"model.extra_block", "msa"}}},
            {"mlp", {{"model.extra_block", "mlp"}}}};
  if (axis == "heads") {
    std::vector<AxisPoint> points;
    std::stringstream ss(cfg_str(cfg, "sweep.heads"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      points.push_back({item, {{"model.heads", item}}});
    }
    if (points.empty()) throw std::runtime_error("sweep: sweep.heads lists no values");
    return points;
  }
  throw std::runtime_error("sweep: unknown axis '" + axis +
                           "' (expected site|block|layers|aggregation|heads|extra_block)");
}

// Max |logit| gap between Mid and End placements under shared weights, on a
// probe batch. Evaluated in 64-bit regardless of the training precision.
double mid_end_gap(const ConfigMap& cfg) {
  ConfigMap mid = cfg, end = cfg;
  mid["cb.site"] = "mlp_mid";
  end["cb.site"] = "mlp_end";
  const ModelConfig mc_mid = make_model_config(mid);
  const ModelConfig mc_end = make_model_config(end);
  const std::uint64_t seed = cfg_u64(cfg, "seed");
  Model<double> model_mid(mc_mid, seed);
  Model<double> model_end(mc_end, seed);

  SyntheticDataset ds = obtain_dataset(cfg);
  std::vector<int> idx;
  for (int i = 0; i < std::min(32, ds.count()); ++i) idx.push_back(i);
  std::vector<double> mean, stdev;
  ds.channel_stats(mean, stdev);
  model_mid.set_input_norm(mean, stdev);
  model_end.set_input_norm(mean, stdev);
  const auto batch = ds.batch<double>(idx);

  ForwardOptions opt;
  opt.param_grads = false;
  Graph<double> g1, g2;
  const auto r1 = model_mid.forward(g1, batch, opt);
  const auto r2 = model_end.forward(g2, batch, opt);
  const Tensor<double>& a = g1.value(r1.logits);
  const Tensor<double>& b = g2.value(r2.logits);
  double gap = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) gap = std::max(gap, std::abs(a[i] - b[i]));
  return gap;
}

double half_mean(const std::vector<double>& xs, bool upper) {
  if (xs.empty()) return 0.0;
  const std::size_t mid = xs.size() / 2;
  const std::size_t lo = upper ? mid : 0;
  const std::size_t hi = upper ? xs.size() : mid;
  if (lo >= hi) return 0.0;
  double acc = 0.0;
  for (std::size_t i = lo; i < hi; ++i) acc += xs[i];
  return acc / static_cast<double>(hi - lo);
}

}  // namespace

int cmd_sweep(const CommonArgs& args, const std::string& axis) {
  try {
    ConfigMap cfg = resolve(args);
    const bool cb_axis =
        axis == "site" || axis == "block" || axis == "layers" || axis == "aggregation";
    if (cb_axis && cfg_str(cfg, "cb.variant") == "none") {
      std::cerr << "sweep: cb.variant=none has no " << axis << " to vary; using cb.variant=cb\n";
      cfg["cb.variant"] = "cb";
    }
    const std::vector<AxisPoint> points = axis_points(axis, cfg);

    // validate every point before any training starts
    std::vector<ConfigMap> run_cfgs;
    for (const AxisPoint& point : points) {
      ConfigMap rc = cfg;
      for (const auto& [key, value] : point.patch) rc[key] = value;
      make_model_config(rc);  // throws on e.g. a dim-divisibility violation
      make_train_config(rc);
      run_cfgs.push_back(std::move(rc));
    }

    const auto out_dir = resolve_out_dir(args, "sweep_" + axis);
    const double gap = mid_end_gap(cfg);

    std::vector<RunSummary> summaries(points.size());
    std::vector<std::vector<fs::path>> run_artifacts(points.size());
    auto run_one = [&](std::size_t i) {
      const fs::path dir = out_dir / (axis + "=" + points[i].value);
      fs::create_directories(dir);
      summaries[i] = run_training(run_cfgs[i], dir, run_artifacts[i]);
    };
    if (args.threads > 1) {
      for (std::size_t start = 0; start < points.size();
           start += static_cast<std::size_t>(args.threads)) {
        std::vector<std::thread> pool;
        for (std::size_t i = start;
             i < std::min(points.size(), start + static_cast<std::size_t>(args.threads)); ++i)
          pool.emplace_back(run_one, i);
        for (auto& t : pool) t.join();
      }
    } else {
      for (std::size_t i = 0; i < points.size(); ++i) run_one(i);
    }

    std::string csv = "axis,value,final_train_loss,top1,entropy_lower_half,entropy_upper_half,"
                      "mid_end_logit_gap\n";
    for (std::size_t i = 0; i < points.size(); ++i) {
      csv += axis + "," + points[i].value + "," + format_double(summaries[i].final_loss) + "," +
             format_double(summaries[i].top1) + "," +
             format_double(half_mean(summaries[i].layer_entropy, false)) + "," +
             format_double(half_mean(summaries[i].layer_entropy, true)) + "," +
             format_double(gap) + "\n";
    }
    const fs::path csv_path = out_dir / "sweep.csv";
    write_text_file(csv_path, csv);

    std::vector<fs::path> artifacts{csv_path};
    for (const auto& ra : run_artifacts)
      artifacts.insert(artifacts.end(), ra.begin(), ra.end());
    write_manifest(out_dir, "sweep", cfg, args, artifacts);
    std::cout << "sweep: " << points.size() << " runs, results in " << csv_path.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace cbvit::cli
