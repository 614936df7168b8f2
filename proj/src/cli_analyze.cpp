#include <iostream>

#include "cbvit/analysis.hpp"
#include "cbvit/checkpoint.hpp"
#include "cbvit/cli.hpp"
#include "cbvit/train.hpp"
#include "cbvit/util.hpp"

namespace cbvit::cli {

namespace fs = std::filesystem;

namespace {

// distinguish checkpoints that share a filename by keeping the parent dir
std::string tag_of(const fs::path& stem) {
  return stem.parent_path().has_filename()
             ? stem.parent_path().filename().string() + "/" + stem.filename().string()
             : stem.filename().string();
}

struct ModelReport {
  std::string tag;
  std::vector<double> entropy;       // per layer (before trailing-layer exclusion)
  std::vector<double> distance;      // per layer
  std::vector<ScalingStats> scaling; // empty unless CB_S
  std::vector<double> jac_mean;      // mean ||J||* of observed rows, per layer
  std::vector<double> jac_max;
  double jac_bound = 0.0;            // lambda (1 - 1/N)
  int layers = 0;
  int tokens = 0;
};

ModelReport analyze_model(const fs::path& stem, const SyntheticDataset& ds, const ConfigMap& cfg) {
  Model<double> model = load_checkpoint<double>(stem);
  const ModelConfig& mc = model.config();
  if (mc.image_size != ds.image_size || mc.channels != ds.channels)
    throw std::runtime_error("analyze: dataset does not match checkpoint " + stem.string());

  std::vector<int> idx;
  const int batch = std::max<int>(1, static_cast<int>(cfg_int(cfg, "analyze.batch")));
  for (int i = 0; i < std::min(batch, ds.count()); ++i) idx.push_back(i);

  Graph<double> g;
  ForwardOptions opt;
  opt.param_grads = false;
  opt.record_attention = true;
  const auto res = model.forward(g, ds.batch<double>(idx), opt);

  const bool exclude_class = cfg_bool(cfg, "analyze.exclude_class");
  const bool renormalize = cfg_bool(cfg, "analyze.renormalize_distance");
  const TokenPositions positions = TokenPositions::grid(mc.grid());

  ModelReport report;
  report.tag = tag_of(stem);
  report.tokens = mc.tokens();
  report.layers = mc.depth + (mc.extra_block == ExtraBlock::msa ? 1 : 0);
  report.jac_bound = mc.scale() * (1.0 - 1.0 / mc.tokens());
  report.entropy.assign(static_cast<std::size_t>(report.layers), 0.0);
  report.distance.assign(static_cast<std::size_t>(report.layers), 0.0);
  report.jac_mean.assign(static_cast<std::size_t>(report.layers), 0.0);
  report.jac_max.assign(static_cast<std::size_t>(report.layers), 0.0);
  std::vector<long> hrows(static_cast<std::size_t>(report.layers), 0);
  std::vector<long> mats(static_cast<std::size_t>(report.layers), 0);

  for (const AttentionRecord& rec : res.records) {
    const auto layer = static_cast<std::size_t>(rec.layer);
    const int n = rec.a.extent(0);
    const int first = exclude_class ? 1 : 0;
    for (int r = first; r < n; ++r) {
      const std::span<const double> row{rec.a.row_ptr(r), static_cast<std::size_t>(n)};
      report.entropy[layer] += attention_entropy(row);
      const double nn = nuclear_norm_analytic(row, mc.scale());
      report.jac_mean[layer] += nn;
      report.jac_max[layer] = std::max(report.jac_max[layer], nn);
      ++hrows[layer];
    }
    report.distance[layer] += relative_distance(rec.a, positions, renormalize);
    ++mats[layer];
  }
  for (int l = 0; l < report.layers; ++l) {
    const auto i = static_cast<std::size_t>(l);
    if (hrows[i]) {
      report.entropy[i] /= static_cast<double>(hrows[i]);
      report.jac_mean[i] /= static_cast<double>(hrows[i]);
    }
    if (mats[i]) report.distance[i] /= static_cast<double>(mats[i]);
  }
  if (cfg_bool(cfg, "analyze.scaling_stats")) report.scaling = scaling_stats(model.lambda_vecs());
  return report;
}

// Accuracy with an input perturbation, for the robustness probes.
double occluded_accuracy(const fs::path& stem, SyntheticDataset ds, double fraction) {
  Model<double> model = load_checkpoint<double>(stem);
  center_occlusion_inplace(ds, fraction);
  return evaluate(model, ds).top1;
}

double fgsm_accuracy(const fs::path& stem, const SyntheticDataset& ds, double epsilon, int limit) {
  Model<double> model = load_checkpoint<double>(stem);
  const int n = std::min(limit, ds.count());
  long hits = 0;
  std::vector<int> one(1);
  for (int i = 0; i < n; ++i) {
    one[0] = i;
    const auto batch = ds.batch<double>(one);
    Tensor<double> image({ds.image_size, ds.image_size, ds.channels},
                         std::vector<double>(batch.storage()));
    const auto adv = fgsm_attack(model, image, ds.labels[static_cast<std::size_t>(i)], epsilon);
    Tensor<double> adv_batch({1, ds.image_size, ds.image_size, ds.channels},
                             std::vector<double>(adv.storage()));
    Graph<double> g;
    ForwardOptions opt;
    opt.param_grads = false;
    const auto res = model.forward(g, adv_batch, opt);
    const Tensor<double>& logits = g.value(res.logits);
    int best = 0;
    for (int c = 1; c < ds.num_classes; ++c)
      if (logits.at(0, c) > logits.at(0, best)) best = c;
    hits += best == ds.labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / n;
}

std::string na_or(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string("undefined");
}

}  // namespace

int cmd_analyze(const CommonArgs& args, const AnalyzeArgs& what) {
  try {
    if (what.checkpoints.empty()) throw std::runtime_error("analyze: no checkpoint given");
    if (what.dataset.empty()) throw std::runtime_error("analyze: no dataset given");
    const ConfigMap cfg = resolve(args);
    const SyntheticDataset ds = load_dataset(what.dataset);
    const auto out_dir = resolve_out_dir(args, "analyze");

    std::vector<ModelReport> reports;
    for (const auto& stem : what.checkpoints) reports.push_back(analyze_model(stem, ds, cfg));

    const int drop = static_cast<int>(cfg_int(cfg, "analyze.exclude_last_layers"));
    std::string csv =
        "model_tag,layer,mean_entropy,max_entropy_bound,relative_distance,lambda_ratio,"
        "lambda_mean\n";
    for (const ModelReport& r : reports) {
      const double bound = std::log(static_cast<double>(r.tokens));
      const int last = std::max(0, r.layers - std::max(0, drop));
      for (int l = 0; l < last; ++l) {
        const auto i = static_cast<std::size_t>(l);
        std::string ratio = "na", mean = "na";
        for (const ScalingStats& s : r.scaling)
          if (s.layer == l) {
            ratio = na_or(s.ratio);
            mean = format_double(s.mean);
          }
        csv += r.tag + "," + std::to_string(l) + "," + format_double(r.entropy[i]) + "," +
               format_double(bound) + "," + format_double(r.distance[i]) + "," + ratio + "," +
               mean + "\n";
      }
      if (r.scaling.empty() && cfg_bool(cfg, "analyze.scaling_stats"))
        csv += r.tag + ",all,na,na,na,not applicable,not applicable\n";
    }
    const fs::path csv_path = out_dir / "analysis.csv";
    write_text_file(csv_path, csv);

    std::string jac = "model_tag,layer,mean_nuclear_norm,max_nuclear_norm,uniform_bound\n";
    for (const ModelReport& r : reports)
      for (int l = 0; l < r.layers; ++l) {
        const auto i = static_cast<std::size_t>(l);
        jac += r.tag + "," + std::to_string(l) + "," + format_double(r.jac_mean[i]) + "," +
               format_double(r.jac_max[i]) + "," + format_double(r.jac_bound) + "\n";
      }
    const fs::path jac_path = out_dir / "jacobian.csv";
    write_text_file(jac_path, jac);

    std::vector<fs::path> artifacts{csv_path, jac_path};
    const double occ = cfg_double(cfg, "analyze.occlusion");
    const double eps = cfg_double(cfg, "analyze.fgsm");
    if (occ >= 0.0 || eps >= 0.0) {
      std::string rob = "model_tag,probe,value,top1\n";
      for (const auto& stem : what.checkpoints) {
        const std::string tag = tag_of(stem);
        Model<double> model = load_checkpoint<double>(stem);
        rob += tag + ",clean,0," + format_double(evaluate(model, ds).top1) + "\n";
        if (occ >= 0.0)
          rob += tag + ",occlusion," + format_double(occ) + "," +
                 format_double(occluded_accuracy(stem, ds, occ)) + "\n";
        if (eps >= 0.0)
          rob += tag + ",fgsm," + format_double(eps) + "," +
                 format_double(fgsm_accuracy(stem, ds, eps, 256)) + "\n";
      }
      const fs::path rob_path = out_dir / "robustness.csv";
      write_text_file(rob_path, rob);
      artifacts.push_back(rob_path);
    }

    write_manifest(out_dir, "analyze", cfg, args, artifacts);
    std::cout << "analyze: wrote " << csv_path.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace cbvit::cli
