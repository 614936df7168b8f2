#include <iostream>

#include "cbvit/analysis.hpp"
#include "cbvit/cli.hpp"
#include "cbvit/gradcheck.hpp"
#include "cbvit/util.hpp"

namespace cbvit::cli {

int cmd_gradcheck(const CommonArgs& args) {
  try {
    ConfigMap cfg = resolve(args);
    if (args.config_path.empty()) {
      // built-in tiny configuration: depth 2, dim 8, heads 2, 8x8 image
      cfg["model.image_size"] = "8";
      cfg["model.patch_size"] = "4";
      cfg["model.depth"] = "2";
      cfg["model.dim"] = "8";
      cfg["model.heads"] = "2";
      cfg["model.num_classes"] = "3";
      for (const auto& [key, value] : args.overrides) cfg[key] = value;
    }
    const ModelConfig mc = make_model_config(cfg);
    Model<double> model(mc, cfg_u64(cfg, "seed"));
    if (model.param_count() >= 50000)
      throw std::runtime_error("gradcheck: refusing config with " +
                               std::to_string(model.param_count()) +
                               " parameters (cap is 50k); use a tiny config");

    const GradcheckReport report = model_gradcheck(
        model, cfg_u64(cfg, "seed") + 17, static_cast<int>(cfg_int(cfg, "gradcheck.coords")),
        cfg_double(cfg, "gradcheck.eps"));
    const double tol = cfg_double(cfg, "gradcheck.tolerance");
    std::cout << "gradcheck: " << report.checked << " coordinates over "
              << report.tensors_checked << " tensors\n";
    std::cout << "gradcheck: worst rel. error " << format_double(report.worst_rel_error) << " at "
              << report.worst_tensor << "[" << report.worst_coord << "]\n";

    bool ok = report.worst_rel_error < tol;
    if (!ok)
      std::cerr << "gradcheck: tolerance " << format_double(tol) << " exceeded by tensor "
                << report.worst_tensor << " coordinate " << report.worst_coord << "\n";

    // uniform-attention maximality sweep
    const long trials = cfg_int(cfg, "gradcheck.trials");
    double worst_margin = 1e300;
    for (int n = 2; n <= 32; ++n) {
      for (double lambda : {0.5, 1.0, 2.0}) {
        const MaximalityReport m = verify_uniform_maximality(n, lambda, trials);
        worst_margin = std::min(worst_margin, m.margin);
        if (m.violated) {
          std::cerr << "gradcheck: maximality violated at N=" << n << " lambda=" << lambda
                    << " value=" << format_double(m.max_found)
                    << " bound=" << format_double(m.bound) << "\n";
          ok = false;
        }
      }
    }
    std::cout << "gradcheck: maximality sweep N=2..32, lambda in {0.5,1,2}, " << trials
              << " samples each; min margin " << format_double(worst_margin) << "\n";
    std::cout << (ok ? "gradcheck: OK\n" : "gradcheck: FAILED\n");
    return ok ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace cbvit::cli
