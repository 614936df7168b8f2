#include <iostream>

#include "cbvit/cli.hpp"
#include "cbvit/dataset.hpp"
#include "cbvit/util.hpp"

namespace cbvit::cli {

int cmd_make_dataset(const CommonArgs& args) {
  try {
    const ConfigMap cfg = resolve(args);
    const auto out_dir = resolve_out_dir(args, "dataset");
    std::uint64_t dseed = cfg_u64(cfg, "data.seed");
    if (dseed == 0) dseed = cfg_u64(cfg, "seed") * 0x9e3779b97f4a7c15ull + 0x1234567ull;
    const SyntheticDataset ds = make_synthetic_dataset(
        dseed, static_cast<int>(cfg_int(cfg, "data.n")),
        static_cast<int>(cfg_int(cfg, "model.image_size")),
        static_cast<int>(cfg_int(cfg, "model.num_classes")),
        static_cast<int>(cfg_int(cfg, "data.noise")));
    const auto path = out_dir / "data.cbds";
    save_dataset(ds, path);
    write_manifest(out_dir, "make-dataset", cfg, args, {path});
    std::cout << "make-dataset: wrote " << path.string() << " (" << ds.count() << " images, "
              << ds.num_classes << " classes)\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace cbvit::cli
