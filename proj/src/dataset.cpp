#include "cbvit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "cbvit/rng.hpp"
#include "cbvit/util.hpp"

namespace cbvit {

namespace synth {

std::vector<std::uint8_t> shape_mask(int cls, int image_size, int cx, int cy, int s) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(image_size) * image_size, 0);
  const int band = std::max(2, s / 3);
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const int dx = x - cx;
      const int dy = y - cy;
      const bool in_box = std::abs(dx) <= s && std::abs(dy) <= s;
      bool on = false;
      switch (cls) {
        case 0:  // filled square
          on = in_box;
          break;
        case 1:  // plus sign
          on = (std::abs(dx) <= band && std::abs(dy) <= s) ||
               (std::abs(dy) <= band && std::abs(dx) <= s);
          break;
        case 2:  // horizontal stripes
          on = in_box && ((dy + s) / band) % 2 == 0;
          break;
        case 3:  // filled disk
          on = dx * dx + dy * dy <= s * s;
          break;
        case 4:  // diagonal cross
          on = in_box && std::abs(std::abs(dx) - std::abs(dy)) < band;
          break;
        case 5:  // hollow frame
          on = in_box && !(std::abs(dx) <= s - band && std::abs(dy) <= s - band);
          break;
        case 6:  // vertical stripes
          on = in_box && ((dx + s) / band) % 2 == 0;
          break;
        case 7:  // upward triangle
          on = std::abs(dy) <= s && std::abs(dx) <= (dy + s) / 2;
          break;
        case 8:  // ring
          on = dx * dx + dy * dy <= s * s && dx * dx + dy * dy >= (s - band) * (s - band);
          break;
        case 9:  // checkerboard
          on = in_box && (((dx + s) / band) + ((dy + s) / band)) % 2 == 0;
          break;
        default:
          throw std::invalid_argument("shape_mask: unknown class");
      }
      if (on) mask[static_cast<std::size_t>(y) * image_size + x] = 1;
    }
  }
  return mask;
}

}  // namespace synth

SyntheticDataset make_synthetic_dataset(std::uint64_t seed, int n, int image_size,
                                        int num_classes, int noise_level) {
  if (num_classes < 2 || num_classes > synth::kMaxClasses)
    throw std::invalid_argument("make_synthetic_dataset: num_classes must be in [2,10]");
  if (n < num_classes) throw std::invalid_argument("make_synthetic_dataset: need n >= num_classes");
  if (image_size < 16) throw std::invalid_argument("make_synthetic_dataset: image_size too small");
  if (noise_level < 0 || noise_level > 64)
    throw std::invalid_argument("make_synthetic_dataset: noise_level out of range");

  SyntheticDataset ds;
  ds.image_size = image_size;
  ds.channels = 3;
  ds.num_classes = num_classes;
  ds.seed = seed;
  ds.noise = noise_level;
  ds.pixels.resize(static_cast<std::size_t>(n) * ds.image_bytes());
  ds.labels.resize(static_cast<std::size_t>(n));

  const int margin = static_cast<int>(synth::kCenterMarginFrac * image_size);
  const int smin = static_cast<int>(synth::kMinHalfSizeFrac * image_size);
  const int smax = static_cast<int>(synth::kMaxHalfSizeFrac * image_size);

  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const int cls = i % num_classes;  // balanced within +-1 by construction
    ds.labels[static_cast<std::size_t>(i)] = cls;
    const int cx = rng.uniform_int(margin, image_size - 1 - margin);
    const int cy = rng.uniform_int(margin, image_size - 1 - margin);
    const int s = rng.uniform_int(smin, smax);
    int bg = rng.uniform_int(25, 105);
    int fg = rng.uniform_int(150, 230);
    if (rng.coin()) std::swap(bg, fg);  // polarity carries no class signal
    int tint[3];
    for (int c = 0; c < 3; ++c) tint[c] = rng.uniform_int(-12, 12);

    const auto mask = synth::shape_mask(cls, image_size, cx, cy, s);
    std::uint8_t* img = ds.pixels.data() + ds.image_bytes() * i;
    for (int p = 0; p < image_size * image_size; ++p) {
      const int base = mask[static_cast<std::size_t>(p)] ? fg : bg;
      for (int c = 0; c < 3; ++c) {
        int v = base + tint[c];
        if (noise_level > 0) v += rng.uniform_int(-noise_level, noise_level);
        img[static_cast<std::size_t>(p) * 3 + c] =
            static_cast<std::uint8_t>(std::clamp(v, 0, 255));
      }
    }
  }
  return ds;
}

void SyntheticDataset::channel_stats(std::vector<double>& mean, std::vector<double>& stdev) const {
  mean.assign(static_cast<std::size_t>(channels), 0.0);
  stdev.assign(static_cast<std::size_t>(channels), 0.0);
  const std::size_t per_channel = pixels.size() / static_cast<std::size_t>(channels);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    mean[i % channels] += pixels[i] / 255.0;
  for (double& m : mean) m /= static_cast<double>(per_channel);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double d = pixels[i] / 255.0 - mean[i % channels];
    stdev[i % channels] += d * d;
  }
  for (double& s : stdev) s = std::sqrt(std::max(s / static_cast<double>(per_channel), 1e-8));
}

namespace {

constexpr std::int32_t kMagic = 0x53444243;  // "CBDS" little-endian
constexpr std::int32_t kVersion = 1;

void put_i32(std::ofstream& out, std::int32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

std::int32_t get_i32(std::ifstream& in) {
  std::int32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

}  // namespace

void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  put_i32(out, kMagic);
  put_i32(out, kVersion);
  put_i32(out, ds.count());
  put_i32(out, ds.image_size);
  put_i32(out, ds.image_size);
  put_i32(out, ds.channels);
  put_i32(out, ds.num_classes);
  out.write(reinterpret_cast<const char*>(ds.pixels.data()),
            static_cast<std::streamsize>(ds.pixels.size()));
  out.write(reinterpret_cast<const char*>(ds.labels.data()),
            static_cast<std::streamsize>(ds.labels.size() * 4));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

SyntheticDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  if (get_i32(in) != kMagic) throw std::runtime_error("bad dataset magic in " + path.string());
  if (get_i32(in) != kVersion) throw std::runtime_error("unsupported dataset version");
  SyntheticDataset ds;
  const std::int32_t count = get_i32(in);
  const std::int32_t h = get_i32(in);
  const std::int32_t w = get_i32(in);
  ds.channels = get_i32(in);
  ds.num_classes = get_i32(in);
  if (h != w || count <= 0 || h <= 0 || ds.channels <= 0 || ds.num_classes <= 0)
    throw std::runtime_error("corrupt dataset header in " + path.string());
  ds.image_size = h;
  ds.pixels.resize(static_cast<std::size_t>(count) * ds.image_bytes());
  ds.labels.resize(static_cast<std::size_t>(count));
  in.read(reinterpret_cast<char*>(ds.pixels.data()),
          static_cast<std::streamsize>(ds.pixels.size()));
  in.read(reinterpret_cast<char*>(ds.labels.data()),
          static_cast<std::streamsize>(ds.labels.size() * 4));
  if (!in) throw std::runtime_error("truncated dataset " + path.string());
  for (std::int32_t label : ds.labels)
    if (label < 0 || label >= ds.num_classes)
      throw std::runtime_error("dataset label out of range in " + path.string());
  return ds;
}

void center_occlusion_inplace(SyntheticDataset& ds, double mask_fraction) {
  if (mask_fraction < 0.0 || mask_fraction > 1.0)
    throw std::invalid_argument("center_occlusion: fraction must be in [0,1]");
  const int side = static_cast<int>(mask_fraction * ds.image_size);
  const int r0 = (ds.image_size - side) / 2;
  for (int i = 0; i < ds.count(); ++i) {
    std::uint8_t* img = ds.pixels.data() + ds.image_bytes() * i;
    for (int r = r0; r < r0 + side; ++r)
      for (int c = r0; c < r0 + side; ++c)
        for (int ch = 0; ch < ds.channels; ++ch)
          img[(static_cast<std::size_t>(r) * ds.image_size + c) * ds.channels + ch] = 0;
  }
}

}  // namespace cbvit
