#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cbvit/tensor.hpp"

namespace cbvit {

// Class-conditional geometric shapes on noisy backgrounds, the desk-scale
// stand-in for a real image corpus. Shape geometry (class identity) varies in
// position and size; colors and contrast polarity are class-independent so a
// linear pixel probe has nothing cheap to latch onto.
struct SyntheticDataset {
  int image_size = 0;
  int channels = 3;
  int num_classes = 0;
  std::vector<std::uint8_t> pixels;  // count * H * W * C
  std::vector<std::int32_t> labels;
  std::uint64_t seed = 0;  // generator provenance
  int noise = 0;

  int count() const { return static_cast<int>(labels.size()); }
  std::size_t image_bytes() const {
    return static_cast<std::size_t>(image_size) * image_size * channels;
  }
  const std::uint8_t* image(int i) const { return pixels.data() + image_bytes() * i; }

  // Gather images into a [B, H, W, C] float batch scaled to [0, 1].
  template <typename T>
  Tensor<T> batch(const std::vector<int>& indices) const {
    Tensor<T> out({static_cast<int>(indices.size()), image_size, image_size, channels});
    T* dst = out.data();
    for (int idx : indices) {
      const std::uint8_t* src = image(idx);
      for (std::size_t i = 0; i < image_bytes(); ++i) *dst++ = static_cast<T>(src[i]) / T(255);
    }
    return out;
  }

  // Per-channel mean/std on the [0, 1] scale, for input standardization.
  void channel_stats(std::vector<double>& mean, std::vector<double>& stdev) const;
};

namespace synth {
// Generator geometry ranges, exposed so tests can enumerate the rule.
inline constexpr int kMaxClasses = 10;
inline constexpr double kMinHalfSizeFrac = 0.16;  // of image_size
inline constexpr double kMaxHalfSizeFrac = 0.28;
inline constexpr double kCenterMarginFrac = 0.30;

// 0/1 occupancy of shape `cls` centered at (cx, cy) with half-size s.
std::vector<std::uint8_t> shape_mask(int cls, int image_size, int cx, int cy, int s);
}  // namespace synth

SyntheticDataset make_synthetic_dataset(std::uint64_t seed, int n, int image_size,
                                        int num_classes, int noise_level = 14);

// Binary container: header of little-endian int32s (magic "CBDS", version,
// count, H, W, C, num_classes) followed by raw 8-bit pixels then int32 labels.
void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& path);
SyntheticDataset load_dataset(const std::filesystem::path& path);

// Zero out the centered square of side floor(fraction * side). Image layout
// is [H, W, C]; everything outside the block is untouched.
template <typename T>
Tensor<T> center_occlusion(const Tensor<T>& image, double mask_fraction) {
  if (image.ndim() != 3) throw std::invalid_argument("center_occlusion: expected [H,W,C]");
  if (mask_fraction < 0.0 || mask_fraction > 1.0)
    throw std::invalid_argument("center_occlusion: fraction must be in [0,1]");
  const int h = image.extent(0), w = image.extent(1), c = image.extent(2);
  Tensor<T> out = image;
  const int sh = static_cast<int>(mask_fraction * h);
  const int sw = static_cast<int>(mask_fraction * w);
  const int r0 = (h - sh) / 2, c0 = (w - sw) / 2;
  for (int r = r0; r < r0 + sh; ++r)
    for (int col = c0; col < c0 + sw; ++col)
      for (int ch = 0; ch < c; ++ch) out[(static_cast<std::size_t>(r) * w + col) * c + ch] = T(0);
  return out;
}

// Same operation applied in place to every image of a dataset.
void center_occlusion_inplace(SyntheticDataset& ds, double mask_fraction);

}  // namespace cbvit
