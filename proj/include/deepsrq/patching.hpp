#ifndef DEEPSRQ_PATCHING_HPP
#define DEEPSRQ_PATCHING_HPP

// Patch grids over SR images: nonoverlapping counts, amplification-adaptive
// strides, cropping, and [0,1] normalization.

#include "deepsrq/imgio.hpp"
#include "deepsrq/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepsrq {

enum class PatchErrc { PatchLargerThanImage, BadFactor, WrongChannelCount, BadPlan };

inline const char* to_string(PatchErrc c) {
  switch (c) {
    case PatchErrc::PatchLargerThanImage: return "PatchLargerThanImage";
    case PatchErrc::BadFactor: return "BadFactor";
    case PatchErrc::WrongChannelCount: return "WrongChannelCount";
    case PatchErrc::BadPlan: return "BadPlan";
  }
  return "Unknown";
}

class PatchError : public std::runtime_error {
 public:
  PatchError(PatchErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  PatchErrc code() const noexcept { return code_; }

 private:
  PatchErrc code_;
};

struct CropPlan {
  int patch_width = 32;
  int patch_height = 32;
  int stride = 32;
};

struct Patch {
  RasterImage pixels;
  int x0 = 0;
  int y0 = 0;
  std::string source;
};

/// floor(M/m) * floor(N/n).
inline long patch_count(int image_width, int image_height, int patch_width, int patch_height) {
  if (patch_width < 1 || patch_height < 1)
    throw PatchError(PatchErrc::BadPlan, "patch extents must be positive");
  if (image_width < patch_width || image_height < patch_height)
    throw PatchError(PatchErrc::PatchLargerThanImage, "patch larger than image");
  return static_cast<long>(image_width / patch_width) * (image_height / patch_height);
}

/// Stride proportional to the amplification factor; the largest factor
/// strides by a full patch. Rounded to nearest, never below 1.
inline int adaptive_stride(double factor, double max_factor, int patch_size) {
  if (!(factor > 0) || !(factor <= max_factor))
    throw PatchError(PatchErrc::BadFactor, "amplification factor must satisfy 0 < f <= f_max");
  if (patch_size < 1) throw PatchError(PatchErrc::BadPlan, "patch size must be positive");
  const long s = std::lround(factor / max_factor * patch_size);
  return static_cast<int>(std::max(1L, s));
}

/// Top-left origins of every full window, row-major.
inline std::vector<std::pair<int, int>> crop_origins(int image_width, int image_height,
                                                     const CropPlan& plan) {
  if (plan.patch_width < 1 || plan.patch_height < 1 || plan.stride < 1)
    throw PatchError(PatchErrc::BadPlan, "invalid crop plan");
  if (image_width < plan.patch_width || image_height < plan.patch_height)
    throw PatchError(PatchErrc::PatchLargerThanImage, "patch larger than image");
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y + plan.patch_height <= image_height; y += plan.stride)
    for (int x = 0; x + plan.patch_width <= image_width; x += plan.stride) out.emplace_back(x, y);
  return out;
}

inline RasterImage crop(const RasterImage& img, int x0, int y0, int w, int h) {
  RasterImage out(w, h, img.channels());
  const auto src = img.data();
  auto dst = out.data();
  const std::size_t row_bytes = static_cast<std::size_t>(w) * img.channels();
  for (int y = 0; y < h; ++y) {
    const auto from = src.begin() + static_cast<std::ptrdiff_t>(img.index(x0, y0 + y));
    std::copy(from, from + static_cast<std::ptrdiff_t>(row_bytes),
              dst.begin() + static_cast<std::ptrdiff_t>(y * row_bytes));
  }
  return out;
}

inline std::vector<Patch> crop_patches(const RasterImage& img, const CropPlan& plan,
                                       const std::string& source = {}) {
  std::vector<Patch> out;
  for (auto [x, y] : crop_origins(img.width(), img.height(), plan))
    out.push_back({crop(img, x, y, plan.patch_width, plan.patch_height), x, y, source});
  return out;
}

/// H x W x 3 tensor of sample/255.
template <typename T = float>
Tensor<T> normalize_patch(const RasterImage& pixels) {
  if (pixels.channels() != 3)
    throw PatchError(PatchErrc::WrongChannelCount, "patch must have 3 channels");
  Tensor<T> t({pixels.height(), pixels.width(), 3});
  const auto src = pixels.data();
  for (std::size_t i = 0; i < src.size(); ++i) t[i] = static_cast<T>(src[i]) / static_cast<T>(255);
  return t;
}

template <typename T = float>
Tensor<T> normalize_patch(const Patch& p) {
  return normalize_patch<T>(p.pixels);
}

}  // namespace deepsrq

#endif  // DEEPSRQ_PATCHING_HPP
