#pragma once

#include "constructs/rng.hpp"
#include "constructs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace constructs {

// Declared value range of an image tensor. Model space [-1,1] is what the
// networks consume, metric space [0,1] is what structural metrics expect.
struct ValueRange {
  float lo = 0.f;
  float hi = 1.f;
  bool operator==(const ValueRange&) const = default;
};

inline constexpr ValueRange kModelRange{-1.f, 1.f};
inline constexpr ValueRange kMetricRange{0.f, 1.f};

struct Image {
  Tensor<float> data;  // [C,H,W]
  ValueRange range = kMetricRange;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }

  void validate(const char* what = "image") const {
    if (data.rank() != 3) throw std::invalid_argument(std::string(what) + ": expected rank 3");
    if (channels() != 1 && channels() != 3)
      throw std::invalid_argument(std::string(what) + ": expected 1 or 3 channels, got " +
                                  std::to_string(channels()));
    const float tol = 1e-4f;
    const float lo = data.data.minCoeff();
    const float hi = data.data.maxCoeff();
    if (lo < range.lo - tol || hi > range.hi + tol)
      throw std::invalid_argument(std::string(what) + ": values outside declared range");
  }
};

inline Image convert_range(const Image& img, ValueRange target) {
  if (img.range == target) return img;
  const float scale = (target.hi - target.lo) / (img.range.hi - img.range.lo);
  Image out;
  out.data = img.data;
  out.data.data = (img.data.data - img.range.lo) * scale + target.lo;
  out.range = target;
  return out;
}

inline Image to_metric(const Image& img) { return convert_range(img, kMetricRange); }
inline Image to_model(const Image& img) { return convert_range(img, kModelRange); }

// Per-pixel channel mean mapped to metric space. Single-channel images pass
// through (up to the range conversion), so hue shifts that keep the channel
// mean fixed leave the result untouched.
inline Image brightness(const Image& img) {
  const int c = img.channels(), h = img.height(), w = img.width();
  Image out;
  out.data = Tensor<float>::zeros({1, h, w});
  out.range = kMetricRange;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int ch = 0; ch < c; ++ch)
    out.data.data += img.data.data.segment(ch * plane, plane);
  out.data.data /= static_cast<float>(c);
  const float scale = 1.f / (img.range.hi - img.range.lo);
  out.data.data = (out.data.data - img.range.lo) * scale;
  return out;
}

enum class CropMode { kCenter, kRandom };

// One resolved crop: cover-fit resize to (resized_h, resized_w), then a window
// at (off_y, off_x). Built once and applied to an image and its mask so the
// two stay aligned.
struct CropPlan {
  int src_h = 0, src_w = 0;
  int resized_h = 0, resized_w = 0;
  int off_y = 0, off_x = 0;
  int out_h = 0, out_w = 0;
};

inline CropPlan plan_crop_resize(int src_h, int src_w, int out_h, int out_w, CropMode mode,
                                 Rng* rng) {
  if (out_h <= 0 || out_w <= 0 || src_h <= 0 || src_w <= 0)
    throw std::invalid_argument("crop: non-positive size");
  CropPlan p;
  p.src_h = src_h;
  p.src_w = src_w;
  p.out_h = out_h;
  p.out_w = out_w;
  const double scale = std::max(static_cast<double>(out_h) / src_h,
                                static_cast<double>(out_w) / src_w);
  p.resized_h = std::max(out_h, static_cast<int>(std::lround(src_h * scale)));
  p.resized_w = std::max(out_w, static_cast<int>(std::lround(src_w * scale)));
  const int span_y = p.resized_h - out_h;
  const int span_x = p.resized_w - out_w;
  if (mode == CropMode::kRandom) {
    if (!rng) throw std::invalid_argument("crop: random mode needs an rng");
    p.off_y = span_y > 0 ? static_cast<int>(rng->uniform_int(span_y + 1)) : 0;
    p.off_x = span_x > 0 ? static_cast<int>(rng->uniform_int(span_x + 1)) : 0;
  } else {
    p.off_y = span_y / 2;
    p.off_x = span_x / 2;
  }
  return p;
}

// Bilinear resample with half-pixel centers.
inline Tensor<float> resize_bilinear(const Tensor<float>& src, int out_h, int out_w) {
  const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor<float> out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    const double fy = (oy + 0.5) * sy - 0.5;
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const float wy = static_cast<float>(std::clamp(fy - y0, 0.0, 1.0));
    for (int ox = 0; ox < out_w; ++ox) {
      const double fx = (ox + 0.5) * sx - 0.5;
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const float wx = static_cast<float>(std::clamp(fx - x0, 0.0, 1.0));
      for (int ch = 0; ch < c; ++ch) {
        const float top = src.at(ch, y0, x0) * (1.f - wx) + src.at(ch, y0, x1) * wx;
        const float bot = src.at(ch, y1, x0) * (1.f - wx) + src.at(ch, y1, x1) * wx;
        out.at(ch, oy, ox) = top * (1.f - wy) + bot * wy;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& src, int out_h, int out_w) {
  const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor<T> out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    const int y = std::min(static_cast<int>((oy + 0.5) * sy), h - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      const int x = std::min(static_cast<int>((ox + 0.5) * sx), w - 1);
      for (int ch = 0; ch < c; ++ch) out.at(ch, oy, ox) = src.at(ch, y, x);
    }
  }
  return out;
}

template <typename T>
Tensor<T> crop_window(const Tensor<T>& src, int off_y, int off_x, int out_h, int out_w) {
  const int c = src.dim(0);
  Tensor<T> out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) out.at(ch, y, x) = src.at(ch, off_y + y, off_x + x);
  return out;
}

inline Image apply_crop_resize(const Image& img, const CropPlan& p) {
  Image out;
  out.range = img.range;
  Tensor<float> resized = (p.resized_h == img.height() && p.resized_w == img.width())
                              ? img.data
                              : resize_bilinear(img.data, p.resized_h, p.resized_w);
  out.data = crop_window(resized, p.off_y, p.off_x, p.out_h, p.out_w);
  return out;
}

// Cover-fit resize plus center or seeded random crop.
inline Image crop_resize(const Image& img, int out_h, int out_w, CropMode mode,
                         std::uint64_t seed = 0) {
  Rng rng(seed);
  CropPlan p = plan_crop_resize(img.height(), img.width(), out_h, out_w, mode,
                                mode == CropMode::kRandom ? &rng : nullptr);
  return apply_crop_resize(img, p);
}

}  // namespace constructs
