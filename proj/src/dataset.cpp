#include "constructs/dataset.hpp"

#include "constructs/png_io.hpp"
#include "constructs/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>

namespace fs = std::filesystem;

namespace constructs {

namespace {

std::vector<std::string> list_png_stems(const fs::path& dir) {
  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().extension() != ".png") continue;
    stems.push_back(entry.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  return stems;
}

std::uint8_t quantize(float metric_value) {
  return static_cast<std::uint8_t>(
      std::clamp<long>(std::lround(metric_value * 255.f), 0, 255));
}

}  // namespace

void save_image_png(const Image& img, const std::string& path) {
  const Image m = to_metric(img);
  PngBuffer buf;
  buf.width = m.width();
  buf.height = m.height();
  buf.channels = m.channels();
  buf.pixels.resize(static_cast<std::size_t>(buf.width) * buf.height * buf.channels);
  std::size_t i = 0;
  for (int y = 0; y < buf.height; ++y)
    for (int x = 0; x < buf.width; ++x)
      for (int c = 0; c < buf.channels; ++c) buf.pixels[i++] = quantize(m.data.at(c, y, x));
  write_png(path, buf);
}

Image load_image_png(const std::string& path) {
  const PngBuffer buf = read_png(path);
  Image img;
  img.data = Tensor<float>::zeros({buf.channels, buf.height, buf.width});
  img.range = kModelRange;
  std::size_t i = 0;
  for (int y = 0; y < buf.height; ++y)
    for (int x = 0; x < buf.width; ++x)
      for (int c = 0; c < buf.channels; ++c)
        img.data.at(c, y, x) = static_cast<float>(buf.pixels[i++]) / 255.f * 2.f - 1.f;
  return img;
}

void save_mask_png(const SegmentationMask& mask, const std::string& path) {
  PngBuffer buf;
  buf.width = mask.width();
  buf.height = mask.height();
  buf.channels = 1;
  buf.pixels.resize(static_cast<std::size_t>(buf.width) * buf.height);
  std::size_t i = 0;
  for (int y = 0; y < buf.height; ++y)
    for (int x = 0; x < buf.width; ++x) {
      const int v = mask.labels.at(y, x);
      if (v < 0 || v > 255) throw std::runtime_error("mask: class id outside 8-bit storage");
      buf.pixels[i++] = static_cast<std::uint8_t>(v);
    }
  write_png(path, buf);
}

SegmentationMask load_mask_png(const std::string& path) {
  const PngBuffer buf = read_png(path);
  if (buf.channels != 1)
    throw std::runtime_error("mask: " + path + ": expected single channel");
  SegmentationMask mask;
  mask.labels = Tensor<int>::zeros({buf.height, buf.width});
  int max_class = 0;
  std::size_t i = 0;
  for (int y = 0; y < buf.height; ++y)
    for (int x = 0; x < buf.width; ++x) {
      const int v = buf.pixels[i++];
      mask.labels.at(y, x) = v;
      max_class = std::max(max_class, v);
    }
  mask.num_classes = max_class + 1;
  return mask;
}

DomainDataset load_dataset(const std::string& root, const std::string& domain_tag,
                           bool with_masks) {
  const fs::path base = fs::path(root) / domain_tag;
  const fs::path img_dir = base / "images";
  if (!fs::is_directory(img_dir))
    throw std::runtime_error("dataset: missing directory " + img_dir.string());

  DomainDataset ds;
  ds.domain_tag = domain_tag;
  ds.names = list_png_stems(img_dir);
  if (ds.names.empty())
    throw std::runtime_error("dataset: no png images under " + img_dir.string());

  int channels = -1;
  for (const auto& stem : ds.names) {
    Image img = load_image_png((img_dir / (stem + ".png")).string());
    if (channels < 0) channels = img.channels();
    if (img.channels() != channels)
      throw std::runtime_error("dataset: mixed channel counts at " + stem + ".png");
    ds.images.push_back(std::move(img));
  }

  const fs::path mask_dir = base / "masks";
  if (with_masks && fs::is_directory(mask_dir)) {
    const auto mask_stems = list_png_stems(mask_dir);
    if (mask_stems != ds.names)
      throw std::runtime_error("dataset: mask filenames do not match images under " +
                               mask_dir.string());
    int num_classes = 0;
    for (std::size_t i = 0; i < ds.names.size(); ++i) {
      SegmentationMask m = load_mask_png((mask_dir / (ds.names[i] + ".png")).string());
      if (m.height() != ds.images[i].height() || m.width() != ds.images[i].width())
        throw std::runtime_error("dataset: mask size mismatch at " + ds.names[i] + ".png");
      num_classes = std::max(num_classes, m.num_classes);
      ds.masks.push_back(std::move(m));
    }
    for (auto& m : ds.masks) m.num_classes = num_classes;
  }

  const fs::path groups_path = base / "groups.json";
  if (fs::exists(groups_path)) {
    std::ifstream in(groups_path);
    nlohmann::json j;
    in >> j;
    ds.group_ids.reserve(ds.names.size());
    for (const auto& stem : ds.names) {
      if (!j.contains(stem))
        throw std::runtime_error("dataset: groups.json missing entry for " + stem);
      ds.group_ids.push_back(j.at(stem).get<int>());
    }
  }
  return ds;
}

void save_dataset(const DomainDataset& ds, const std::string& root) {
  const fs::path base = fs::path(root) / ds.domain_tag;
  fs::create_directories(base / "images");
  for (int i = 0; i < ds.size(); ++i)
    save_image_png(ds.images[static_cast<std::size_t>(i)],
                   (base / "images" / (ds.names[static_cast<std::size_t>(i)] + ".png")).string());
  if (ds.has_masks()) {
    fs::create_directories(base / "masks");
    for (int i = 0; i < ds.size(); ++i)
      save_mask_png(ds.masks[static_cast<std::size_t>(i)],
                    (base / "masks" / (ds.names[static_cast<std::size_t>(i)] + ".png")).string());
  }
  if (ds.has_groups()) {
    nlohmann::json j = nlohmann::json::object();
    for (int i = 0; i < ds.size(); ++i)
      j[ds.names[static_cast<std::size_t>(i)]] = ds.group_ids[static_cast<std::size_t>(i)];
    std::ofstream out(base / "groups.json");
    out << j.dump(2) << '\n';
  }
}

SegmentationMask apply_crop_resize(const SegmentationMask& mask, const CropPlan& plan) {
  SegmentationMask out;
  out.num_classes = mask.num_classes;
  Tensor<int> lifted = mask.labels.reshaped({1, mask.height(), mask.width()});
  Tensor<int> resized = (plan.resized_h == mask.height() && plan.resized_w == mask.width())
                            ? lifted
                            : resize_nearest(lifted, plan.resized_h, plan.resized_w);
  Tensor<int> cropped = crop_window(resized, plan.off_y, plan.off_x, plan.out_h, plan.out_w);
  out.labels = cropped.reshaped({plan.out_h, plan.out_w});
  return out;
}

std::pair<Image, SegmentationMask> crop_resize_pair(const Image& img,
                                                    const SegmentationMask& mask, int out_h,
                                                    int out_w, CropMode mode,
                                                    std::uint64_t seed) {
  if (mask.height() != img.height() || mask.width() != img.width())
    throw std::invalid_argument("crop: image and mask sizes differ");
  Rng rng(seed);
  CropPlan plan = plan_crop_resize(img.height(), img.width(), out_h, out_w, mode,
                                   mode == CropMode::kRandom ? &rng : nullptr);
  return {apply_crop_resize(img, plan), apply_crop_resize(mask, plan)};
}

double class_frequency_tv(const std::vector<SegmentationMask>& a,
                          const std::vector<SegmentationMask>& b) {
  auto histogram = [](const std::vector<SegmentationMask>& masks) {
    std::map<int, double> h;
    double total = 0;
    for (const auto& m : masks)
      for (std::int64_t i = 0; i < m.labels.size(); ++i) {
        h[m.labels[i]] += 1;
        total += 1;
      }
    for (auto& [cls, cnt] : h) cnt /= total;
    return h;
  };
  auto ha = histogram(a), hb = histogram(b);
  std::map<int, double> merged = ha;
  for (auto& [cls, p] : hb) merged.try_emplace(cls, 0.0);
  double tv = 0;
  for (auto& [cls, unused] : merged) {
    const double pa = ha.count(cls) ? ha[cls] : 0.0;
    const double pb = hb.count(cls) ? hb[cls] : 0.0;
    tv += std::abs(pa - pb);
  }
  return 0.5 * tv;
}

namespace {

// ---- toy scene synthesis ----

struct Shape {
  int kind;        // 0 ellipse, 1 rectangle, 2 triangle
  int cls;         // 1..num_classes-1
  double cy, cx;   // center, pixels
  double ry, rx;   // half extents, pixels
  double angle;
  double v0x, v0y, v1x, v1y, v2x, v2y;  // triangle vertices
};

Shape draw_shape(Rng& rng, int size, int cls, double rlo, double rhi) {
  Shape s;
  s.kind = static_cast<int>(rng.uniform_int(3));
  s.cls = cls;
  s.cy = rng.uniform(0.15, 0.85) * size;
  s.cx = rng.uniform(0.15, 0.85) * size;
  s.ry = rng.uniform(rlo, rhi) * size;
  s.rx = rng.uniform(rlo, rhi) * size;
  s.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  if (s.kind == 2) {
    const double r = std::max(s.ry, s.rx);
    for (int k = 0; k < 3; ++k) {
      const double a = s.angle + 2.0 * std::numbers::pi * k / 3.0 + rng.uniform(-0.3, 0.3);
      const double d = r * rng.uniform(0.7, 1.2);
      (k == 0 ? s.v0x : k == 1 ? s.v1x : s.v2x) = s.cx + d * std::cos(a);
      (k == 0 ? s.v0y : k == 1 ? s.v1y : s.v2y) = s.cy + d * std::sin(a);
    }
  }
  return s;
}

bool inside(const Shape& s, double y, double x) {
  const double dy = y - s.cy, dx = x - s.cx;
  const double c = std::cos(s.angle), sn = std::sin(s.angle);
  const double u = dx * c + dy * sn;
  const double v = -dx * sn + dy * c;
  switch (s.kind) {
    case 0:
      return (u / s.rx) * (u / s.rx) + (v / s.ry) * (v / s.ry) <= 1.0;
    case 1:
      return std::abs(u) <= s.rx && std::abs(v) <= s.ry;
    default: {
      auto side = [&](double ax, double ay, double bx, double by) {
        return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
      };
      const double d0 = side(s.v0x, s.v0y, s.v1x, s.v1y);
      const double d1 = side(s.v1x, s.v1y, s.v2x, s.v2y);
      const double d2 = side(s.v2x, s.v2y, s.v0x, s.v0y);
      const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
      const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
      return !(has_neg && has_pos);
    }
  }
}

// Metric-space base colors per class; background first. Classes 2 and 3 sit
// close in channel-mean brightness but far apart in hue, so brightness alone
// cannot separate them.
constexpr double kPaletteX[][3] = {
    {0.10, 0.11, 0.13},  // background, dark
    {0.85, 0.72, 0.78},  // bright
    {0.20, 0.55, 0.50},  // teal, mean 0.4167
    {0.55, 0.50, 0.28},  // olive, mean 0.4433
    {0.30, 0.25, 0.70},  // extra classes cycle if requested
    {0.70, 0.35, 0.20},
};
constexpr int kPaletteSize = 6;

// Channel tints for the textured domain; each rows averages to about 1 so the
// texture gray level stays the class brightness.
constexpr double kTintY[][3] = {
    {0.90, 0.95, 1.15}, {1.08, 0.97, 0.95}, {0.80, 1.15, 1.05},
    {1.15, 1.05, 0.80}, {0.95, 0.90, 1.15}, {1.10, 1.00, 0.90},
};

struct SceneParams {
  std::vector<Shape> shapes;
};

SceneParams sample_scene(Rng& rng, int size, int num_classes, bool skewed) {
  SceneParams sc;
  const int num_shapes = skewed ? 3 + static_cast<int>(rng.uniform_int(3))
                                : 2 + static_cast<int>(rng.uniform_int(3));
  for (int i = 0; i < num_shapes; ++i) {
    int cls;
    double rlo, rhi;
    if (!skewed) {
      cls = 1 + static_cast<int>(rng.uniform_int(num_classes - 1));
      rlo = 0.10;
      rhi = 0.22;
    } else {
      // lopsided class draw plus class-dependent sizes
      const double u = rng.uniform();
      const int fg = num_classes - 1;
      if (fg >= 3) {
        cls = u < 0.15 ? 1 : (u < 0.45 ? 2 : 3);
        if (u >= 0.45 && fg > 3) cls = 3 + static_cast<int>(rng.uniform_int(fg - 2));
      } else if (fg == 2) {
        cls = u < 0.25 ? 1 : 2;
      } else {
        cls = 1;
      }
      rlo = cls == 1 ? 0.08 : cls == 2 ? 0.10 : 0.14;
      rhi = cls == 1 ? 0.15 : cls == 2 ? 0.20 : 0.26;
    }
    sc.shapes.push_back(draw_shape(rng, size, cls, rlo, rhi));
  }
  return sc;
}

Tensor<int> rasterize(const SceneParams& sc, int size) {
  Tensor<int> mask({size, size});
  for (const auto& s : sc.shapes)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (inside(s, y + 0.5, x + 0.5)) mask.at(y, x) = s.cls;
  return mask;
}

Image render_flat(const Tensor<int>& mask, int num_classes, Rng& rng) {
  const int size = mask.dim(0);
  std::vector<std::array<double, 3>> colors(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c)
    for (int ch = 0; ch < 3; ++ch)
      colors[static_cast<std::size_t>(c)][static_cast<std::size_t>(ch)] =
          kPaletteX[c % kPaletteSize][ch] + rng.uniform(-0.02, 0.02);
  Image img;
  img.data = Tensor<float>::zeros({3, size, size});
  img.range = kMetricRange;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const auto& col = colors[static_cast<std::size_t>(mask.at(y, x))];
      for (int ch = 0; ch < 3; ++ch) {
        const double v = col[static_cast<std::size_t>(ch)] + 0.008 * rng.normal();
        img.data.at(ch, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return img;
}

Image render_textured(const Tensor<int>& mask, int num_classes, Rng& rng, int group,
                      int num_groups) {
  const int size = mask.dim(0);

  const double stripe_angle = rng.uniform(0.0, std::numbers::pi);
  const double stripe_period = rng.uniform(3.5, 6.0);
  const double stripe_phase = rng.uniform(0.0, 1.0);
  const double blob_px = rng.uniform(10.0, 18.0);
  const double blob_py = rng.uniform(10.0, 18.0);
  const double blob_fx = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double blob_fy = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double dot_period = size / 8.0;
  const double dot_ox = rng.uniform(0.0, dot_period);
  const double dot_oy = rng.uniform(0.0, dot_period);

  // per-group lighting direction with a little per-image wobble
  const double theta = 2.0 * std::numbers::pi * group / std::max(1, num_groups) +
                       rng.uniform(-0.25, 0.25);
  const double amp = rng.uniform(0.20, 0.40);
  const double lc = std::cos(theta), ls = std::sin(theta);

  Image img;
  img.data = Tensor<float>::zeros({3, size, size});
  img.range = kMetricRange;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const int cls = mask.at(y, x);
      double v;
      switch (cls == 0 ? 0 : 1 + (cls - 1) % 3) {
        case 0:
          v = 0.08 + 0.07 * rng.uniform();
          break;
        case 1:
          v = 0.78 + 0.05 * std::sin(2.0 * std::numbers::pi * x / blob_px + blob_fx) *
                          std::cos(2.0 * std::numbers::pi * y / blob_py + blob_fy);
          break;
        case 2: {
          const double t = (x * std::cos(stripe_angle) + y * std::sin(stripe_angle)) /
                               stripe_period + stripe_phase;
          v = (t - std::floor(t)) < 0.5 ? 0.30 : 0.55;
          break;
        }
        default: {
          const double gy = std::fmod(y + dot_oy, dot_period) - dot_period / 2;
          const double gx = std::fmod(x + dot_ox, dot_period) - dot_period / 2;
          v = std::sqrt(gx * gx + gy * gy) < 0.35 * dot_period ? 0.32 : 0.52;
          break;
        }
      }
      const double light =
          1.0 + amp * 2.0 * ((static_cast<double>(x) / size - 0.5) * lc +
                             (static_cast<double>(y) / size - 0.5) * ls);
      for (int ch = 0; ch < 3; ++ch) {
        const double tinted = v * kTintY[cls % kPaletteSize][ch];
        const double out = tinted * light + 0.01 * rng.normal();
        img.data.at(ch, y, x) = static_cast<float>(std::clamp(out, 0.0, 1.0));
      }
    }
  return img;
}

Image quantized_model_image(const Image& metric_img) {
  Image out;
  out.data = metric_img.data;
  out.range = kModelRange;
  for (std::int64_t i = 0; i < out.data.size(); ++i) {
    const float q = static_cast<float>(quantize(metric_img.data[i]));
    out.data[i] = q / 255.f * 2.f - 1.f;
  }
  return out;
}

std::string stem_for(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", i);
  return buf;
}

}  // namespace

std::pair<DomainDataset, DomainDataset> make_toy_domains(int num_images, int image_size,
                                                         int num_classes, std::uint64_t seed,
                                                         int num_groups) {
  if (num_images < 1 || image_size < 16 || num_classes < 2 || num_groups < 1)
    throw std::invalid_argument("toy domains: bad arguments");

  Rng root(seed);
  Rng rng_x = root.fork(1);
  Rng rng_y = root.fork(2);

  DomainDataset X, Y;
  X.domain_tag = "X";
  Y.domain_tag = "Y";
  for (int i = 0; i < num_images; ++i) {
    const int group = i % num_groups;
    {
      Rng r = rng_x.fork(static_cast<std::uint64_t>(i));
      SceneParams sc = sample_scene(r, image_size, num_classes, /*skewed=*/false);
      Tensor<int> m = rasterize(sc, image_size);
      X.images.push_back(quantized_model_image(render_flat(m, num_classes, r)));
      X.masks.push_back({m, num_classes});
      X.names.push_back(stem_for(i));
      X.group_ids.push_back(group);
    }
    {
      Rng r = rng_y.fork(static_cast<std::uint64_t>(i));
      SceneParams sc = sample_scene(r, image_size, num_classes, /*skewed=*/true);
      Tensor<int> m = rasterize(sc, image_size);
      Y.images.push_back(quantized_model_image(render_textured(m, num_classes, r, group,
                                                               num_groups)));
      Y.masks.push_back({m, num_classes});
      Y.names.push_back(stem_for(i));
      Y.group_ids.push_back(group);
    }
  }
  return {std::move(X), std::move(Y)};
}

}  // namespace constructs
