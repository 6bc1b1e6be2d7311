#pragma once

// Small encoder-decoder segmentation network (4 downsampling stages, 4
// upsampling stages, skip connections) used by both evaluation protocols.
// The backbone is identified by name so heavier models can slot in behind
// the same spec.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "constructs/dataset.hpp"
#include "constructs/networks.hpp"
#include "constructs/serialize.hpp"

namespace constructs {

struct SegmenterSpec {
  std::string backbone = "unet_small";
  int num_classes = 4;
  int base_width = 16;
  int train_iters = 600;
  int batch_size = 1;
  double learning_rate = 1e-3;
  int foreground_class = 1;  // the class eval-2 reports dice on

  void validate() const {
    if (backbone != "unet_small")
      throw std::invalid_argument("segmenter: unknown backbone '" + backbone +
                                  "' (available: unet_small)");
    if (num_classes < 2) throw std::invalid_argument("segmenter: num_classes must be >= 2");
    if (base_width < 1) throw std::invalid_argument("segmenter: base_width must be >= 1");
    if (train_iters < 1) throw std::invalid_argument("segmenter: train_iters must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("segmenter: batch_size must be >= 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("segmenter: learning_rate must be > 0");
    if (foreground_class < 0 || foreground_class >= num_classes)
      throw std::invalid_argument("segmenter: foreground_class outside [0, num_classes)");
  }
};

inline ordered_json to_json(const SegmenterSpec& s) {
  ordered_json j;
  j["backbone"] = s.backbone;
  j["num_classes"] = s.num_classes;
  j["base_width"] = s.base_width;
  j["train_iters"] = s.train_iters;
  j["batch_size"] = s.batch_size;
  j["learning_rate"] = s.learning_rate;
  j["foreground_class"] = s.foreground_class;
  return j;
}

inline SegmenterSpec segmenter_spec_from_json(const ordered_json& j, const std::string& path) {
  SegmenterSpec s;
  JsonReader r(j, path);
  r.field("backbone", s.backbone);
  r.field("num_classes", s.num_classes);
  r.field("base_width", s.base_width);
  r.field("train_iters", s.train_iters);
  r.field("batch_size", s.batch_size);
  r.field("learning_rate", s.learning_rate);
  r.field("foreground_class", s.foreground_class);
  r.done();
  return s;
}

template <typename T>
class Segmenter {
 public:
  SegmenterSpec spec;
  Params<T> params;

  struct Conv {
    int w = -1, b = -1;
  };
  Conv enc[5];   // stride 1, then four stride-2 stages
  Conv dec[4];   // after each nearest-neighbor upsample + skip concat
  Conv head;     // 1x1 to class logits

  static Segmenter build(const SegmenterSpec& spec, std::uint64_t seed) {
    spec.validate();
    Segmenter s;
    s.spec = spec;
    Rng rng(seed, 0x736567);
    auto conv = [&](const std::string& name, int in_ch, int out_ch, int k) {
      Conv c;
      c.w = s.params.add(name + ".w", normal_init<T>({out_ch, in_ch, k, k}, rng, 0.02));
      c.b = s.params.add(name + ".b", Tensor<T>::zeros({out_ch}));
      return c;
    };
    const int w = spec.base_width;
    const int widths[5] = {w, 2 * w, 4 * w, 8 * w, 8 * w};
    s.enc[0] = conv("s.enc0", 3, widths[0], 3);
    for (int i = 1; i < 5; ++i) s.enc[i] = conv("s.enc" + std::to_string(i), widths[i - 1], widths[i], 3);
    const int dec_out[4] = {4 * w, 2 * w, w, w};
    for (int i = 0; i < 4; ++i) {
      const int skip = widths[3 - i];
      const int in_ch = (i == 0 ? widths[4] : dec_out[i - 1]) + skip;
      s.dec[i] = conv("s.dec" + std::to_string(i), in_ch, dec_out[i], 3);
    }
    s.head = conv("s.head", dec_out[3], spec.num_classes, 1);
    return s;
  }

  struct Pass {
    Var<T> logits;
    std::vector<Var<T>> enc_feats;  // e1..e4, for the Frechet feature extractor
  };

  Pass forward(Tape<T>& tape, ParamBind<T>& bind, Var<T> x) const {
    const auto& xv = x.value();
    if (xv.dim(0) != 3) throw std::invalid_argument("segmenter: expected 3-channel input");
    if (xv.dim(1) % 16 != 0 || xv.dim(2) % 16 != 0)
      throw std::invalid_argument("segmenter: height and width must be multiples of 16");
    (void)tape;
    auto cv = [&](Var<T> h, const Conv& c, int stride, int pad) {
      if (pad) h = ad::pad2d(h, pad, pad, ad::PadMode::kZero);
      return ad::conv2d(h, bind.var(params, c.w), bind.var(params, c.b), stride);
    };
    auto stage = [&](Var<T> h, const Conv& c, int stride) {
      return ad::relu(ad::instance_norm(cv(h, c, stride, 1)));
    };

    Pass pass;
    Var<T> e0 = stage(x, enc[0], 1);
    Var<T> h = e0;
    std::vector<Var<T>> skips{e0};
    for (int i = 1; i < 5; ++i) {
      h = stage(h, enc[i], 2);
      skips.push_back(h);
      pass.enc_feats.push_back(h);
    }
    for (int i = 0; i < 4; ++i)
      h = stage(ad::concat_channels(ad::upsample_nearest2(h), skips[static_cast<std::size_t>(3 - i)]),
                dec[i], 1);
    pass.logits = cv(h, head, 1, 0);
    return pass;
  }
};

// ---- training ----

// Pixelwise cross-entropy with Adam; seeded with-replacement sampling. When
// init is given, optimization continues from its weights (fine-tuning) with
// a fresh optimizer.
template <typename T>
Segmenter<T> train_segmenter(const SegmenterSpec& spec, const DomainDataset& data,
                             std::uint64_t seed, const Segmenter<T>* init = nullptr) {
  spec.validate();
  if (!data.has_masks()) throw std::invalid_argument("segmenter: training data carries no masks");
  if (data.size() < 1) throw std::invalid_argument("segmenter: empty training set");

  Segmenter<T> seg = Segmenter<T>::build(spec, seed);
  if (init) {
    if (init->params.entries.size() != seg.params.entries.size())
      throw std::invalid_argument("segmenter: fine-tune source has a different architecture");
    for (std::size_t i = 0; i < seg.params.entries.size(); ++i)
      seg.params.entries[i].value = init->params.entries[i].value;
  }
  Adam<T> opt;
  opt.beta1 = 0.9;
  opt.beta2 = 0.999;
  Rng rng(seed, 0x7365677431);

  for (int it = 0; it < spec.train_iters; ++it) {
    Tape<T> tape;
    ParamBind<T> bind(tape, true);
    Var<T> loss;
    for (int b = 0; b < spec.batch_size; ++b) {
      const int idx = static_cast<int>(rng.uniform_int(static_cast<std::int64_t>(data.size())));
      const Image& img = data.images[static_cast<std::size_t>(idx)];
      if (img.range != kModelRange)
        throw std::invalid_argument("segmenter: training images must be in model range");
      auto pass = seg.forward(tape, bind, tape.constant(img.data.template cast<T>()));
      Var<T> ce = ad::softmax_ce_pixels(pass.logits, data.masks[static_cast<std::size_t>(idx)].labels);
      loss = loss.valid() ? ad::add(loss, ce) : ce;
    }
    if (spec.batch_size > 1) loss = ad::scale(loss, T(1) / static_cast<T>(spec.batch_size));
    tape.backward(loss);
    opt.step({{&seg.params, &bind}}, tape, spec.learning_rate);
  }
  return seg;
}

template <typename T>
SegmentationMask predict(const Segmenter<T>& seg, const Image& img) {
  if (img.range != kModelRange)
    throw std::invalid_argument("segmenter: prediction input must be in model range");
  Tape<T> tape;
  ParamBind<T> bind(tape, false);
  auto pass = seg.forward(tape, bind, tape.constant(img.data.template cast<T>()));
  const Tensor<T>& logits = pass.logits.value();
  const int k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  SegmentationMask mask;
  mask.num_classes = seg.spec.num_classes;
  mask.labels = Tensor<int>::zeros({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best = 0;
      T best_v = logits.at(0, y, x);
      for (int c = 1; c < k; ++c)
        if (logits.at(c, y, x) > best_v) {
          best_v = logits.at(c, y, x);
          best = c;
        }
      mask.labels.at(y, x) = best;
    }
  return mask;
}

// Spatially averaged encoder activations at the given depth (1..4); the
// feature populations fed into the Frechet distance.
template <typename T>
std::vector<double> encoder_features(const Segmenter<T>& seg, const Image& img, int depth) {
  if (depth < 1 || depth > 4)
    throw std::invalid_argument("segmenter: feature depth must lie in [1,4]");
  if (img.range != kModelRange)
    throw std::invalid_argument("segmenter: feature input must be in model range");
  Tape<T> tape;
  ParamBind<T> bind(tape, false);
  auto pass = seg.forward(tape, bind, tape.constant(img.data.template cast<T>()));
  const Tensor<T>& f = pass.enc_feats[static_cast<std::size_t>(depth - 1)].value();
  std::vector<double> out(static_cast<std::size_t>(f.dim(0)));
  const int hw = f.dim(1) * f.dim(2);
  for (int c = 0; c < f.dim(0); ++c) {
    double s = 0;
    for (int i = 0; i < hw; ++i) s += static_cast<double>(f.data[c * hw + i]);
    out[static_cast<std::size_t>(c)] = s / hw;
  }
  return out;
}

}  // namespace constructs
