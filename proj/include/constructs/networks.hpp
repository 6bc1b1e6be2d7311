#pragma once

#include "constructs/autodiff.hpp"
#include "constructs/rng.hpp"
#include "constructs/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace constructs {

// ---- parameter storage ----

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> value;
  Tensor<T> m, v;  // Adam moments, allocated on first optimizer step
};

template <typename T>
struct Params {
  std::vector<ParamEntry<T>> entries;

  int add(std::string name, Tensor<T> init) {
    for (const auto& e : entries)
      if (e.name == name) throw std::logic_error("params: duplicate name " + name);
    entries.push_back({std::move(name), std::move(init), {}, {}});
    return static_cast<int>(entries.size()) - 1;
  }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].name == name) return static_cast<int>(i);
    return -1;
  }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.value.size();
    return n;
  }
};

// Per-tape binding of a parameter store. Parameters become tape leaves on
// first use, so two forward passes on one tape share leaves and their
// gradients accumulate. A frozen bind emits constants instead.
template <typename T>
struct ParamBind {
  Tape<T>* tape = nullptr;
  bool trainable = true;
  const void* owner = nullptr;  // one bind serves exactly one store
  std::vector<Var<T>> vars;

  ParamBind(Tape<T>& t, bool trainable_) : tape(&t), trainable(trainable_) {}

  Var<T> var(const Params<T>& p, int idx) {
    if (!owner) owner = &p;
    if (owner != &p) throw std::logic_error("param bind: reused across parameter stores");
    if (vars.size() != p.entries.size()) vars.resize(p.entries.size());
    auto& v = vars[static_cast<std::size_t>(idx)];
    if (!v.valid()) v = tape->input(p.entries[static_cast<std::size_t>(idx)].value, trainable);
    return v;
  }
};

template <typename T>
struct Adam {
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;

  void step(std::vector<std::pair<Params<T>*, ParamBind<T>*>> groups, Tape<T>& tape,
            double lr) {
    ++t;
    const T bc1 = static_cast<T>(1.0 - std::pow(beta1, static_cast<double>(t)));
    const T bc2 = static_cast<T>(1.0 - std::pow(beta2, static_cast<double>(t)));
    for (auto& [params, bind] : groups) {
      for (std::size_t i = 0; i < params->entries.size(); ++i) {
        if (i >= bind->vars.size() || !bind->vars[i].valid()) continue;
        auto& e = params->entries[i];
        const auto& g = tape.grad(bind->vars[i]).data;
        if (e.m.size() == 0) {
          e.m = Tensor<T>::zeros(e.value.dims);
          e.v = Tensor<T>::zeros(e.value.dims);
        }
        e.m.data = static_cast<T>(beta1) * e.m.data + static_cast<T>(1.0 - beta1) * g;
        e.v.data = static_cast<T>(beta2) * e.v.data + static_cast<T>(1.0 - beta2) * g.square();
        e.value.data -= static_cast<T>(lr) * (e.m.data / bc1) /
                        ((e.v.data / bc2).sqrt() + static_cast<T>(eps));
      }
    }
  }
};

// ---- init ----

template <typename T>
Tensor<T> normal_init(std::vector<int> dims, Rng& rng, double stddev = 0.02) {
  Tensor<T> t(std::move(dims));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t.data[i] = static_cast<T>(rng.normal() * stddev);
  return t;
}

// ---- network specs ----

// Residual encoder-decoder. Learnable conv units count from the stem as unit
// 1: stem, two downsamplers, two convs per residual block, two upsamplers,
// output projection. A tap takes the unit's output (after its norm and
// activation; after the skip-add for the second conv of a block).
struct GeneratorSpec {
  int input_channels = 3;
  int output_channels = 3;
  int base_width = 64;
  int num_residual_blocks = 9;
  std::vector<int> feature_tap_layers = {1, 4, 8, 12, 16};

  int num_units() const { return 6 + 2 * num_residual_blocks; }

  void validate() const {
    if (input_channels != 1 && input_channels != 3)
      throw std::invalid_argument("generator spec: input_channels must be 1 or 3");
    if (output_channels != 1 && output_channels != 3)
      throw std::invalid_argument("generator spec: output_channels must be 1 or 3");
    if (base_width < 1) throw std::invalid_argument("generator spec: base_width < 1");
    if (num_residual_blocks < 1)
      throw std::invalid_argument("generator spec: num_residual_blocks < 1");
    if (feature_tap_layers.empty())
      throw std::invalid_argument("generator spec: no feature taps");
    int prev = 0;
    for (int tap : feature_tap_layers) {
      if (tap <= prev) throw std::invalid_argument("generator spec: taps must strictly increase");
      if (tap < 1 || tap > num_units())
        throw std::invalid_argument("generator spec: tap outside [1," +
                                    std::to_string(num_units()) + "]");
      prev = tap;
    }
  }
};

// PatchGAN: num_downsampling_layers stride-2 convs, one stride-1 widening
// conv, then a 1-channel score projection. Leaky ReLU 0.2 between convs and
// spectral normalization on every conv weight when enabled.
struct DiscriminatorSpec {
  int input_channels = 3;
  int base_width = 64;
  int num_downsampling_layers = 3;
  bool use_spectral_norm = true;

  int num_convs() const { return num_downsampling_layers + 2; }

  void validate() const {
    if (input_channels != 1 && input_channels != 3)
      throw std::invalid_argument("discriminator spec: input_channels must be 1 or 3");
    if (base_width < 1) throw std::invalid_argument("discriminator spec: base_width < 1");
    if (num_downsampling_layers < 1)
      throw std::invalid_argument("discriminator spec: num_downsampling_layers < 1");
  }
};

// Two-layer MLP per tapped feature map, ending in row-wise L2 normalization.
struct ProjectionHeadSpec {
  int width = 256;

  void validate() const {
    if (width < 1) throw std::invalid_argument("projection head spec: width < 1");
  }
};

// ---- generator ----

template <typename T>
class Generator {
 public:
  GeneratorSpec spec;
  Params<T> params;

  struct Conv {
    int w = -1, b = -1;
  };
  Conv stem, down1, down2, up1, up2, out_proj;
  std::vector<std::array<Conv, 2>> res;

  struct Pass {
    std::vector<Var<T>> taps;
    Var<T> out;  // invalid when the pass stopped early
  };

  static Generator build(const GeneratorSpec& spec, std::uint64_t seed) {
    spec.validate();
    Generator g;
    g.spec = spec;
    Rng rng(seed, 0x67656e);
    const int b = spec.base_width;
    auto conv = [&](const std::string& name, int in, int out, int k) {
      Conv c;
      c.w = g.params.add(name + ".w", normal_init<T>({out, in, k, k}, rng));
      c.b = g.params.add(name + ".b", Tensor<T>::zeros({out}));
      return c;
    };
    g.stem = conv("g.stem", spec.input_channels, b, 7);
    g.down1 = conv("g.down1", b, 2 * b, 3);
    g.down2 = conv("g.down2", 2 * b, 4 * b, 3);
    for (int i = 0; i < spec.num_residual_blocks; ++i) {
      const std::string base = "g.res" + std::to_string(i);
      g.res.push_back({conv(base + ".conv1", 4 * b, 4 * b, 3),
                       conv(base + ".conv2", 4 * b, 4 * b, 3)});
    }
    g.up1 = conv("g.up1", 4 * b, 2 * b, 3);
    g.up2 = conv("g.up2", 2 * b, b, 3);
    g.out_proj = conv("g.out", b, spec.output_channels, 7);
    return g;
  }

  int max_tap() const { return spec.feature_tap_layers.back(); }

  using UnitHook = std::function<Var<T>(int unit, Var<T> h)>;

  // stop_after_unit > 0 ends the pass once that unit has produced its output;
  // used to skip the decoder when only encoder features are needed. The hook
  // may replace any unit's output before taps record it and before downstream
  // units consume it.
  Pass forward(Tape<T>& tape, ParamBind<T>& bind, Var<T> x, int stop_after_unit = 0,
               const UnitHook& hook = nullptr) const {
    const auto& xv = x.value();
    if (xv.dim(0) != spec.input_channels)
      throw std::invalid_argument("generator: input channel mismatch");
    if (xv.dim(1) % 4 != 0 || xv.dim(2) % 4 != 0)
      throw std::invalid_argument("generator: input height and width must be multiples of 4");
    (void)tape;

    Pass pass;
    int unit = 0;
    auto note = [&](Var<T>& h) {
      ++unit;
      if (hook) h = hook(unit, h);
      if (std::binary_search(spec.feature_tap_layers.begin(), spec.feature_tap_layers.end(),
                             unit))
        pass.taps.push_back(h);
      return stop_after_unit > 0 && unit >= stop_after_unit;
    };
    auto cv = [&](Var<T> h, const Conv& c, int stride) {
      return ad::conv2d(h, bind.var(params, c.w), bind.var(params, c.b), stride);
    };

    Var<T> h = x;
    h = ad::relu(ad::instance_norm(cv(ad::pad2d(h, 3, 3, ad::PadMode::kReflect), stem, 1)));
    if (note(h)) return pass;
    h = ad::relu(ad::instance_norm(cv(ad::pad2d(h, 1, 1, ad::PadMode::kZero), down1, 2)));
    if (note(h)) return pass;
    h = ad::relu(ad::instance_norm(cv(ad::pad2d(h, 1, 1, ad::PadMode::kZero), down2, 2)));
    if (note(h)) return pass;
    for (const auto& block : res) {
      Var<T> r = ad::relu(ad::instance_norm(
          cv(ad::pad2d(h, 1, 1, ad::PadMode::kReflect), block[0], 1)));
      if (note(r)) return pass;
      Var<T> r2 = ad::instance_norm(cv(ad::pad2d(r, 1, 1, ad::PadMode::kReflect), block[1], 1));
      h = ad::add(h, r2);
      if (note(h)) return pass;
    }
    h = ad::relu(ad::instance_norm(
        cv(ad::pad2d(ad::upsample_nearest2(h), 1, 1, ad::PadMode::kZero), up1, 1)));
    if (note(h)) return pass;
    h = ad::relu(ad::instance_norm(
        cv(ad::pad2d(ad::upsample_nearest2(h), 1, 1, ad::PadMode::kZero), up2, 1)));
    if (note(h)) return pass;
    h = ad::tanh_op(cv(ad::pad2d(h, 3, 3, ad::PadMode::kReflect), out_proj, 1));
    note(h);
    pass.out = h;
    return pass;
  }

  // channel count of each tapped unit, for sizing projection heads
  std::vector<int> tap_channels() const {
    const int b = spec.base_width;
    std::vector<int> out;
    for (int tap : spec.feature_tap_layers) {
      if (tap == 1)
        out.push_back(b);
      else if (tap == 2)
        out.push_back(2 * b);
      else if (tap <= 3 + 2 * spec.num_residual_blocks)
        out.push_back(4 * b);
      else if (tap == 4 + 2 * spec.num_residual_blocks)
        out.push_back(2 * b);
      else if (tap == 5 + 2 * spec.num_residual_blocks)
        out.push_back(b);
      else
        out.push_back(spec.output_channels);
    }
    return out;
  }
};

// no-grad full pass
template <typename T>
Tensor<T> translate_image(const Generator<T>& gen, const Tensor<T>& x) {
  Tape<T> tape;
  ParamBind<T> bind(tape, false);
  auto pass = gen.forward(tape, bind, tape.constant(x));
  return pass.out.value();
}

// tapped encoder features as plain tensors; no state is touched, same input
// and weights always give the same maps
template <typename T>
std::vector<Tensor<T>> extract_features(const Generator<T>& gen, const Tensor<T>& x) {
  Tape<T> tape;
  ParamBind<T> bind(tape, false);
  auto pass = gen.forward(tape, bind, tape.constant(x), gen.max_tap());
  std::vector<Tensor<T>> out;
  out.reserve(pass.taps.size());
  for (auto v : pass.taps) out.push_back(v.value());
  return out;
}

// ---- discriminator ----

template <typename T>
class Discriminator {
 public:
  DiscriminatorSpec spec;
  Params<T> params;

  struct Conv {
    int w = -1, b = -1;
    int in_ch = 0, out_ch = 0, stride = 1;
  };
  std::vector<Conv> convs;

  struct SnBuffers {
    Tensor<T> u, v;
  };
  std::vector<SnBuffers> sn;  // parallel to convs when spectral norm is on

  static Discriminator build(const DiscriminatorSpec& spec, std::uint64_t seed) {
    spec.validate();
    Discriminator d;
    d.spec = spec;
    Rng rng(seed, 0x64697363);
    int in = spec.input_channels;
    int width = spec.base_width;
    auto conv = [&](int idx, int out, int stride) {
      Conv c;
      c.w = d.params.add("d.conv" + std::to_string(idx) + ".w",
                         normal_init<T>({out, in, 4, 4}, rng));
      c.b = d.params.add("d.conv" + std::to_string(idx) + ".b", Tensor<T>::zeros({out}));
      c.in_ch = in;
      c.out_ch = out;
      c.stride = stride;
      d.convs.push_back(c);
      in = out;
    };
    conv(0, width, 2);
    for (int i = 1; i < spec.num_downsampling_layers; ++i) {
      width = std::min(width * 2, 8 * spec.base_width);
      conv(i, width, 2);
    }
    width = std::min(width * 2, 8 * spec.base_width);
    conv(spec.num_downsampling_layers, width, 1);
    conv(spec.num_downsampling_layers + 1, 1, 1);

    if (spec.use_spectral_norm) {
      for (const auto& c : d.convs) {
        SnBuffers buf;
        const int rows = c.out_ch, cols = c.in_ch * 16;
        buf.u = normal_init<T>({rows}, rng, 1.0);
        buf.v = Tensor<T>::zeros({cols});
        d.sn.push_back(std::move(buf));
      }
      // converge the direction estimates against the initial weights; near
      // the fixed point the u'Wv estimate is accurate even when the top
      // singular values are close, so a settled estimate is a safe stop
      std::vector<double> prev(d.convs.size(), 0.0);
      for (int it = 0; it < 2000; ++it) {
        d.power_iterate();
        bool settled = true;
        for (std::size_t i = 0; i < d.convs.size(); ++i) {
          const double s = d.sigma_estimate(static_cast<int>(i));
          if (std::abs(s - prev[i]) > 1e-9 * std::max(std::abs(s), 1e-12)) settled = false;
          prev[i] = s;
        }
        if (settled) break;
      }
    }
    return d;
  }

  // u'Wv with the current direction buffers
  double sigma_estimate(int conv_idx) const {
    const auto& c = convs[static_cast<std::size_t>(conv_idx)];
    const auto& wt = params.entries[static_cast<std::size_t>(c.w)].value;
    const int rows = c.out_ch, cols = c.in_ch * 16;
    using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
    Eigen::Map<const Vec> u(sn[static_cast<std::size_t>(conv_idx)].u.data.data(), rows);
    Eigen::Map<const Vec> v(sn[static_cast<std::size_t>(conv_idx)].v.data.data(), cols);
    return static_cast<double>(u.dot(wt.mat(rows, cols) * v));
  }

  // one power-iteration update of every conv's direction vectors
  void power_iterate() {
    if (!spec.use_spectral_norm) return;
    using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      const auto& wt = params.entries[static_cast<std::size_t>(convs[i].w)].value;
      const int rows = convs[i].out_ch, cols = convs[i].in_ch * 16;
      auto W = wt.mat(rows, cols);
      Eigen::Map<Vec> u(sn[i].u.data.data(), rows);
      Eigen::Map<Vec> v(sn[i].v.data.data(), cols);
      v = W.transpose() * u;
      v /= v.norm() + static_cast<T>(1e-12);
      u = W * v;
      u /= u.norm() + static_cast<T>(1e-12);
    }
  }

  // largest singular value of the normalized weight, for checks; the power
  // iteration starts from the stored direction so ||Wx|| begins at the u'Wv
  // estimate and refines monotonically toward the true norm
  double normalized_spectral_norm(int conv_idx) const {
    const auto& c = convs[static_cast<std::size_t>(conv_idx)];
    const auto& wt = params.entries[static_cast<std::size_t>(c.w)].value;
    const int rows = c.out_ch, cols = c.in_ch * 16;
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
    using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1>;
    Mat W = wt.mat(rows, cols).template cast<double>();
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> vm(
        sn[static_cast<std::size_t>(conv_idx)].v.data.data(), cols);
    Vec x = vm.template cast<double>();
    x.normalize();
    double s = (W * x).norm(), prev = 0;
    for (int it = 0; it < 5000 && std::abs(s - prev) > 1e-13 * s; ++it) {
      prev = s;
      x = (W.transpose() * (W * x)).normalized();
      s = (W * x).norm();
    }
    return s / sigma_estimate(conv_idx);
  }

  // Patch score map. A training-mode pass runs one power iteration first;
  // eval-mode passes leave the direction buffers untouched.
  Var<T> forward(Tape<T>& tape, ParamBind<T>& bind, Var<T> x, bool training) {
    (void)tape;
    if (training) power_iterate();
    Var<T> h = x;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      const auto& c = convs[i];
      Var<T> w = bind.var(params, c.w);
      if (spec.use_spectral_norm) {
        Var<T> sigma = ad::spectral_sigma(w, sn[i].u, sn[i].v, c.out_ch, c.in_ch * 16);
        w = ad::div_scalar(w, sigma);
      }
      h = ad::conv2d(ad::pad2d(h, 1, 1, ad::PadMode::kZero), w, bind.var(params, c.b),
                     c.stride);
      if (i + 1 < convs.size()) h = ad::leaky_relu(h, T(0.2));
    }
    return h;
  }
};

// score map without gradients
template <typename T>
Tensor<T> discriminator_scores(Discriminator<T>& d, const Tensor<T>& x) {
  Tape<T> tape;
  ParamBind<T> bind(tape, false);
  return d.forward(tape, bind, tape.constant(x), false).value();
}

// ---- projection heads ----

template <typename T>
class ProjectionHeads {
 public:
  ProjectionHeadSpec spec;
  std::vector<int> in_channels;  // one tapped layer each
  Params<T> params;

  struct Layer {
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
  };
  std::vector<Layer> layers;

  static ProjectionHeads build(const ProjectionHeadSpec& spec, std::vector<int> in_channels,
                               std::uint64_t seed) {
    spec.validate();
    ProjectionHeads h;
    h.spec = spec;
    h.in_channels = std::move(in_channels);
    Rng rng(seed, 0x68656164);
    for (std::size_t l = 0; l < h.in_channels.size(); ++l) {
      const std::string base = "h.l" + std::to_string(l);
      Layer lay;
      lay.w1 = h.params.add(base + ".fc1.w",
                            normal_init<T>({spec.width, h.in_channels[l]}, rng));
      lay.b1 = h.params.add(base + ".fc1.b", Tensor<T>::zeros({spec.width}));
      lay.w2 = h.params.add(base + ".fc2.w", normal_init<T>({spec.width, spec.width}, rng));
      lay.b2 = h.params.add(base + ".fc2.b", Tensor<T>::zeros({spec.width}));
      h.layers.push_back(lay);
    }
    return h;
  }

  // rows [S,C_l] -> unit-norm rows [S,width]
  Var<T> project(Tape<T>& tape, ParamBind<T>& bind, int layer, Var<T> rows) const {
    (void)tape;
    const auto& lay = layers[static_cast<std::size_t>(layer)];
    Var<T> h = ad::linear(rows, bind.var(params, lay.w1), bind.var(params, lay.b1));
    h = ad::relu(h);
    h = ad::linear(h, bind.var(params, lay.w2), bind.var(params, lay.b2));
    return ad::rows_l2_normalize(h);
  }
};

// Samples the same spatial locations from two matching feature pyramids and
// projects both through the heads.
template <typename T>
struct PairedProjections {
  std::vector<Var<T>> a, b;     // per layer, [S_l, width] unit-norm rows
  std::vector<int> num_locations;  // S_l per layer
};

template <typename T>
PairedProjections<T> sample_and_project(Tape<T>& tape, const ProjectionHeads<T>& heads,
                                        ParamBind<T>& bind,
                                        const std::vector<Var<T>>& feats_a,
                                        const std::vector<Var<T>>& feats_b,
                                        int num_locations, Rng& rng) {
  if (feats_a.size() != feats_b.size() || feats_a.size() != heads.layers.size())
    throw std::invalid_argument("sample_and_project: layer count mismatch");
  PairedProjections<T> out;
  for (std::size_t l = 0; l < feats_a.size(); ++l) {
    const auto& fa = feats_a[l].value();
    const auto& fb = feats_b[l].value();
    if (fa.dims != fb.dims)
      throw std::invalid_argument("sample_and_project: feature shape mismatch");
    const int n = fa.dim(1) * fa.dim(2);
    const int s = std::min(num_locations, n);
    std::vector<int> idx = rng.sample_without_replacement(n, s);
    out.a.push_back(heads.project(tape, bind, static_cast<int>(l),
                                  ad::spatial_gather(feats_a[l], idx)));
    out.b.push_back(heads.project(tape, bind, static_cast<int>(l),
                                  ad::spatial_gather(feats_b[l], std::move(idx))));
    out.num_locations.push_back(s);
  }
  return out;
}

}  // namespace constructs
