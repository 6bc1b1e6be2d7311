#pragma once

#include "constructs/autodiff.hpp"
#include "constructs/image.hpp"
#include "constructs/networks.hpp"
#include "constructs/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace constructs {

struct LossConfig {
  double lambda_x = 1.0;
  double lambda_y = 1.0;
  double lambda_ss = 5.0;
  double tau = 0.07;
  int num_patch_locations = 256;
  int msssim_scales = 5;
  std::vector<double> msssim_weights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  double K1 = 0.01;
  double K2 = 0.03;
  int window_size = 11;
  double window_sigma = 1.5;
  std::string msssim_composition = "exponent";  // exponent | linear
  std::string gan_mode = "lsgan";               // lsgan | logistic
  bool srunit = false;
  double srunit_tau_r = 0.1;
  int srunit_tap = 8;

  void validate() const {
    if (lambda_x < 0 || lambda_y < 0 || lambda_ss < 0)
      throw std::invalid_argument("loss config: lambdas must be >= 0");
    if (tau <= 0) throw std::invalid_argument("loss config: tau must be > 0");
    if (num_patch_locations < 2)
      throw std::invalid_argument("loss config: num_patch_locations must be >= 2");
    if (msssim_scales < 1) throw std::invalid_argument("loss config: msssim_scales must be >= 1");
    if (static_cast<int>(msssim_weights.size()) != msssim_scales)
      throw std::invalid_argument("loss config: need one msssim weight per scale");
    double sum = 0;
    for (double w : msssim_weights) sum += w;
    if (std::abs(sum - 1.0) > 1e-3)
      throw std::invalid_argument("loss config: msssim weights must sum to 1");
    if (K1 <= 0 || K2 <= 0) throw std::invalid_argument("loss config: K1 and K2 must be > 0");
    if (window_size < 3 || window_size % 2 == 0)
      throw std::invalid_argument("loss config: window_size must be odd and >= 3");
    if (window_sigma <= 0) throw std::invalid_argument("loss config: window_sigma must be > 0");
    if (msssim_composition != "exponent" && msssim_composition != "linear")
      throw std::invalid_argument("loss config: msssim_composition must be exponent or linear");
    if (gan_mode != "lsgan" && gan_mode != "logistic")
      throw std::invalid_argument("loss config: gan_mode must be lsgan or logistic");
    if (srunit_tau_r <= 0)
      throw std::invalid_argument("loss config: srunit_tau_r must be > 0");
    if (srunit_tap < 1) throw std::invalid_argument("loss config: srunit_tap must be >= 1");
  }
};

struct LossBreakdown {
  double gan_g = 0;
  double gan_d = 0;
  double patch_x = 0;
  double patch_y = 0;
  double semantic = 0;
  double srunit = 0;
  bool has_srunit = false;
  double total = 0;
};

// Recombines components into the training objective. The discriminator term
// is bookkeeping only and never enters the total.
inline LossBreakdown total_loss(const LossBreakdown& parts, const LossConfig& config) {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("loss: non-finite component ") + name);
  };
  check(parts.gan_g, "gan_g");
  check(parts.gan_d, "gan_d");
  check(parts.patch_x, "patch_x");
  check(parts.patch_y, "patch_y");
  check(parts.semantic, "semantic");
  if (parts.has_srunit) check(parts.srunit, "srunit");
  LossBreakdown out = parts;
  out.total = parts.gan_g + config.lambda_x * parts.patch_x + config.lambda_y * parts.patch_y +
              config.lambda_ss * parts.semantic + (parts.has_srunit ? parts.srunit : 0.0);
  return out;
}

// ---- adversarial ----

template <typename T>
Var<T> lsgan_d_loss(Var<T> real_scores, Var<T> fake_scores) {
  Var<T> r = ad::affine(real_scores, T(1), T(-1));
  return ad::add(ad::mean_all(ad::mul(r, r)),
                 ad::mean_all(ad::mul(fake_scores, fake_scores)));
}

template <typename T>
Var<T> lsgan_g_loss(Var<T> fake_scores) {
  Var<T> f = ad::affine(fake_scores, T(1), T(-1));
  return ad::mean_all(ad::mul(f, f));
}

// log-form pair kept behind the gan_mode flag; scores are logits here
template <typename T>
Var<T> logistic_d_loss(Var<T> real_scores, Var<T> fake_scores) {
  return ad::add(ad::mean_all(ad::softplus(ad::scale(real_scores, T(-1)))),
                 ad::mean_all(ad::softplus(fake_scores)));
}

template <typename T>
Var<T> logistic_g_loss(Var<T> fake_scores) {
  return ad::mean_all(ad::softplus(ad::scale(fake_scores, T(-1))));
}

template <typename T>
Var<T> gan_d_loss(const LossConfig& config, Var<T> real_scores, Var<T> fake_scores) {
  return config.gan_mode == "lsgan" ? lsgan_d_loss(real_scores, fake_scores)
                                    : logistic_d_loss(real_scores, fake_scores);
}

template <typename T>
Var<T> gan_g_loss(const LossConfig& config, Var<T> fake_scores) {
  return config.gan_mode == "lsgan" ? lsgan_g_loss(fake_scores)
                                    : logistic_g_loss(fake_scores);
}

template <typename T>
T lsgan_d_loss(const Tensor<T>& real_scores, const Tensor<T>& fake_scores) {
  Tape<T> tape;
  return lsgan_d_loss(tape.constant(real_scores), tape.constant(fake_scores)).scalar();
}

template <typename T>
T lsgan_g_loss(const Tensor<T>& fake_scores) {
  Tape<T> tape;
  return lsgan_g_loss(tape.constant(fake_scores)).scalar();
}

// ---- contrastive ----

// (N+1)-way classification of the positive against N negatives, stabilized
// by max subtraction inside the cross entropy.
template <typename T>
Var<T> info_nce(Tape<T>& tape, Var<T> query, Var<T> positive, Var<T> negatives, T tau) {
  const auto& q = query.value();
  if (q.rank() != 2 || q.dim(0) != 1)
    throw std::invalid_argument("info_nce: query must be [1,d]");
  if (positive.value().dims != q.dims)
    throw std::invalid_argument("info_nce: positive must match query shape");
  if (negatives.value().rank() != 2 || negatives.value().dim(1) != q.dim(1) ||
      negatives.value().dim(0) < 1)
    throw std::invalid_argument("info_nce: need at least one negative of matching dimension");
  Var<T> keys = ad::concat_rows(positive, negatives);
  Var<T> logits = ad::scale(ad::matmul_nt(query, keys), T(1) / tau);
  return ad::softmax_ce_rows(logits, {0});
}

template <typename T>
T info_nce(const Tensor<T>& query, const Tensor<T>& positive, const Tensor<T>& negatives,
           T tau) {
  Tape<T> tape;
  const int d = static_cast<int>(query.size());
  return info_nce(tape, tape.constant(query.reshaped({1, d})),
                  tape.constant(positive.reshaped({1, d})), tape.constant(negatives), tau)
      .scalar();
}

// Fused PatchNCE over per-layer unit-norm projections: the S_l x S_l logit
// matrix of one layer holds the positive on the diagonal and the internal
// negatives (the other S_l - 1 sampled locations) off it. Equals the mean of
// info_nce over every (layer, location) pair.
template <typename T>
Var<T> patch_nce_from_projections(Tape<T>& tape, const std::vector<Var<T>>& queries,
                                  const std::vector<Var<T>>& positives, T tau) {
  (void)tape;
  if (queries.empty() || queries.size() != positives.size())
    throw std::invalid_argument("patch_nce: layer count mismatch");
  Var<T> acc;
  int total = 0;
  for (std::size_t l = 0; l < queries.size(); ++l) {
    const int s = queries[l].value().dim(0);
    if (s < 2) throw std::invalid_argument("patch_nce: need at least 2 locations per layer");
    Var<T> logits = ad::scale(ad::matmul_nt(queries[l], positives[l]), T(1) / tau);
    std::vector<int> diag(static_cast<std::size_t>(s));
    for (int i = 0; i < s; ++i) diag[static_cast<std::size_t>(i)] = i;
    Var<T> ce = ad::softmax_ce_rows(logits, std::move(diag));
    Var<T> weighted = ad::scale(ce, static_cast<T>(s));
    acc = acc.valid() ? ad::add(acc, weighted) : weighted;
    total += s;
  }
  return ad::scale(acc, T(1) / static_cast<T>(total));
}

// Multilayer contrastive loss between an input and its translation: queries
// come from the translated image's features, positives and internal
// negatives from the input's features at the same sampled locations.
template <typename T>
Var<T> patch_nce(Tape<T>& tape, const ProjectionHeads<T>& heads, ParamBind<T>& head_bind,
                 const std::vector<Var<T>>& feats_x, const std::vector<Var<T>>& feats_tx,
                 const LossConfig& config, Rng& rng) {
  auto paired = sample_and_project(tape, heads, head_bind, feats_tx, feats_x,
                                   config.num_patch_locations, rng);
  return patch_nce_from_projections(tape, paired.a, paired.b, static_cast<T>(config.tau));
}

template <typename T>
T patch_nce(const Generator<T>& gen, const ProjectionHeads<T>& heads, const Tensor<T>& x,
            const Tensor<T>& tx, const LossConfig& config, std::uint64_t seed) {
  Tape<T> tape;
  ParamBind<T> gen_bind(tape, false), head_bind(tape, false);
  auto fx = gen.forward(tape, gen_bind, tape.constant(x), gen.max_tap()).taps;
  auto ftx = gen.forward(tape, gen_bind, tape.constant(tx), gen.max_tap()).taps;
  Rng rng(seed);
  return patch_nce(tape, heads, head_bind, fx, ftx, config, rng).scalar();
}

// ---- structural similarity ----

template <typename T>
Tensor<T> gaussian_window(int size, double sigma) {
  Tensor<T> w({size});
  const double c = (size - 1) / 2.0;
  double sum = 0;
  for (int i = 0; i < size; ++i) {
    const double d = i - c;
    const double v = std::exp(-d * d / (2.0 * sigma * sigma));
    w.data[i] = static_cast<T>(v);
    sum += v;
  }
  w.data /= static_cast<T>(sum);
  return w;
}

template <typename T>
struct CsSsMaps {
  Var<T> cs, ss;
};

// Per-pixel contrast-sensitivity and structure maps from Gaussian-window
// local statistics, reflection padded so the maps keep the input shape.
template <typename T>
CsSsMaps<T> cs_ss_maps(Tape<T>& tape, Var<T> x, Var<T> y, T c1, T c2, int window_size,
                       double window_sigma) {
  const auto& xv = x.value();
  if (xv.rank() != 3 || xv.dim(0) != 1)
    throw std::invalid_argument("cs_ss_maps: expected [1,H,W] inputs");
  if (xv.dims != y.value().dims) throw std::invalid_argument("cs_ss_maps: shape mismatch");

  Tensor<T> win = gaussian_window<T>(window_size, window_sigma);
  Var<T> wy = tape.constant(win.reshaped({1, 1, window_size, 1}));
  Var<T> wx = tape.constant(win.reshaped({1, 1, 1, window_size}));
  const int p = window_size / 2;
  auto blur = [&](Var<T> t) {
    t = ad::conv2d(ad::pad2d(t, p, 0, ad::PadMode::kReflect), wy);
    return ad::conv2d(ad::pad2d(t, 0, p, ad::PadMode::kReflect), wx);
  };

  Var<T> mu_x = blur(x);
  Var<T> mu_y = blur(y);
  Var<T> sx2 = ad::sub(blur(ad::mul(x, x)), ad::mul(mu_x, mu_x));
  Var<T> sy2 = ad::sub(blur(ad::mul(y, y)), ad::mul(mu_y, mu_y));
  Var<T> sxy = ad::sub(blur(ad::mul(x, y)), ad::mul(mu_x, mu_y));

  Var<T> v1 = ad::affine(sxy, T(2), c2);
  Var<T> v2 = ad::affine(ad::add(sx2, sy2), T(1), c2);
  CsSsMaps<T> out;
  out.cs = ad::div(v1, v2);
  Var<T> lum_n = ad::affine(ad::mul(mu_x, mu_y), T(2), c1);
  Var<T> lum_d = ad::affine(ad::add(ad::mul(mu_x, mu_x), ad::mul(mu_y, mu_y)), T(1), c1);
  out.ss = ad::div(ad::mul(lum_n, v1), ad::mul(lum_d, v2));
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> cs_ss_maps(const Tensor<T>& x, const Tensor<T>& y, T c1, T c2,
                                           int window_size, double window_sigma) {
  Tape<T> tape;
  auto maps = cs_ss_maps(tape, tape.constant(x), tape.constant(y), c1, c2, window_size,
                         window_sigma);
  return {maps.cs.value(), maps.ss.value()};
}

// number of scales actually usable for an image, never more than requested
inline int msssim_effective_scales(int h, int w, const LossConfig& config) {
  int k = config.msssim_scales;
  while (k > 1 && std::min(h, w) < config.window_size * (1 << (k - 1))) --k;
  return k;
}

// Multi-scale structural similarity on single-channel metric-space images:
// mean contrast sensitivity at the finer scales, the full structure term at
// the coarsest, combined by exponent weights (or a weighted sum behind the
// composition flag). Scale means can go negative, so the exponent uses a
// sign-preserving power; the result stays in (-1, 1], and is 1 only for
// identical inputs.
template <typename T>
Var<T> ms_ssim(Tape<T>& tape, Var<T> x, Var<T> y, const LossConfig& config) {
  const auto& xv = x.value();
  if (xv.rank() != 3 || xv.dim(0) != 1)
    throw std::invalid_argument("ms_ssim: expected [1,H,W] inputs");
  if (xv.dims != y.value().dims) throw std::invalid_argument("ms_ssim: shape mismatch");

  const int k = msssim_effective_scales(xv.dim(1), xv.dim(2), config);
  std::vector<T> weights(static_cast<std::size_t>(k));
  double wsum = 0;
  for (int i = 0; i < k; ++i) wsum += config.msssim_weights[static_cast<std::size_t>(i)];
  for (int i = 0; i < k; ++i)
    weights[static_cast<std::size_t>(i)] =
        static_cast<T>(config.msssim_weights[static_cast<std::size_t>(i)] / wsum);

  const T c1 = static_cast<T>(config.K1 * config.K1);
  const T c2 = static_cast<T>(config.K2 * config.K2);
  Var<T> result;
  const bool exponent = config.msssim_composition == "exponent";
  for (int i = 0; i < k; ++i) {
    auto maps = cs_ss_maps(tape, x, y, c1, c2, config.window_size, config.window_sigma);
    Var<T> m = ad::mean_all(i + 1 < k ? maps.cs : maps.ss);
    if (exponent) {
      Var<T> f = ad::pow_signed(m, weights[static_cast<std::size_t>(i)]);
      result = result.valid() ? ad::mul(result, f) : f;
    } else {
      Var<T> f = ad::scale(m, weights[static_cast<std::size_t>(i)]);
      result = result.valid() ? ad::add(result, f) : f;
    }
    if (i + 1 < k) {
      x = ad::avg_pool2(x);
      y = ad::avg_pool2(y);
    }
  }
  return result;
}

template <typename T>
T ms_ssim(const Tensor<T>& x, const Tensor<T>& y, const LossConfig& config) {
  Tape<T> tape;
  return ms_ssim(tape, tape.constant(x), tape.constant(y), config).scalar();
}

inline double ms_ssim(const Image& x, const Image& y, const LossConfig& config) {
  const Image mx = to_metric(x), my = to_metric(y);
  return ms_ssim<double>(mx.data.template cast<double>(), my.data.template cast<double>(),
                         config);
}

// ---- semantic loss ----

// 1 - ms_ssim between the brightness (channel-mean) planes. Inputs are
// model-space tensors; brightness maps them to metric space first, so hue
// moves that keep the channel mean fixed cost nothing.
template <typename T>
Var<T> semantic_loss(Tape<T>& tape, Var<T> x_model, Var<T> tx_model,
                     const LossConfig& config) {
  Var<T> bx = ad::affine(ad::channel_mean(x_model), T(0.5), T(0.5));
  Var<T> btx = ad::affine(ad::channel_mean(tx_model), T(0.5), T(0.5));
  return ad::affine(ms_ssim(tape, bx, btx, config), T(-1), T(1));
}

inline double semantic_loss(const Image& x_model, const Image& tx_model,
                            const LossConfig& config) {
  if (!(x_model.range == kModelRange) || !(tx_model.range == kModelRange))
    throw std::invalid_argument("semantic_loss: expected model-space images");
  Tape<double> tape;
  return semantic_loss(tape, tape.constant(x_model.data.template cast<double>()),
                       tape.constant(tx_model.data.template cast<double>()), config)
      .scalar();
}

// ---- robustness plugin ----

// Perturbs the output of one generator unit with seed-deterministic Gaussian
// noise and measures how far the final translation moves, relative to the
// perturbation norm. Both branches share the parameter bind, so gradients
// flow through the clean and the perturbed path.
template <typename T>
Var<T> srunit_term(Tape<T>& tape, const Generator<T>& gen, ParamBind<T>& bind, Var<T> x,
                   double tau_r_magnitude, std::uint64_t seed, int tap) {
  if (tau_r_magnitude <= 0)
    throw std::invalid_argument("srunit: tau_r magnitude must be > 0");
  if (tap < 1 || tap > gen.spec.num_units())
    throw std::invalid_argument("srunit: tap outside generator units");

  Var<T> captured;
  auto capture = [&](int unit, Var<T> h) {
    if (unit == tap) captured = h;
    return h;
  };
  auto clean = gen.forward(tape, bind, x, 0, capture);
  if (!captured.valid()) throw std::logic_error("srunit: tap not reached");

  Rng rng(seed, 0x737275);
  Tensor<T> tau(captured.value().dims);
  for (std::int64_t i = 0; i < tau.size(); ++i)
    tau.data[i] = static_cast<T>(rng.normal() * tau_r_magnitude);
  const T tau_norm = std::sqrt(tau.data.square().sum());
  Var<T> delta = tape.constant(tau);

  auto inject = [&](int unit, Var<T> h) { return unit == tap ? ad::add(h, delta) : h; };
  auto perturbed = gen.forward(tape, bind, x, 0, inject);

  Var<T> d = ad::sub(clean.out, perturbed.out);
  Var<T> sq = ad::affine(ad::sum_all(ad::mul(d, d)), T(1), T(1e-20));
  return ad::scale(ad::sqrt_op(sq), T(1) / tau_norm);
}

template <typename T>
T srunit_loss(const Generator<T>& gen, const Tensor<T>& x, double tau_r_magnitude,
              std::uint64_t seed, int tap = 8) {
  Tape<T> tape;
  ParamBind<T> bind(tape, false);
  return srunit_term(tape, gen, bind, tape.constant(x), tau_r_magnitude, seed, tap).scalar();
}

}  // namespace constructs
