#pragma once

// Training loop for the translation objective: LS-GAN adversarial term,
// PatchNCE on both domains, the structural-similarity semantic term, and the
// optional feature-perturbation robustness term. Single optimizer over
// generator + projection heads, a separate one for the discriminator,
// discriminator-first update order, linear learning-rate decay, seeded
// sampling, and byte-stable checkpoints.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "constructs/dataset.hpp"
#include "constructs/losses.hpp"
#include "constructs/networks.hpp"
#include "constructs/serialize.hpp"

namespace constructs {

// ---- config ----

enum class Ablation { kFull, kNoSemantic, kNoPatchNce };

inline Ablation ablation_from_string(const std::string& s) {
  if (s == "full") return Ablation::kFull;
  if (s == "no_semantic") return Ablation::kNoSemantic;
  if (s == "no_patchnce") return Ablation::kNoPatchNce;
  throw std::invalid_argument("unknown ablation '" + s +
                              "' (expected full, no_semantic or no_patchnce)");
}

struct TrainConfig {
  int total_iters = 20000;
  int batch_size = 1;
  double learning_rate = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double decay_start_fraction = 0.5;
  int checkpoint_every = 1000;
  std::uint64_t seed = 1;
  std::string ablation = "full";
  LossConfig loss;

  void validate() const {
    if (total_iters < 1) throw std::invalid_argument("train: total_iters must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("train: learning_rate must be > 0");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
      throw std::invalid_argument("train: adam betas must lie in [0,1)");
    if (!(decay_start_fraction >= 0 && decay_start_fraction <= 1))
      throw std::invalid_argument("train: decay_start_fraction must lie in [0,1]");
    if (checkpoint_every < 1) throw std::invalid_argument("train: checkpoint_every must be >= 1");
    ablation_from_string(ablation);
    loss.validate();
  }
};

inline ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["total_iters"] = c.total_iters;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["decay_start_fraction"] = c.decay_start_fraction;
  j["checkpoint_every"] = c.checkpoint_every;
  j["seed"] = c.seed;
  j["ablation"] = c.ablation;
  j["loss"] = to_json(c.loss);
  return j;
}

inline TrainConfig train_config_from_json(const ordered_json& j, const std::string& path,
                                          TrainConfig base = TrainConfig{}) {
  TrainConfig c = std::move(base);
  JsonReader r(j, path);
  r.field("total_iters", c.total_iters);
  r.field("batch_size", c.batch_size);
  r.field("learning_rate", c.learning_rate);
  r.field("adam_beta1", c.adam_beta1);
  r.field("adam_beta2", c.adam_beta2);
  r.field("decay_start_fraction", c.decay_start_fraction);
  r.field("checkpoint_every", c.checkpoint_every);
  r.field("seed", c.seed);
  r.field("ablation", c.ablation);
  if (r.has("loss")) c.loss = loss_config_from_json(r.child("loss"), r.child_path("loss"));
  r.done();
  return c;
}

// Flat at the base rate until decay_start_fraction * total_iters, then linear
// to zero at total_iters. Continuous and non-increasing; iter counts completed
// steps, so the rate applied at step k is lr_schedule(k - 1, c).
inline double lr_schedule(std::int64_t iter, const TrainConfig& c) {
  const double total = static_cast<double>(c.total_iters);
  const double start = c.decay_start_fraction * total;
  const double i = static_cast<double>(iter);
  if (i >= total) return 0.0;
  if (i <= start) return c.learning_rate;
  return c.learning_rate * (total - i) / (total - start);
}

// ---- bundle ----

template <typename T>
struct ModelBundle {
  GeneratorSpec gen_spec;
  DiscriminatorSpec disc_spec;
  ProjectionHeadSpec head_spec;
  TrainConfig config;

  Generator<T> gen;
  Discriminator<T> disc;
  ProjectionHeads<T> heads;
  Adam<T> opt_g;
  Adam<T> opt_d;

  std::int64_t iter = 0;
  Rng sample_rng{0, 1};  // which images each step draws
  Rng loc_rng{0, 2};     // which spatial locations PatchNCE samples
  Rng noise_rng{0, 3};   // perturbation noise for the robustness term
};

template <typename T>
ModelBundle<T> init_bundle(const GeneratorSpec& gen_spec, const DiscriminatorSpec& disc_spec,
                           const ProjectionHeadSpec& head_spec, const TrainConfig& config) {
  gen_spec.validate();
  disc_spec.validate();
  head_spec.validate();
  config.validate();
  ModelBundle<T> b;
  b.gen_spec = gen_spec;
  b.disc_spec = disc_spec;
  b.head_spec = head_spec;
  b.config = config;
  b.gen = Generator<T>::build(gen_spec, config.seed);
  b.disc = Discriminator<T>::build(disc_spec, config.seed);
  b.heads = ProjectionHeads<T>::build(head_spec, b.gen.tap_channels(), config.seed);
  b.opt_g.beta1 = config.adam_beta1;
  b.opt_g.beta2 = config.adam_beta2;
  b.opt_d.beta1 = config.adam_beta1;
  b.opt_d.beta2 = config.adam_beta2;
  b.sample_rng = Rng(config.seed, 1);
  b.loc_rng = Rng(config.seed, 2);
  b.noise_rng = Rng(config.seed, 3);
  return b;
}

// ---- one optimization step ----

namespace detail {

template <typename T>
Var<T> batch_mean(Tape<T>& tape, const std::vector<Var<T>>& items) {
  (void)tape;
  Var<T> acc = items[0];
  for (std::size_t i = 1; i < items.size(); ++i) acc = ad::add(acc, items[i]);
  return ad::scale(acc, T(1) / static_cast<T>(items.size()));
}

}  // namespace detail

// Runs one iteration on explicit batches (model-range [C,H,W] tensors).
// Order of operations: the generator-side graph is built first (so the
// discriminator update sees fakes from the pre-step generator), the
// discriminator is updated, and the adversarial generator term is then
// evaluated against the just-updated discriminator. Ablations skip the
// corresponding graph sections entirely; skipped terms report 0 and carry
// weight 0 in the total.
template <typename T>
LossBreakdown train_step(ModelBundle<T>& bundle, const std::vector<Tensor<T>>& x_batch,
                         const std::vector<Tensor<T>>& y_batch) {
  if (x_batch.empty() || x_batch.size() != y_batch.size())
    throw std::invalid_argument("train_step: batches must be non-empty and equal-sized");
  const TrainConfig& cfg = bundle.config;
  const Ablation ab = ablation_from_string(cfg.ablation);
  LossConfig lc = cfg.loss;
  if (ab == Ablation::kNoSemantic) lc.lambda_ss = 0;
  if (ab == Ablation::kNoPatchNce) lc.lambda_x = lc.lambda_y = 0;
  const bool want_px = lc.lambda_x > 0;
  const bool want_py = lc.lambda_y > 0;
  const bool want_sem = lc.lambda_ss > 0;
  const double lr = lr_schedule(bundle.iter, cfg);

  Tape<T> tape_g;
  ParamBind<T> bind_gen(tape_g, true);
  ParamBind<T> bind_heads(tape_g, true);

  std::vector<Var<T>> px_items, py_items, sem_items, sr_items, fake_vars;
  std::vector<Tensor<T>> fake_values;
  for (const Tensor<T>& x : x_batch) {
    auto pass_x = bundle.gen.forward(tape_g, bind_gen, tape_g.constant(x));
    Var<T> tx = pass_x.out;
    fake_vars.push_back(tx);
    fake_values.push_back(tx.value());
    if (want_px) {
      auto feats_tx =
          bundle.gen.forward(tape_g, bind_gen, tx, bundle.gen.max_tap()).taps;
      px_items.push_back(patch_nce(tape_g, bundle.heads, bind_heads, pass_x.taps, feats_tx,
                                   lc, bundle.loc_rng));
    }
    if (want_sem) sem_items.push_back(semantic_loss(tape_g, tape_g.constant(x), tx, lc));
    if (lc.srunit)
      sr_items.push_back(srunit_term(tape_g, bundle.gen, bind_gen, tape_g.constant(x),
                                     lc.srunit_tau_r, bundle.noise_rng.next_u64(),
                                     lc.srunit_tap));
  }
  if (want_py) {
    for (const Tensor<T>& y : y_batch) {
      auto pass_y = bundle.gen.forward(tape_g, bind_gen, tape_g.constant(y));
      auto feats_ty =
          bundle.gen.forward(tape_g, bind_gen, pass_y.out, bundle.gen.max_tap()).taps;
      py_items.push_back(patch_nce(tape_g, bundle.heads, bind_heads, pass_y.taps, feats_ty,
                                   lc, bundle.loc_rng));
    }
  }

  // discriminator update on real y vs detached fakes; one power-iteration
  // step per training iteration
  Tape<T> tape_d;
  ParamBind<T> bind_disc(tape_d, true);
  std::vector<Var<T>> gd_items;
  for (std::size_t i = 0; i < y_batch.size(); ++i) {
    Var<T> d_real = bundle.disc.forward(tape_d, bind_disc, tape_d.constant(y_batch[i]), i == 0);
    Var<T> d_fake = bundle.disc.forward(tape_d, bind_disc, tape_d.constant(fake_values[i]), false);
    gd_items.push_back(gan_d_loss(lc, d_real, d_fake));
  }
  Var<T> gan_d = detail::batch_mean(tape_d, gd_items);
  tape_d.backward(gan_d);
  bundle.opt_d.step({{&bundle.disc.params, &bind_disc}}, tape_d, lr);

  // adversarial generator term against the frozen, updated discriminator
  ParamBind<T> bind_disc_frozen(tape_g, false);
  std::vector<Var<T>> gg_items;
  for (Var<T> tx : fake_vars)
    gg_items.push_back(gan_g_loss(lc, bundle.disc.forward(tape_g, bind_disc_frozen, tx, false)));
  Var<T> gan_g = detail::batch_mean(tape_g, gg_items);

  Var<T> total = gan_g;
  Var<T> px, py, sem, sr;
  if (want_px) {
    px = detail::batch_mean(tape_g, px_items);
    total = ad::add(total, ad::scale(px, static_cast<T>(lc.lambda_x)));
  }
  if (want_py) {
    py = detail::batch_mean(tape_g, py_items);
    total = ad::add(total, ad::scale(py, static_cast<T>(lc.lambda_y)));
  }
  if (want_sem) {
    sem = detail::batch_mean(tape_g, sem_items);
    total = ad::add(total, ad::scale(sem, static_cast<T>(lc.lambda_ss)));
  }
  if (lc.srunit) {
    sr = detail::batch_mean(tape_g, sr_items);
    total = ad::add(total, sr);
  }
  tape_g.backward(total);
  bundle.opt_g.step({{&bundle.gen.params, &bind_gen}, {&bundle.heads.params, &bind_heads}},
                    tape_g, lr);

  ++bundle.iter;

  LossBreakdown parts;
  parts.gan_g = static_cast<double>(gan_g.scalar());
  parts.gan_d = static_cast<double>(gan_d.scalar());
  parts.patch_x = want_px ? static_cast<double>(px.scalar()) : 0.0;
  parts.patch_y = want_py ? static_cast<double>(py.scalar()) : 0.0;
  parts.semantic = want_sem ? static_cast<double>(sem.scalar()) : 0.0;
  parts.srunit = lc.srunit ? static_cast<double>(sr.scalar()) : 0.0;
  parts.has_srunit = lc.srunit;
  return total_loss(parts, lc);
}

// ---- loop ----

struct StepRecord {
  std::int64_t iter = 0;
  LossBreakdown losses;
  double lr = 0;
};

inline constexpr const char* kLossCsvHeader =
    "iter,gan_g,gan_d,patch_x,patch_y,semantic,srunit,total,lr";

inline std::string loss_csv_row(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "%lld,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g",
                static_cast<long long>(r.iter), r.losses.gan_g, r.losses.gan_d,
                r.losses.patch_x, r.losses.patch_y, r.losses.semantic, r.losses.srunit,
                r.losses.total, r.lr);
  return buf;
}

template <typename T>
using StepSink = std::function<void(const StepRecord&)>;
template <typename T>
using CheckpointSink = std::function<void(const ModelBundle<T>&)>;

template <typename T>
Tensor<T> model_tensor(const Image& img) {
  img.validate();
  if (img.range != kModelRange)
    throw std::invalid_argument("train: dataset images must be in model range");
  return img.data.template cast<T>();
}

// Runs from bundle.iter to config.total_iters with seeded with-replacement
// sampling (per step: batch_size X indices drawn first, then Y indices).
// Checkpoint sink fires whenever iter is a multiple of checkpoint_every.
template <typename T>
void train(ModelBundle<T>& bundle, const DomainDataset& x_domain, const DomainDataset& y_domain,
           const StepSink<T>& on_step = nullptr,
           const CheckpointSink<T>& on_checkpoint = nullptr) {
  if (x_domain.size() < 1 || y_domain.size() < 1)
    throw std::invalid_argument("train: both domains must contain at least one image");
  const TrainConfig& cfg = bundle.config;
  cfg.validate();
  while (bundle.iter < cfg.total_iters) {
    std::vector<Tensor<T>> xb, yb;
    for (int b = 0; b < cfg.batch_size; ++b)
      xb.push_back(model_tensor<T>(
          x_domain.images[static_cast<std::size_t>(
              bundle.sample_rng.uniform_int(static_cast<std::int64_t>(x_domain.size())))]));
    for (int b = 0; b < cfg.batch_size; ++b)
      yb.push_back(model_tensor<T>(
          y_domain.images[static_cast<std::size_t>(
              bundle.sample_rng.uniform_int(static_cast<std::int64_t>(y_domain.size())))]));
    StepRecord rec;
    rec.lr = lr_schedule(bundle.iter, cfg);
    const std::int64_t step_number = bundle.iter + 1;
    try {
      rec.losses = train_step(bundle, xb, yb);
    } catch (const std::exception& e) {
      throw std::runtime_error("training aborted at iteration " + std::to_string(step_number) +
                               ": " + e.what() + " (last checkpoint preserved)");
    }
    rec.iter = bundle.iter;
    if (on_step) on_step(rec);
    if (on_checkpoint && bundle.iter % cfg.checkpoint_every == 0) on_checkpoint(bundle);
  }
}

// ---- inference over a dataset ----

// Translates every image; masks, group ids, names and stems carry over
// unchanged since translation must preserve the scene's labeling.
template <typename T>
DomainDataset translate(const ModelBundle<T>& bundle, const DomainDataset& x_domain) {
  DomainDataset out;
  out.domain_tag = x_domain.domain_tag + "_translated";
  out.names = x_domain.names;
  out.masks = x_domain.masks;
  out.group_ids = x_domain.group_ids;
  out.images.reserve(x_domain.size());
  for (const Image& img : x_domain.images) {
    Tensor<T> tx = translate_image(bundle.gen, model_tensor<T>(img));
    out.images.push_back(Image{tx.template cast<float>(), kModelRange});
  }
  return out;
}

// ---- checkpoints ----
//
// Single binary archive: magic, dtype tag, a JSON header (specs, train
// config, iteration, optimizer steps, RNG states as hex strings, array
// manifest) and the raw little-endian parameter blobs in manifest order.
// Adam moments are materialized on save so that save -> load -> save is
// byte-identical. Loading rebuilds the bundle from the stored specs.

namespace detail {

inline std::string u64_hex(std::uint64_t v) {
  char b[17];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
  return b;
}

inline std::uint64_t hex_u64(const std::string& s) { return std::stoull(s, nullptr, 16); }

inline ordered_json rng_to_json(const Rng& r) {
  ordered_json a = ordered_json::array();
  for (std::uint64_t w : r.state()) a.push_back(u64_hex(w));
  return a;
}

inline Rng rng_from_json(const ordered_json& a) {
  if (!a.is_array() || a.size() != 4)
    throw std::runtime_error("checkpoint: malformed RNG state");
  std::array<std::uint64_t, 4> st;
  for (int i = 0; i < 4; ++i) st[static_cast<std::size_t>(i)] = hex_u64(a[i].get<std::string>());
  Rng r(0);
  r.set_state(st);
  return r;
}

template <typename T>
void write_array(std::ostream& os, const Tensor<T>& t) {
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(sizeof(T) * static_cast<std::size_t>(t.size())));
}

template <typename T>
void read_array(std::istream& is, Tensor<T>& t) {
  is.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(sizeof(T) * static_cast<std::size_t>(t.size())));
  if (!is) throw std::runtime_error("checkpoint: truncated parameter data");
}

template <typename T>
const char* dtype_name() {
  if constexpr (sizeof(T) == 4)
    return "float32";
  else
    return "float64";
}

inline constexpr char kCheckpointMagic[8] = {'C', 'S', 'B', 'N', 'D', 'L', '0', '1'};

}  // namespace detail

template <typename T>
void save_checkpoint(const ModelBundle<T>& bundle, const std::string& path) {
  ordered_json h;
  h["format_version"] = 1;
  h["dtype"] = detail::dtype_name<T>();
  h["generator_spec"] = to_json(bundle.gen_spec);
  h["discriminator_spec"] = to_json(bundle.disc_spec);
  h["projection_head_spec"] = to_json(bundle.head_spec);
  h["train_config"] = to_json(bundle.config);
  h["iter"] = bundle.iter;
  h["opt_g_t"] = bundle.opt_g.t;
  h["opt_d_t"] = bundle.opt_d.t;
  h["rng_sample"] = detail::rng_to_json(bundle.sample_rng);
  h["rng_loc"] = detail::rng_to_json(bundle.loc_rng);
  h["rng_noise"] = detail::rng_to_json(bundle.noise_rng);
  ordered_json manifest = ordered_json::array();
  const Params<T>* stores[3] = {&bundle.gen.params, &bundle.heads.params, &bundle.disc.params};
  for (const Params<T>* p : stores)
    for (const auto& e : p->entries) manifest.push_back({e.name, e.value.size()});
  for (std::size_t i = 0; i < bundle.disc.sn.size(); ++i) {
    manifest.push_back({"d.sn" + std::to_string(i) + ".u", bundle.disc.sn[i].u.size()});
    manifest.push_back({"d.sn" + std::to_string(i) + ".v", bundle.disc.sn[i].v.size()});
  }
  h["arrays"] = manifest;

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  std::string header = h.dump();
  os.write(detail::kCheckpointMagic, 8);
  const std::uint64_t hlen = header.size();
  os.write(reinterpret_cast<const char*>(&hlen), 8);
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const Params<T>* p : stores)
    for (const auto& e : p->entries) {
      detail::write_array(os, e.value);
      Tensor<T> zeros;
      const Tensor<T>& m = e.m.size() ? e.m : (zeros = Tensor<T>::zeros(e.value.dims));
      detail::write_array(os, m);
      const Tensor<T>& v = e.v.size() ? e.v : (zeros = Tensor<T>::zeros(e.value.dims));
      detail::write_array(os, v);
    }
  for (const auto& b : bundle.disc.sn) {
    detail::write_array(os, b.u);
    detail::write_array(os, b.v);
  }
  if (!os) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

template <typename T>
ModelBundle<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint archive");
  std::uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), 8);
  std::string header(hlen, '\0');
  is.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw std::runtime_error("checkpoint: truncated header in '" + path + "'");
  ordered_json h = ordered_json::parse(header, nullptr, false);
  if (h.is_discarded()) throw std::runtime_error("checkpoint: malformed header in '" + path + "'");

  if (h.at("dtype").get<std::string>() != detail::dtype_name<T>())
    throw std::runtime_error("checkpoint: dtype mismatch, archive holds " +
                             h.at("dtype").get<std::string>());
  GeneratorSpec gs = generator_spec_from_json(h.at("generator_spec"), "generator_spec");
  DiscriminatorSpec ds =
      discriminator_spec_from_json(h.at("discriminator_spec"), "discriminator_spec");
  ProjectionHeadSpec hs =
      projection_head_spec_from_json(h.at("projection_head_spec"), "projection_head_spec");
  TrainConfig tc = train_config_from_json(h.at("train_config"), "train_config");

  ModelBundle<T> b = init_bundle<T>(gs, ds, hs, tc);
  b.iter = h.at("iter").get<std::int64_t>();
  b.opt_g.t = h.at("opt_g_t").get<std::int64_t>();
  b.opt_d.t = h.at("opt_d_t").get<std::int64_t>();
  b.sample_rng = detail::rng_from_json(h.at("rng_sample"));
  b.loc_rng = detail::rng_from_json(h.at("rng_loc"));
  b.noise_rng = detail::rng_from_json(h.at("rng_noise"));

  const ordered_json& manifest = h.at("arrays");
  std::size_t mi = 0;
  auto expect = [&](const std::string& name, std::int64_t count) {
    if (mi >= manifest.size() || manifest[mi][0].get<std::string>() != name ||
        manifest[mi][1].get<std::int64_t>() != count)
      throw std::runtime_error("checkpoint: archive layout does not match specs at '" + name +
                               "'");
    ++mi;
  };
  Params<T>* stores[3] = {&b.gen.params, &b.heads.params, &b.disc.params};
  for (Params<T>* p : stores)
    for (auto& e : p->entries) {
      expect(e.name, e.value.size());
      detail::read_array(is, e.value);
      if (!e.m.size()) e.m = Tensor<T>::zeros(e.value.dims);
      if (!e.v.size()) e.v = Tensor<T>::zeros(e.value.dims);
      detail::read_array(is, e.m);
      detail::read_array(is, e.v);
    }
  for (std::size_t i = 0; i < b.disc.sn.size(); ++i) {
    expect("d.sn" + std::to_string(i) + ".u", b.disc.sn[i].u.size());
    detail::read_array(is, b.disc.sn[i].u);
    expect("d.sn" + std::to_string(i) + ".v", b.disc.sn[i].v.size());
    detail::read_array(is, b.disc.sn[i].v);
  }
  if (mi != manifest.size())
    throw std::runtime_error("checkpoint: archive holds extra arrays beyond the specs");
  return b;
}

}  // namespace constructs
