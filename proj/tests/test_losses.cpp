#include <algorithm>
#include <cmath>

#include "constructs/losses.hpp"
#include "constructs/networks.hpp"
#include "constructs/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace constructs;
using testutil::check_gradients;
using testutil::FdOptions;
using testutil::random_tensor;

namespace {

Tensor<double> constant_map(double v, int h = 2, int w = 2) {
  return Tensor<double>::full({1, h, w}, v);
}

Tensor<double> unit_rows(int s, int d, Rng& rng) {
  Tensor<double> t({s, d});
  for (int i = 0; i < s; ++i) {
    double norm = 0;
    for (int j = 0; j < d; ++j) {
      t.at(i, j) = rng.uniform(-1.0, 1.0);
      norm += t.at(i, j) * t.at(i, j);
    }
    norm = std::sqrt(norm);
    for (int j = 0; j < d; ++j) t.at(i, j) /= norm;
  }
  return t;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("loss config validation") {
  LossConfig ok;
  CHECK_NOTHROW(ok.validate());

  auto broken = [](auto mutate) {
    LossConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  };
  broken([](LossConfig& c) { c.lambda_ss = -0.1; });
  broken([](LossConfig& c) { c.tau = 0; });
  broken([](LossConfig& c) { c.num_patch_locations = 1; });
  broken([](LossConfig& c) { c.msssim_weights = {0.5, 0.5}; });  // count != scales
  broken([](LossConfig& c) { c.msssim_weights = {0.2, 0.2, 0.2, 0.2, 0.1}; });
  broken([](LossConfig& c) { c.window_size = 8; });
  broken([](LossConfig& c) { c.msssim_composition = "mean"; });
  broken([](LossConfig& c) { c.gan_mode = "wgan"; });
  broken([](LossConfig& c) { c.srunit_tau_r = 0; });
}

TEST_CASE("least-squares adversarial values") {
  CHECK(lsgan_d_loss(constant_map(1.0), constant_map(0.0)) == doctest::Approx(0.0));
  CHECK(lsgan_d_loss(constant_map(0.5), constant_map(0.5)) ==
        doctest::Approx(0.5).epsilon(1e-12));
  CHECK(lsgan_g_loss(constant_map(1.0)) == doctest::Approx(0.0));
  CHECK(lsgan_g_loss(constant_map(0.0)) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("log-form adversarial values") {
  Tape<double> tape;
  Var<double> zeros = tape.constant(constant_map(0.0));
  CHECK(logistic_d_loss(zeros, zeros).scalar() ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(logistic_g_loss(zeros).scalar() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("gan mode flag dispatches both forms") {
  Tape<double> tape;
  Var<double> r = tape.constant(constant_map(0.7));
  Var<double> f = tape.constant(constant_map(-0.2));
  LossConfig ls, lg;
  lg.gan_mode = "logistic";
  CHECK(gan_d_loss(ls, r, f).scalar() == lsgan_d_loss(r, f).scalar());
  CHECK(gan_g_loss(ls, f).scalar() == lsgan_g_loss(f).scalar());
  CHECK(gan_d_loss(lg, r, f).scalar() == logistic_d_loss(r, f).scalar());
  CHECK(gan_g_loss(lg, f).scalar() == logistic_g_loss(f).scalar());
}

TEST_CASE("contrastive classification values") {
  SUBCASE("uniform similarity over 255 negatives") {
    const int d = 4;
    Tensor<double> q({1, d}), p({1, d}), n({255, d});
    q.at(0, 0) = 1.0;
    p.at(0, 1) = 1.0;  // q.p = 0
    for (int i = 0; i < 255; ++i) n.at(i, 2) = 1.0;  // q.n = 0 for all
    CHECK(info_nce(q, p, n, 1.0) ==
          doctest::Approx(std::log(256.0)).epsilon(1e-9));
    CHECK(info_nce(q, p, n, 1.0) == doctest::Approx(5.5451774445).epsilon(1e-8));
  }

  SUBCASE("single negative at both temperatures") {
    Tensor<double> q = Tensor<double>::from({1, 2}, {1.0, 0.0});
    Tensor<double> p = Tensor<double>::from({1, 2}, {1.0, 0.0});   // q.p = 1
    Tensor<double> n = Tensor<double>::from({1, 2}, {0.0, 1.0});   // q.n = 0
    CHECK(info_nce(q, p, n, 1.0) ==
          doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-12));
    CHECK(info_nce(q, p, n, 1.0) == doctest::Approx(0.3132616875).epsilon(1e-9));
    CHECK(info_nce(q, p, n, 0.07) ==
          doctest::Approx(std::log1p(std::exp(-1.0 / 0.07))).epsilon(1e-6));
    CHECK(info_nce(q, p, n, 0.07) == doctest::Approx(6.2488e-7).epsilon(1e-3));
  }

  SUBCASE("empty negative set is fatal") {
    Tape<double> tape;
    Var<double> q = tape.constant(Tensor<double>::from({1, 2}, {1.0, 0.0}));
    Var<double> n0 = tape.constant(Tensor<double>({0, 2}));
    CHECK_THROWS_AS(info_nce(tape, q, q, n0, 1.0), std::invalid_argument);
    Var<double> wrong_d = tape.constant(Tensor<double>({3, 5}));
    CHECK_THROWS_AS(info_nce(tape, q, q, wrong_d, 1.0), std::invalid_argument);
  }

  SUBCASE("non-negative and monotone in the positive similarity") {
    Tensor<double> n = Tensor<double>::from({2, 2}, {0.3, 0.9539392014, -0.5, 0.8660254038});
    double prev = -1;
    for (double sim : {0.9, 0.5, 0.1, -0.5}) {
      Tensor<double> q = Tensor<double>::from({1, 2}, {1.0, 0.0});
      Tensor<double> p =
          Tensor<double>::from({1, 2}, {sim, std::sqrt(1.0 - sim * sim)});
      const double loss = info_nce(q, p, n, 0.5);
      CHECK(loss >= 0.0);
      CHECK(loss > prev);
      prev = loss;
    }
  }
}

TEST_CASE("patchwise contrastive loss") {
  SUBCASE("two locations against a pinned hand computation") {
    Tape<double> tape;
    Var<double> q = tape.constant(Tensor<double>::from({2, 2}, {1, 0, 0, 1}));
    Var<double> p = tape.constant(Tensor<double>::from({2, 2}, {0.6, 0.8, 0.8, 0.6}));
    // rows: positive logit 0.6, negative 0.8 -> ce = log(e^.6 + e^.8) - 0.6
    const double expect = std::log(std::exp(0.6) + std::exp(0.8)) - 0.6;
    const double got = patch_nce_from_projections(tape, {q}, {p}, 1.0).scalar();
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    CHECK(got == doctest::Approx(0.79813887).epsilon(1e-7));
  }

  SUBCASE("fused form equals the mean of per-location classifications") {
    Rng rng(77);
    Tensor<double> qa = unit_rows(3, 4, rng), pa = unit_rows(3, 4, rng);
    Tensor<double> qb = unit_rows(5, 4, rng), pb = unit_rows(5, 4, rng);
    Tape<double> tape;
    const double fused =
        patch_nce_from_projections(tape, {tape.constant(qa), tape.constant(qb)},
                                   {tape.constant(pa), tape.constant(pb)}, 0.07)
            .scalar();

    double total = 0;
    int count = 0;
    auto add_layer = [&](const Tensor<double>& qs, const Tensor<double>& ps) {
      const int s = qs.dim(0), d = qs.dim(1);
      for (int i = 0; i < s; ++i) {
        Tensor<double> q({1, d}), p({1, d}), n({s - 1, d});
        int r = 0;
        for (int j = 0; j < d; ++j) {
          q.at(0, j) = qs.at(i, j);
          p.at(0, j) = ps.at(i, j);
        }
        for (int k = 0; k < s; ++k) {
          if (k == i) continue;
          for (int j = 0; j < d; ++j) n.at(r, j) = ps.at(k, j);
          ++r;
        }
        total += info_nce(q, p, n, 0.07);
        ++count;
      }
    };
    add_layer(qa, pa);
    add_layer(qb, pb);
    CHECK(fused == doctest::Approx(total / count).epsilon(1e-9));
  }

  SUBCASE("invariant to relabeling the sampled locations") {
    Rng rng(12);
    Tensor<double> q = unit_rows(6, 5, rng), p = unit_rows(6, 5, rng);
    std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    Tensor<double> qp({6, 5}), pp({6, 5});
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 5; ++j) {
        qp.at(i, j) = q.at(perm[static_cast<std::size_t>(i)], j);
        pp.at(i, j) = p.at(perm[static_cast<std::size_t>(i)], j);
      }
    Tape<double> tape;
    const double a =
        patch_nce_from_projections(tape, {tape.constant(q)}, {tape.constant(p)}, 0.07)
            .scalar();
    const double b =
        patch_nce_from_projections(tape, {tape.constant(qp)}, {tape.constant(pp)}, 0.07)
            .scalar();
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
  }

  SUBCASE("degenerate layer sets are fatal") {
    Tape<double> tape;
    Var<double> one = tape.constant(Tensor<double>({1, 4}));
    CHECK_THROWS(patch_nce_from_projections<double>(tape, {}, {}, 0.07));
    CHECK_THROWS(patch_nce_from_projections(tape, {one}, {one, one}, 0.07));
    CHECK_THROWS(patch_nce_from_projections(tape, {one}, {one}, 0.07));  // S=1
  }

  SUBCASE("identity pairing is the empirical minimum") {
    GeneratorSpec gs;
    gs.base_width = 8;
    gs.num_residual_blocks = 2;
    gs.feature_tap_layers = {1, 2};
    auto gen = Generator<double>::build(gs, 19);
    auto heads =
        ProjectionHeads<double>::build(ProjectionHeadSpec{}, gen.tap_channels(), 19);
    LossConfig config;
    config.num_patch_locations = 32;

    Rng rng(3);
    Tensor<double> x = random_tensor({3, 16, 16}, rng);
    const double self = patch_nce(gen, heads, x, x, config, 5);
    for (std::uint64_t s = 0; s < 3; ++s) {
      Tensor<double> tx = random_tensor({3, 16, 16}, rng);
      CHECK(self < patch_nce(gen, heads, x, tx, config, 5));
    }
  }
}

TEST_CASE("local structure maps") {
  const double c1 = 1e-4, c2 = 9e-4;  // K1=0.01, K2=0.03 squared

  SUBCASE("identical inputs give unit maps") {
    Rng rng(31);
    Tensor<double> x = random_tensor({1, 16, 16}, rng, 0.0, 1.0);
    auto [cs, ss] = cs_ss_maps(x, x, c1, c2, 11, 1.5);
    CHECK((cs.data - 1.0).abs().maxCoeff() <= 1e-12);
    CHECK((ss.data - 1.0).abs().maxCoeff() <= 1e-12);
  }

  SUBCASE("constant images evaluate in closed form") {
    auto [cs, ss] = cs_ss_maps(constant_map(0.0, 16, 16), constant_map(1.0, 16, 16),
                               c1, c2, 11, 1.5);
    const double expect_ss = 1e-4 / 1.0001;
    CHECK((cs.data - 1.0).abs().maxCoeff() <= 1e-9);
    CHECK((ss.data - expect_ss).abs().maxCoeff() <= 1e-9);
    CHECK(expect_ss == doctest::Approx(9.999e-5).epsilon(1e-4));
  }

  SUBCASE("symmetric in the two inputs") {
    Rng rng(37);
    Tensor<double> x = random_tensor({1, 12, 12}, rng, 0.0, 1.0);
    Tensor<double> y = random_tensor({1, 12, 12}, rng, 0.0, 1.0);
    auto [cs_xy, ss_xy] = cs_ss_maps(x, y, c1, c2, 11, 1.5);
    auto [cs_yx, ss_yx] = cs_ss_maps(y, x, c1, c2, 11, 1.5);
    CHECK((cs_xy.data - cs_yx.data).abs().maxCoeff() <= 1e-14);
    CHECK((ss_xy.data - ss_yx.data).abs().maxCoeff() <= 1e-14);
  }

  SUBCASE("shape requirements are fatal") {
    Tape<double> tape;
    Var<double> a = tape.constant(Tensor<double>({1, 8, 8}));
    Var<double> b = tape.constant(Tensor<double>({1, 8, 9}));
    Var<double> c = tape.constant(Tensor<double>({3, 8, 8}));
    CHECK_THROWS(cs_ss_maps(tape, a, b, c1, c2, 11, 1.5));
    CHECK_THROWS(cs_ss_maps(tape, c, c, c1, c2, 11, 1.5));
  }
}

TEST_CASE("multi-scale similarity") {
  LossConfig config;

  SUBCASE("effective scale count tracks the image extent") {
    CHECK(msssim_effective_scales(256, 256, config) == 5);
    CHECK(msssim_effective_scales(64, 64, config) == 3);
    CHECK(msssim_effective_scales(64, 1024, config) == 3);
    CHECK(msssim_effective_scales(44, 44, config) == 3);
    CHECK(msssim_effective_scales(43, 43, config) == 2);
    CHECK(msssim_effective_scales(16, 16, config) == 1);
  }

  SUBCASE("identity is exactly one, symmetry holds, range bounded") {
    Rng rng(41);
    Tensor<double> x = random_tensor({1, 64, 64}, rng, 0.0, 1.0);
    CHECK(ms_ssim(x, x, config) == doctest::Approx(1.0).epsilon(1e-6));
    for (int t = 0; t < 4; ++t) {
      Tensor<double> y = random_tensor({1, 64, 64}, rng, 0.0, 1.0);
      const double v = ms_ssim(x, y, config);
      CHECK(v > -1.0);
      CHECK(v <= 1.0);
      CHECK(v == doctest::Approx(ms_ssim(y, x, config)).epsilon(1e-12));
      CHECK(v < 1.0 - 1e-6);  // equals one only at identity
    }
  }

  SUBCASE("stronger corruption scores lower") {
    Rng rng(43);
    Tensor<double> x = random_tensor({1, 64, 64}, rng, 0.0, 1.0);
    Tensor<double> mild = x, heavy = x;
    for (std::int64_t i = 0; i < x.size(); ++i) {
      mild.data[i] = x.data[i] + 0.01 * rng.uniform(-1.0, 1.0);
      heavy.data[i] = std::min(1.0, x.data[i] + 0.5);
    }
    CHECK(ms_ssim(x, heavy, config) < ms_ssim(x, mild, config));
  }

  SUBCASE("constant images match the closed-form composition") {
    // 64x64 runs 3 scales; weights renormalize over the first three
    const double wsum = 0.0448 + 0.2856 + 0.3001;
    const double w3 = 0.3001 / wsum;
    const double ss3 = 1e-4 / 1.0001;
    Tensor<double> black = constant_map(0.0, 64, 64), white = constant_map(1.0, 64, 64);
    CHECK(ms_ssim(black, white, config) ==
          doctest::Approx(std::pow(ss3, w3)).epsilon(1e-9));

    LossConfig linear = config;
    linear.msssim_composition = "linear";
    const double expect = (0.0448 + 0.2856) / wsum + w3 * ss3;
    CHECK(ms_ssim(black, white, linear) == doctest::Approx(expect).epsilon(1e-9));
  }

  SUBCASE("single-scale image uses the structure term alone") {
    // 16x16 -> one effective scale; value equals mean ss with weight 1
    Tensor<double> black = constant_map(0.0, 16, 16), white = constant_map(1.0, 16, 16);
    CHECK(ms_ssim(black, white, config) ==
          doctest::Approx(1e-4 / 1.0001).epsilon(1e-9));
  }
}

TEST_CASE("semantic brightness loss") {
  LossConfig config;

  SUBCASE("identity costs nothing") {
    Rng rng(51);
    Tensor<double> x = random_tensor({3, 64, 64}, rng);
    Tape<double> tape;
    Var<double> v = semantic_loss(tape, tape.constant(x), tape.constant(x), config);
    CHECK(v.scalar() == doctest::Approx(0.0).epsilon(1e-9));
  }

  SUBCASE("per-pixel channel permutations are free") {
    Rng rng(53);
    Tensor<double> x = random_tensor({3, 32, 32}, rng);
    Tensor<double> tx = random_tensor({3, 32, 32}, rng);
    // rotate channels everywhere, swap two channels on even pixels only
    Tensor<double> xp = x;
    const std::int64_t plane = 32 * 32;
    for (std::int64_t i = 0; i < plane; ++i) {
      xp.data[i] = x.data[plane + i];
      xp.data[plane + i] = x.data[2 * plane + i];
      xp.data[2 * plane + i] = x.data[i];
      if (i % 2 == 0) std::swap(xp.data[i], xp.data[plane + i]);
    }
    Tape<double> tape;
    const double base =
        semantic_loss(tape, tape.constant(x), tape.constant(tx), config).scalar();
    const double perm =
        semantic_loss(tape, tape.constant(xp), tape.constant(tx), config).scalar();
    CHECK(base == doctest::Approx(perm).epsilon(1e-12));
    const double self =
        semantic_loss(tape, tape.constant(x), tape.constant(xp), config).scalar();
    CHECK(self == doctest::Approx(0.0).epsilon(1e-9));
  }

  SUBCASE("opposite constant brightness approaches the closed-form bound") {
    Image black, white;
    black.data = Tensor<float>::full({3, 64, 64}, -1.0f);
    black.range = kModelRange;
    white.data = Tensor<float>::full({3, 64, 64}, 1.0f);
    white.range = kModelRange;
    const double wsum = 0.0448 + 0.2856 + 0.3001;
    const double expect = 1.0 - std::pow(1e-4 / 1.0001, 0.3001 / wsum);
    CHECK(semantic_loss(black, white, config) ==
          doctest::Approx(expect).epsilon(1e-7));
    CHECK(semantic_loss(black, white, config) > 0.9);
  }

  SUBCASE("image overload rejects metric-space inputs") {
    Image a;
    a.data = Tensor<float>::full({3, 8, 8}, 0.5f);
    a.range = kMetricRange;
    CHECK_THROWS(semantic_loss(a, a, config));
  }
}

TEST_CASE("robustness term") {
  GeneratorSpec gs;
  gs.base_width = 4;
  gs.num_residual_blocks = 1;
  gs.feature_tap_layers = {1};
  auto gen = Generator<double>::build(gs, 61);
  Rng rng(63);
  Tensor<double> x = random_tensor({3, 8, 8}, rng);
  const int out_unit = gs.num_units();  // 8

  SUBCASE("perturbing the output itself normalizes to exactly one") {
    // downstream of the final unit is the identity, so the measured distance
    // is the perturbation norm and the prefactor cancels it
    for (double mag : {0.05, 0.1, 0.2})
      CHECK(srunit_loss(gen, x, mag, 7, out_unit) == doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("small perturbations sit in the linear regime") {
    const double a = srunit_loss(gen, x, 1e-4, 7, 4);
    const double b = srunit_loss(gen, x, 2e-4, 7, 4);
    CHECK(a == doctest::Approx(b).epsilon(0.02));
    CHECK(a > 0.0);
  }

  SUBCASE("seed-deterministic") {
    CHECK(srunit_loss(gen, x, 0.1, 7, 4) == srunit_loss(gen, x, 0.1, 7, 4));
    CHECK(srunit_loss(gen, x, 0.1, 7, 4) != srunit_loss(gen, x, 0.1, 8, 4));
  }

  SUBCASE("bad magnitude or tap is fatal") {
    CHECK_THROWS_AS(srunit_loss(gen, x, 0.0, 7, 4), std::invalid_argument);
    CHECK_THROWS_AS(srunit_loss(gen, x, -1.0, 7, 4), std::invalid_argument);
    CHECK_THROWS_AS(srunit_loss(gen, x, 0.1, 7, 0), std::invalid_argument);
    CHECK_THROWS_AS(srunit_loss(gen, x, 0.1, 7, out_unit + 1), std::invalid_argument);
  }
}

TEST_CASE("objective recombination") {
  LossConfig config;
  LossBreakdown parts;
  parts.gan_g = 1;
  parts.patch_x = 1;
  parts.patch_y = 1;
  parts.semantic = 1;

  SUBCASE("weighted sum with the default lambdas") {
    CHECK(total_loss(parts, config).total == doctest::Approx(8.0).epsilon(1e-12));
  }

  SUBCASE("all zeros") {
    CHECK(total_loss(LossBreakdown{}, config).total == doctest::Approx(0.0));
  }

  SUBCASE("discriminator term is bookkeeping only") {
    LossBreakdown noisy = parts;
    noisy.gan_d = 123.0;
    CHECK(total_loss(noisy, config).total == total_loss(parts, config).total);
  }

  SUBCASE("zero semantic weight reduces to the contrastive objective") {
    LossConfig cut = config;
    cut.lambda_ss = 0;
    parts.gan_g = 0.7;
    parts.patch_x = 1.3;
    parts.patch_y = 0.4;
    parts.semantic = 9.9;  // must not contribute
    CHECK(total_loss(parts, cut).total ==
          doctest::Approx(0.7 + 1.3 + 0.4).epsilon(1e-12));
  }

  SUBCASE("plugin term joins only when present") {
    parts.srunit = 2.0;
    CHECK(total_loss(parts, config).total == doctest::Approx(8.0));
    parts.has_srunit = true;
    CHECK(total_loss(parts, config).total == doctest::Approx(10.0));
  }

  SUBCASE("non-finite components are fatal and named") {
    LossBreakdown bad = parts;
    bad.patch_y = std::numeric_limits<double>::quiet_NaN();
    try {
      total_loss(bad, config);
      FAIL("expected throw");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("patch_y") != std::string::npos);
    }
  }
}

TEST_CASE("adversarial gradients match finite differences") {
  Rng rng(71);
  std::vector<Tensor<double>> leaves = {random_tensor({1, 3, 3}, rng),
                                        random_tensor({1, 3, 3}, rng)};
  FdOptions opt;
  opt.step = 1e-4;
  check_gradients(leaves, [](Tape<double>&, std::vector<Var<double>>& v) {
    return lsgan_d_loss(v[0], v[1]);
  }, opt);
  check_gradients({leaves[1]}, [](Tape<double>&, std::vector<Var<double>>& v) {
    return lsgan_g_loss(v[0]);
  }, opt);
  check_gradients(leaves, [](Tape<double>&, std::vector<Var<double>>& v) {
    return logistic_d_loss(v[0], v[1]);
  }, opt);
  check_gradients({leaves[1]}, [](Tape<double>&, std::vector<Var<double>>& v) {
    return logistic_g_loss(v[0]);
  }, opt);
}

TEST_CASE("contrastive gradients match finite differences") {
  Rng rng(73);
  Tensor<double> q = unit_rows(1, 6, rng);
  Tensor<double> p = unit_rows(1, 6, rng);
  Tensor<double> n = unit_rows(5, 6, rng);
  FdOptions opt;
  opt.step = 1e-4;
  check_gradients({q, p, n}, [](Tape<double>& t, std::vector<Var<double>>& v) {
    return info_nce(t, v[0], v[1], v[2], 0.07);
  }, opt);

  Tensor<double> qa = unit_rows(3, 4, rng), pa = unit_rows(3, 4, rng);
  Tensor<double> qb = unit_rows(4, 4, rng), pb = unit_rows(4, 4, rng);
  check_gradients({qa, pa, qb, pb}, [](Tape<double>& t, std::vector<Var<double>>& v) {
    return patch_nce_from_projections(t, {v[0], v[2]}, {v[1], v[3]}, 0.5);
  }, opt);
}

TEST_CASE("projection head gradients match finite differences") {
  auto heads = ProjectionHeads<double>::build(ProjectionHeadSpec{}, {6}, 83);
  Rng rng(83);
  Tensor<double> rows_a = random_tensor({4, 6}, rng, 0.1, 1.0);
  Tensor<double> rows_b = random_tensor({4, 6}, rng, 0.1, 1.0);

  Tape<double> tape;
  ParamBind<double> bind(tape, true);
  Var<double> q = heads.project(tape, bind, 0, tape.constant(rows_a));
  Var<double> p = heads.project(tape, bind, 0, tape.constant(rows_b));
  Var<double> loss = patch_nce_from_projections(tape, {q}, {p}, 0.07);
  tape.backward(loss);

  auto eval = [&](const ProjectionHeads<double>& h) {
    Tape<double> t2;
    ParamBind<double> b2(t2, false);
    Var<double> q2 = h.project(t2, b2, 0, t2.constant(rows_a));
    Var<double> p2 = h.project(t2, b2, 0, t2.constant(rows_b));
    return patch_nce_from_projections(t2, {q2}, {p2}, 0.07).scalar();
  };

  Rng pick(85);
  const double h = 1e-5;
  for (std::size_t e = 0; e < heads.params.entries.size(); ++e) {
    const std::int64_t n = heads.params.entries[e].value.size();
    for (int s = 0; s < 2; ++s) {
      const std::int64_t i = static_cast<std::int64_t>(pick.uniform_int(n));
      ProjectionHeads<double> hp = heads;
      hp.params.entries[e].value.data[i] += h;
      const double fp = eval(hp);
      hp.params.entries[e].value.data[i] -= 2 * h;
      const double fm = eval(hp);
      const double fd = (fp - fm) / (2 * h);
      const double an = tape.grad(bind.vars[e]).data[i];
      const double err = std::abs(an - fd) / testutil::fd_scale(an, fd, 1e-4);
      INFO("entry ", heads.params.entries[e].name, " element ", i);
      CHECK(err <= 1e-3);
    }
  }
}

TEST_CASE("structure map gradients match finite differences") {
  Rng rng(87);
  Tensor<double> x = random_tensor({1, 12, 12}, rng, 0.2, 0.8);
  Tensor<double> y = x;
  for (std::int64_t i = 0; i < y.size(); ++i) y.data[i] += rng.uniform(-0.1, 0.1);
  FdOptions opt;
  opt.step = 1e-4;
  opt.samples_per_leaf = 8;
  check_gradients({x, y}, [](Tape<double>& t, std::vector<Var<double>>& v) {
    auto maps = cs_ss_maps(t, v[0], v[1], 1e-4, 9e-4, 11, 1.5);
    return ad::add(ad::sum_all(maps.cs), ad::sum_all(maps.ss));
  }, opt);
}

TEST_CASE("similarity and semantic gradients match finite differences") {
  Rng rng(89);
  Tensor<double> x = random_tensor({1, 32, 32}, rng, 0.2, 0.8);
  Tensor<double> y = x;
  for (std::int64_t i = 0; i < y.size(); ++i) y.data[i] += rng.uniform(-0.1, 0.1);
  FdOptions opt;
  opt.step = 1e-4;
  opt.samples_per_leaf = 6;
  LossConfig config;
  check_gradients({x, y}, [config](Tape<double>& t, std::vector<Var<double>>& v) {
    return ms_ssim(t, v[0], v[1], config);
  }, opt);

  Tensor<double> xm = random_tensor({3, 32, 32}, rng, -0.8, 0.8);
  Tensor<double> tm = xm;
  for (std::int64_t i = 0; i < tm.size(); ++i) tm.data[i] += rng.uniform(-0.1, 0.1);
  check_gradients({xm, tm}, [config](Tape<double>& t, std::vector<Var<double>>& v) {
    return semantic_loss(t, v[0], v[1], config);
  }, opt);
}

TEST_CASE("robustness term gradients match finite differences") {
  GeneratorSpec gs;
  gs.base_width = 2;
  gs.num_residual_blocks = 1;
  gs.feature_tap_layers = {1};
  auto gen = Generator<double>::build(gs, 91);
  Rng rng(93);
  Tensor<double> x = random_tensor({3, 8, 8}, rng);
  const double mag = 0.05;
  const std::uint64_t seed = 7;
  const int tap = 4;

  Tape<double> tape;
  ParamBind<double> bind(tape, true);
  Var<double> loss = srunit_term(tape, gen, bind, tape.constant(x), mag, seed, tap);
  tape.backward(loss);

  Rng pick(95);
  const double h = 1e-5;
  for (std::size_t e = 0; e < gen.params.entries.size(); e += 3) {
    const std::int64_t n = gen.params.entries[e].value.size();
    for (int s = 0; s < 2; ++s) {
      const std::int64_t i = static_cast<std::int64_t>(pick.uniform_int(n));
      Generator<double> gp = gen;
      gp.params.entries[e].value.data[i] += h;
      const double fp = srunit_loss(gp, x, mag, seed, tap);
      gp.params.entries[e].value.data[i] -= 2 * h;
      const double fm = srunit_loss(gp, x, mag, seed, tap);
      const double fd = (fp - fm) / (2 * h);
      const double an = tape.grad(bind.vars[e]).data[i];
      const double err = std::abs(an - fd) / testutil::fd_scale(an, fd, 1e-4);
      INFO("entry ", gen.params.entries[e].name, " element ", i);
      CHECK(err <= 1e-3);
    }
  }
}

}  // TEST_SUITE
