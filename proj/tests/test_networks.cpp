#include <cmath>

#include "constructs/networks.hpp"
#include "constructs/rng.hpp"
#include "doctest.h"

using namespace constructs;

namespace {

GeneratorSpec small_gen_spec(int width = 8, int blocks = 2,
                             std::vector<int> taps = {1}) {
  GeneratorSpec s;
  s.base_width = width;
  s.num_residual_blocks = blocks;
  s.feature_tap_layers = std::move(taps);
  return s;
}

Tensor<float> random_image(int h, int w, std::uint64_t seed) {
  Tensor<float> x({3, h, w});
  Rng rng(seed);
  for (std::int64_t i = 0; i < x.size(); ++i)
    x.data[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  return x;
}

}  // namespace

TEST_SUITE("networks") {

TEST_CASE("generator preserves shape and stays in range") {
  auto gen = Generator<float>::build(small_gen_spec(), 7);
  for (auto [h, w] : {std::pair{64, 64}, std::pair{32, 48}}) {
    Tensor<float> out = translate_image(gen, random_image(h, w, 3));
    REQUIRE(out.dims == std::vector<int>{3, h, w});
    CHECK(out.data.minCoeff() >= -1.0f);
    CHECK(out.data.maxCoeff() <= 1.0f);
  }
}

TEST_CASE("generator rejects bad inputs and specs") {
  auto gen = Generator<float>::build(small_gen_spec(), 7);
  Tape<float> tape;
  ParamBind<float> bind(tape, false);
  CHECK_THROWS(gen.forward(tape, bind, tape.constant(Tensor<float>({1, 32, 32}))));
  CHECK_THROWS(gen.forward(tape, bind, tape.constant(Tensor<float>({3, 30, 32}))));
  CHECK_THROWS(gen.forward(tape, bind, tape.constant(Tensor<float>({3, 32, 34}))));

  CHECK_THROWS(Generator<float>::build(small_gen_spec(8, 2, {}), 1));
  CHECK_THROWS(Generator<float>::build(small_gen_spec(8, 2, {0, 1}), 1));
  CHECK_THROWS(Generator<float>::build(small_gen_spec(8, 2, {3, 3}), 1));
  CHECK_THROWS(Generator<float>::build(small_gen_spec(8, 2, {1, 99}), 1));
  CHECK_THROWS(Generator<float>::build(small_gen_spec(0, 2), 1));
  CHECK_THROWS(Generator<float>::build(small_gen_spec(8, 0), 1));
}

TEST_CASE("unit count follows the block schedule") {
  CHECK(GeneratorSpec{}.num_units() == 24);  // 9 residual blocks
  GeneratorSpec toy = small_gen_spec(16, 4);
  CHECK(toy.num_units() == 14);
  CHECK(GeneratorSpec{}.feature_tap_layers == std::vector<int>{1, 4, 8, 12, 16});
}

TEST_CASE("taps report the documented channel and extent per unit") {
  // one tap in every stage: stem, two downs, a residual, both ups, output
  auto spec = small_gen_spec(8, 4, {1, 2, 3, 11, 12, 13, 14});
  auto gen = Generator<float>::build(spec, 11);
  CHECK(gen.tap_channels() == std::vector<int>{8, 16, 32, 32, 16, 8, 3});

  Tape<float> tape;
  ParamBind<float> bind(tape, false);
  auto pass = gen.forward(tape, bind, tape.constant(random_image(32, 32, 5)));
  REQUIRE(pass.taps.size() == 7);
  const std::vector<std::pair<int, int>> extents = {
      {32, 32}, {16, 16}, {8, 8}, {8, 8}, {16, 16}, {32, 32}, {32, 32}};
  auto chans = gen.tap_channels();
  for (std::size_t i = 0; i < pass.taps.size(); ++i) {
    const auto& t = pass.taps[i].value();
    CHECK(t.dim(0) == chans[i]);
    CHECK(t.dim(1) == extents[i].first);
    CHECK(t.dim(2) == extents[i].second);
  }
}

TEST_CASE("default taps give five maps with non-increasing extent") {
  GeneratorSpec spec;
  spec.base_width = 8;  // keep the default depth and tap schedule, shrink width
  auto gen = Generator<float>::build(spec, 2);
  auto feats = extract_features(gen, random_image(64, 64, 9));
  REQUIRE(feats.size() == 5);
  std::int64_t prev = std::numeric_limits<std::int64_t>::max();
  for (const auto& f : feats) {
    const std::int64_t n = static_cast<std::int64_t>(f.dim(1)) * f.dim(2);
    CHECK(n <= prev);
    prev = n;
  }
}

TEST_CASE("feature extraction is pure and deterministic") {
  auto gen = Generator<float>::build(small_gen_spec(8, 2, {1, 3}), 13);
  Tensor<float> x = random_image(32, 32, 21);
  Tensor<float> before = translate_image(gen, x);
  auto f1 = extract_features(gen, x);
  auto f2 = extract_features(gen, x);
  REQUIRE(f1.size() == f2.size());
  for (std::size_t i = 0; i < f1.size(); ++i)
    CHECK((f1[i].data - f2[i].data).abs().maxCoeff() == 0.0f);
  Tensor<float> after = translate_image(gen, x);
  CHECK((before.data - after.data).abs().maxCoeff() == 0.0f);
}

TEST_CASE("translation by the encoder stride shifts the output") {
  // content window far enough from the border that no pixel mixes window and
  // border responses; normalization statistics then match exactly and the
  // network is equivariant on the interior
  auto gen = Generator<double>::build(small_gen_spec(8, 2), 17);
  const int n = 160, win = 24, off_a = 68, shift = 4;
  Tensor<double> window({3, win, win});
  Rng rng(101);
  for (std::int64_t i = 0; i < window.size(); ++i)
    window.data[i] = rng.uniform(-1.0, 1.0);

  auto place = [&](int off) {
    Tensor<double> x({3, n, n});
    x.data.setConstant(0.2);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < win; ++y)
        for (int xx = 0; xx < win; ++xx)
          x.at(c, off + y, off + xx) = window.at(c, y, xx);
    return x;
  };

  Tensor<double> ta = translate_image(gen, place(off_a));
  Tensor<double> tb = translate_image(gen, place(off_a + shift));
  double worst = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 60; y < 100; ++y)
      for (int x = 60; x < 100; ++x)
        worst = std::max(worst,
                         std::abs(ta.at(c, y, x) - tb.at(c, y + shift, x + shift)));
  CHECK(worst <= 1e-4);
}

TEST_CASE("paired sampling is aligned, deterministic and unit-norm") {
  auto spec = small_gen_spec(8, 2, {1, 2});
  auto gen = Generator<float>::build(spec, 23);
  auto heads = ProjectionHeads<float>::build(ProjectionHeadSpec{}, gen.tap_channels(), 23);

  Tape<float> tape;
  ParamBind<float> gen_bind(tape, false);
  ParamBind<float> bind(tape, false);  // heads only; one bind per store
  auto pass = gen.forward(tape, gen_bind, tape.constant(random_image(16, 16, 31)),
                          gen.max_tap());

  SUBCASE("identical features give identical projections") {
    Rng rng(4);
    auto pp = sample_and_project(tape, heads, bind, pass.taps, pass.taps, 8, rng);
    REQUIRE(pp.a.size() == 2);
    for (std::size_t l = 0; l < pp.a.size(); ++l)
      CHECK((pp.a[l].value().data - pp.b[l].value().data).abs().maxCoeff() == 0.0f);
  }

  SUBCASE("same seed, same locations") {
    Rng r1(4), r2(4);
    auto p1 = sample_and_project(tape, heads, bind, pass.taps, pass.taps, 8, r1);
    auto p2 = sample_and_project(tape, heads, bind, pass.taps, pass.taps, 8, r2);
    for (std::size_t l = 0; l < p1.a.size(); ++l)
      CHECK((p1.a[l].value().data - p2.a[l].value().data).abs().maxCoeff() == 0.0f);
  }

  SUBCASE("request beyond the map is clamped to every location") {
    Rng rng(4);
    auto pp = sample_and_project(tape, heads, bind, pass.taps, pass.taps, 9999, rng);
    CHECK(pp.num_locations[0] == 16 * 16);  // tap 1 at full extent
    CHECK(pp.num_locations[1] == 8 * 8);
    CHECK(pp.a[0].value().dim(0) == 256);
  }

  SUBCASE("projections are unit rows") {
    // a location whose channels are all zero (every activation clipped) can
    // only map to the zero vector; any other row comes back unit-norm
    Rng rng(4);
    auto pp = sample_and_project(tape, heads, bind, pass.taps, pass.taps, 32, rng);
    int unit_rows = 0;
    for (const auto& v : pp.a) {
      const auto& t = v.value();
      for (int r = 0; r < t.dim(0); ++r) {
        double norm = 0;
        for (int c = 0; c < t.dim(1); ++c) norm += static_cast<double>(t.at(r, c)) * t.at(r, c);
        norm = std::sqrt(norm);
        CHECK((norm == 0.0 || std::abs(norm - 1.0) <= 1e-5));
        unit_rows += norm != 0.0;
      }
    }
    CHECK(unit_rows >= 48);  // degenerate rows are the rare case
  }

  SUBCASE("zero rows are the only non-unit projections") {
    Tensor<float> rows({3, 8});
    Rng rng(8);
    for (int c = 0; c < 8; ++c) {
      rows.at(1, c) = static_cast<float>(rng.uniform(-1.0, 1.0));
      rows.at(2, c) = static_cast<float>(rng.uniform(0.1, 1.0));
    }
    auto v = heads.project(tape, bind, 0, tape.constant(rows));
    const auto& t = v.value();
    for (int c = 0; c < t.dim(1); ++c) CHECK(t.at(0, c) == 0.0f);
    for (int r : {1, 2}) {
      double norm = 0;
      for (int c = 0; c < t.dim(1); ++c) norm += static_cast<double>(t.at(r, c)) * t.at(r, c);
      CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-5);
    }
  }

  SUBCASE("mismatched layer counts and shapes are fatal") {
    Rng rng(4);
    std::vector<Var<float>> one_layer = {pass.taps[0]};
    CHECK_THROWS(sample_and_project(tape, heads, bind, one_layer, one_layer, 8, rng));
    auto other = gen.forward(tape, gen_bind, tape.constant(random_image(32, 32, 6)),
                             gen.max_tap());
    CHECK_THROWS(sample_and_project(tape, heads, bind, pass.taps, other.taps, 8, rng));
  }

  SUBCASE("a bind reused across stores is rejected") {
    Rng rng(4);
    CHECK_THROWS_AS(sample_and_project(tape, heads, gen_bind, pass.taps, pass.taps, 8, rng),
                    std::logic_error);
  }
}

TEST_CASE("discriminator score map shapes") {
  DiscriminatorSpec spec;
  spec.base_width = 8;
  auto d = Discriminator<float>::build(spec, 3);
  CHECK(discriminator_scores(d, random_image(64, 64, 1)).dims ==
        std::vector<int>{1, 6, 6});
  CHECK(discriminator_scores(d, random_image(256, 512, 2)).dims ==
        std::vector<int>{1, 30, 62});
}

TEST_CASE("normalized conv weights have unit spectral norm") {
  DiscriminatorSpec spec;
  spec.base_width = 16;
  auto d = Discriminator<float>::build(spec, 9);
  REQUIRE(d.sn.size() == d.convs.size());
  for (std::size_t i = 0; i < d.convs.size(); ++i) {
    const double r = d.normalized_spectral_norm(static_cast<int>(i));
    CHECK(r >= 1.0 - 1e-4);
    CHECK(r <= 1.0 + 1e-3);
  }
  // the estimate keeps tracking as training-mode passes update it
  for (int it = 0; it < 5; ++it) d.power_iterate();
  for (std::size_t i = 0; i < d.convs.size(); ++i)
    CHECK(d.normalized_spectral_norm(static_cast<int>(i)) <= 1.0 + 1e-3);
}

TEST_CASE("patch score ignores changes outside its receptive field") {
  // default spec; patch (5,5) of a 96x96 input sees rows/cols [17,86]
  auto d = Discriminator<float>::build(DiscriminatorSpec{}, 5);
  Tensor<float> base = random_image(96, 96, 41);
  Tensor<float> variant = base;
  Rng rng(42);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 96; ++y)
      for (int x = 0; x < 96; ++x)
        if (y < 17 || y > 86 || x < 17 || x > 86)
          variant.at(c, y, x) = static_cast<float>(rng.uniform(-1.0, 1.0));

  Tensor<float> s1 = discriminator_scores(d, base);
  Tensor<float> s2 = discriminator_scores(d, variant);
  REQUIRE(s1.dims == std::vector<int>{1, 10, 10});
  CHECK(s1.at(0, 5, 5) == s2.at(0, 5, 5));
  CHECK(s1.at(0, 0, 0) != s2.at(0, 0, 0));  // border patches do see the change
}

TEST_CASE("patch receptive field spans seventy pixels") {
  auto d = Discriminator<float>::build(DiscriminatorSpec{}, 5);
  Tape<float> tape;
  Var<float> x = tape.input(random_image(96, 96, 43), true);
  ParamBind<float> bind(tape, false);
  Var<float> scores = d.forward(tape, bind, x, false);
  Var<float> one = ad::sum_all(ad::spatial_gather(scores, {5 * 10 + 5}));
  tape.backward(one);
  const auto& g = tape.grad(x);

  int lo_y = 96, hi_y = -1, lo_x = 96, hi_x = -1;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 96; ++y)
      for (int xx = 0; xx < 96; ++xx)
        if (g.at(c, y, xx) != 0.0f) {
          lo_y = std::min(lo_y, y);
          hi_y = std::max(hi_y, y);
          lo_x = std::min(lo_x, xx);
          hi_x = std::max(hi_x, xx);
        }
  CHECK(lo_y == 17);
  CHECK(hi_y == 86);
  CHECK(lo_x == 17);
  CHECK(hi_x == 86);
  CHECK(hi_y - lo_y + 1 == 70);
}

TEST_CASE("parameter counts match frozen goldens") {
  CHECK(Generator<float>::build(GeneratorSpec{}, 1).params.total_size() == 11378179);

  GeneratorSpec toy = small_gen_spec(16, 4, {1, 3, 5, 8, 11});
  auto gen = Generator<float>::build(toy, 1);
  CHECK(gen.params.total_size() == 346371);

  CHECK(Discriminator<float>::build(DiscriminatorSpec{}, 1).params.total_size() ==
        2764737);
  DiscriminatorSpec dtoy;
  dtoy.base_width = 32;
  CHECK(Discriminator<float>::build(dtoy, 1).params.total_size() == 694241);

  auto heads = ProjectionHeads<float>::build(ProjectionHeadSpec{}, gen.tap_channels(), 1);
  CHECK(heads.params.total_size() == 399872);
}

TEST_CASE("projection head spec validation") {
  ProjectionHeadSpec bad;
  bad.width = 0;
  CHECK_THROWS(ProjectionHeads<float>::build(bad, {8}, 1));
}

}  // TEST_SUITE
