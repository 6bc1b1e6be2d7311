// Times one training iteration at candidate toy model sizes; not a test.

#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "constructs/training.hpp"

using namespace constructs;
using Clock = std::chrono::steady_clock;

int main(int argc, char** argv) {
  const int gen_w = argc > 1 ? std::atoi(argv[1]) : 16;
  const int disc_w = argc > 2 ? std::atoi(argv[2]) : 32;
  const int iters = argc > 3 ? std::atoi(argv[3]) : 20;

  GeneratorSpec gs;
  gs.base_width = gen_w;
  gs.num_residual_blocks = 4;
  gs.feature_tap_layers = {1, 3, 5, 8, 11};
  DiscriminatorSpec ds;
  ds.base_width = disc_w;
  ProjectionHeadSpec hs;
  TrainConfig tc;
  tc.total_iters = 20000;
  tc.seed = 3;

  auto bundle = init_bundle<float>(gs, ds, hs, tc);
  auto toy = make_toy_domains(8, 64, 4, 5, 2);
  std::vector<Tensor<float>> xb{toy.first.images[0].data}, yb{toy.second.images[0].data};

  train_step(bundle, xb, yb);  // warm up
  auto t0 = Clock::now();
  for (int i = 0; i < iters; ++i) {
    xb[0] = toy.first.images[static_cast<std::size_t>(i % 8)].data;
    yb[0] = toy.second.images[static_cast<std::size_t>(i % 8)].data;
    train_step(bundle, xb, yb);
  }
  const double ms =
      std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / iters;
  std::printf("gen_w=%d disc_w=%d: %.1f ms/step, 20k iters = %.1f min\n", gen_w, disc_w, ms,
              ms * 20000 / 60000);
  return 0;
}
