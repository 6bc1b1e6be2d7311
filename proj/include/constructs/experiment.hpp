#pragma once

// Experiment-level configuration (one JSON document composing every spec)
// and the command implementations behind the CLI. Commands return process
// exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "constructs/evaluation.hpp"
#include "constructs/segmenter.hpp"
#include "constructs/training.hpp"

namespace constructs {

struct ExperimentConfig {
  std::string data_root;
  std::string domain_x = "X";
  std::string domain_y = "Y";
  std::string out_dir;
  std::uint64_t seed = 1;
  int eval_folds = 3;
  std::vector<double> sweep_lambdas{1, 2, 3, 5, 10};
  GeneratorSpec generator;
  DiscriminatorSpec discriminator;
  ProjectionHeadSpec projection_head;
  TrainConfig train;
  SegmenterSpec segmenter;
};

ordered_json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const ordered_json& j, const std::string& path);

// Reads and strictly parses a config file; any problem is a ConfigError.
ExperimentConfig load_experiment_config(const std::string& file_path);

// Flattened list of every accepted config key, for --help.
std::string config_keys_help();

struct TrainOptions {
  std::string config_path;
  std::string out_override;
  std::optional<std::uint64_t> seed_override;
};
int cmd_train(const TrainOptions& opt);

struct TranslateOptions {
  std::string bundle_path;
  std::string dataset_path;  // path to one domain directory
  std::string out_dir;
};
int cmd_translate(const TranslateOptions& opt);

struct EvalOptions {
  std::string protocol;  // eval1 | eval2
  std::string config_path;
  std::string real_path;        // real domain directory
  std::string translated_path;  // translated domain directory
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;
};
int cmd_eval(const EvalOptions& opt);

struct SweepOptions {
  std::string config_path;
  std::string out_override;
  std::optional<std::uint64_t> seed_override;
  std::vector<double> lambdas;  // empty = config / default list
};
int cmd_sweep(const SweepOptions& opt);

struct MakeToyOptions {
  std::string out_dir;
  int num_images = 500;
  int image_size = 64;
  int num_classes = 4;
  int num_groups = 5;
  std::uint64_t seed = 1;
};
int cmd_make_toy(const MakeToyOptions& opt);

struct GridOptions {
  std::vector<std::string> dirs;
  std::vector<std::string> labels;  // optional, must match dirs when given
  std::string out_png;
  int gutter = 2;
};
int cmd_grid(const GridOptions& opt);

}  // namespace constructs
