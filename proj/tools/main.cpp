// Command-line surface: train / translate / eval / sweep / make-toy / grid.
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <CLI11.hpp>

#include "constructs/experiment.hpp"

using namespace constructs;

int main(int argc, char** argv) {
  CLI::App app{
      "constructs: one-sided unpaired image translation with contrastive and\n"
      "structural-similarity objectives, plus segmentation-based evaluation."};
  app.require_subcommand(1);
  int rc = 0;

  TrainOptions train_opt;
  auto* train_cmd = app.add_subcommand("train", "Train a translation model from a JSON config");
  train_cmd->add_option("--config", train_opt.config_path, "Experiment config (JSON)")
      ->required();
  train_cmd->add_option("--out", train_opt.out_override, "Output directory (overrides out_dir)");
  train_cmd->add_option("--seed", train_opt.seed_override, "Seed override");
  train_cmd->footer(config_keys_help());
  train_cmd->callback([&] { rc = cmd_train(train_opt); });

  TranslateOptions tr_opt;
  auto* tr_cmd = app.add_subcommand("translate", "Translate a dataset with a trained checkpoint");
  tr_cmd->add_option("--bundle", tr_opt.bundle_path, "Checkpoint archive")->required();
  tr_cmd->add_option("--data", tr_opt.dataset_path, "Domain directory to translate")->required();
  tr_cmd->add_option("--out", tr_opt.out_dir, "Output dataset root")->required();
  tr_cmd->callback([&] { rc = cmd_translate(tr_opt); });

  EvalOptions ev_opt;
  auto* ev_cmd = app.add_subcommand("eval", "Run a segmentation-based evaluation protocol");
  ev_cmd->add_option("--protocol", ev_opt.protocol, "eval1 or eval2")->required();
  ev_cmd->add_option("--config", ev_opt.config_path,
                     "Experiment config (segmenter.*, eval_folds, seed)");
  ev_cmd->add_option("--real", ev_opt.real_path, "Real domain directory")->required();
  ev_cmd->add_option("--translated", ev_opt.translated_path, "Translated domain directory")
      ->required();
  ev_cmd->add_option("--out", ev_opt.out_dir, "Report output directory")->required();
  ev_cmd->add_option("--seed", ev_opt.seed_override, "Seed override");
  ev_cmd->footer(config_keys_help());
  ev_cmd->callback([&] { rc = cmd_eval(ev_opt); });

  SweepOptions sw_opt;
  auto* sw_cmd = app.add_subcommand(
      "sweep", "Train one model per semantic-loss weight and tabulate eval-1 scores");
  sw_cmd->add_option("--config", sw_opt.config_path, "Experiment config (JSON)")->required();
  sw_cmd->add_option("--out", sw_opt.out_override, "Output directory (overrides out_dir)");
  sw_cmd->add_option("--seed", sw_opt.seed_override, "Seed override");
  sw_cmd->add_option("--lambdas", sw_opt.lambdas,
                     "Semantic-loss weights to sweep (default: config sweep_lambdas)");
  sw_cmd->footer(config_keys_help());
  sw_cmd->callback([&] { rc = cmd_sweep(sw_opt); });

  MakeToyOptions toy_opt;
  auto* toy_cmd = app.add_subcommand("make-toy", "Generate the procedural two-domain dataset");
  toy_cmd->add_option("--out", toy_opt.out_dir, "Dataset root to create")->required();
  toy_cmd->add_option("--num-images", toy_opt.num_images, "Images per domain (default 500)");
  toy_cmd->add_option("--size", toy_opt.image_size, "Square image size (default 64)");
  toy_cmd->add_option("--classes", toy_opt.num_classes,
                      "Class count including background (default 4)");
  toy_cmd->add_option("--groups", toy_opt.num_groups, "Round-robin group count (default 5)");
  toy_cmd->add_option("--seed", toy_opt.seed, "Generation seed (default 1)");
  toy_cmd->callback([&] { rc = cmd_make_toy(toy_opt); });

  GridOptions grid_opt;
  auto* grid_cmd =
      app.add_subcommand("grid", "Compose aligned image directories into a labeled grid PNG");
  grid_cmd->add_option("--dir", grid_opt.dirs, "Image directory, one per column (repeatable)")
      ->required();
  grid_cmd->add_option("--label", grid_opt.labels, "Column header (repeatable, matches --dir)");
  grid_cmd->add_option("--out", grid_opt.out_png, "Output PNG path")->required();
  grid_cmd->add_option("--gutter", grid_opt.gutter, "Spacing between cells in pixels");
  grid_cmd->callback([&] { rc = cmd_grid(grid_opt); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  return rc;
}
