#include "constructs/experiment.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "constructs/gridviz.hpp"

namespace fs = std::filesystem;

namespace constructs {

namespace {

// Validation failures triggered by user-supplied configuration become
// ConfigErrors (exit code 2); the same checks hit at runtime stay exit 1.
template <typename F>
void check_config(F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << content;
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& origin) {
  ordered_json j = ordered_json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError(origin + ": not valid JSON");
  return experiment_config_from_json(j, "config");
}

// dataset path -> (root, domain tag)
std::pair<std::string, std::string> split_dataset_path(const std::string& path) {
  fs::path p = fs::path(path).lexically_normal();
  if (p.has_filename() == false) p = p.parent_path();
  if (p.filename().empty() || p.filename() == ".")
    throw ConfigError("dataset path '" + path + "' has no domain component");
  return {p.parent_path().string(), p.filename().string()};
}

int run_command(const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

void apply_overrides(ExperimentConfig& cfg, const std::string& out_override,
                     const std::optional<std::uint64_t>& seed_override) {
  if (!out_override.empty()) cfg.out_dir = out_override;
  if (seed_override) {
    cfg.seed = *seed_override;
    cfg.train.seed = *seed_override;
  }
}

void validate_experiment(const ExperimentConfig& cfg, bool need_out) {
  check_config([&] {
    cfg.generator.validate();
    cfg.discriminator.validate();
    cfg.projection_head.validate();
    cfg.train.validate();
    cfg.segmenter.validate();
    if (cfg.eval_folds < 2) throw std::invalid_argument("config.eval_folds must be >= 2");
    if (cfg.data_root.empty()) throw std::invalid_argument("config.data_root is required");
    if (need_out && cfg.out_dir.empty())
      throw std::invalid_argument("config.out_dir is required (or pass --out)");
  });
}

void flatten_keys(const ordered_json& j, const std::string& prefix, std::string& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      flatten_keys(*it, key, out);
    } else {
      if (!out.empty()) out += ", ";
      out += key;
    }
  }
}

}  // namespace

ordered_json to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["data_root"] = c.data_root;
  j["domain_x"] = c.domain_x;
  j["domain_y"] = c.domain_y;
  j["out_dir"] = c.out_dir;
  j["seed"] = c.seed;
  j["eval_folds"] = c.eval_folds;
  j["sweep_lambdas"] = c.sweep_lambdas;
  j["generator"] = to_json(c.generator);
  j["discriminator"] = to_json(c.discriminator);
  j["projection_head"] = to_json(c.projection_head);
  j["train"] = to_json(c.train);
  j["segmenter"] = to_json(c.segmenter);
  return j;
}

ExperimentConfig experiment_config_from_json(const ordered_json& j, const std::string& path) {
  ExperimentConfig c;
  JsonReader r(j, path);
  r.field("data_root", c.data_root);
  r.field("domain_x", c.domain_x);
  r.field("domain_y", c.domain_y);
  r.field("out_dir", c.out_dir);
  r.field("seed", c.seed);
  r.field("eval_folds", c.eval_folds);
  r.field("sweep_lambdas", c.sweep_lambdas);
  if (r.has("generator"))
    c.generator = generator_spec_from_json(r.child("generator"), r.child_path("generator"));
  if (r.has("discriminator"))
    c.discriminator =
        discriminator_spec_from_json(r.child("discriminator"), r.child_path("discriminator"));
  if (r.has("projection_head"))
    c.projection_head =
        projection_head_spec_from_json(r.child("projection_head"), r.child_path("projection_head"));
  // the top-level seed cascades into training unless the train block pins its own
  c.train.seed = c.seed;
  if (r.has("train")) c.train = train_config_from_json(r.child("train"), r.child_path("train"), c.train);
  if (r.has("segmenter"))
    c.segmenter = segmenter_spec_from_json(r.child("segmenter"), r.child_path("segmenter"));
  r.done();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& file_path) {
  return parse_experiment_config(read_text_file(file_path), file_path);
}

std::string config_keys_help() {
  std::string keys;
  flatten_keys(to_json(ExperimentConfig{}), "", keys);
  return "Config keys (JSON, strict; unknown keys are rejected):\n  " + keys;
}

int cmd_train(const TrainOptions& opt) {
  return run_command([&] {
    const std::string raw = read_text_file(opt.config_path);
    ExperimentConfig cfg = parse_experiment_config(raw, opt.config_path);
    apply_overrides(cfg, opt.out_override, opt.seed_override);
    validate_experiment(cfg, true);

    DomainDataset x_domain = load_dataset(cfg.data_root, cfg.domain_x);
    DomainDataset y_domain = load_dataset(cfg.data_root, cfg.domain_y);

    fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");
    write_text_file((fs::path(cfg.out_dir) / "config.json").string(), raw);
    write_text_file((fs::path(cfg.out_dir) / "config_resolved.json").string(),
                    to_json(cfg).dump(2) + "\n");

    auto bundle =
        init_bundle<float>(cfg.generator, cfg.discriminator, cfg.projection_head, cfg.train);
    std::ofstream csv(fs::path(cfg.out_dir) / "loss_log.csv",
                      std::ios::binary | std::ios::trunc);
    csv << kLossCsvHeader << "\n";
    train<float>(
        bundle, x_domain, y_domain,
        [&](const StepRecord& rec) {
          csv << loss_csv_row(rec) << "\n";
          if (rec.iter % cfg.train.checkpoint_every == 0)
            std::fprintf(stderr, "iter %lld/%d total=%.4f\n",
                         static_cast<long long>(rec.iter), cfg.train.total_iters,
                         rec.losses.total);
        },
        [&](const ModelBundle<float>& b) {
          char name[64];
          std::snprintf(name, sizeof name, "iter_%08lld.ckpt",
                        static_cast<long long>(b.iter));
          save_checkpoint(b, (fs::path(cfg.out_dir) / "checkpoints" / name).string());
        });
    save_checkpoint(bundle, (fs::path(cfg.out_dir) / "checkpoints" / "final.ckpt").string());
    csv.close();
    if (!csv) throw std::runtime_error("loss log write failed");
  });
}

int cmd_translate(const TranslateOptions& opt) {
  return run_command([&] {
    if (opt.bundle_path.empty() || opt.dataset_path.empty() || opt.out_dir.empty())
      throw ConfigError("translate requires --bundle, --data and --out");
    auto bundle = load_checkpoint<float>(opt.bundle_path);
    auto [root, tag] = split_dataset_path(opt.dataset_path);
    DomainDataset ds = load_dataset(root, tag);
    DomainDataset translated = translate(bundle, ds);
    fs::create_directories(opt.out_dir);
    save_dataset(translated, opt.out_dir);
  });
}

int cmd_eval(const EvalOptions& opt) {
  return run_command([&] {
    if (opt.protocol != "eval1" && opt.protocol != "eval2")
      throw ConfigError("--protocol must be eval1 or eval2, got '" + opt.protocol + "'");
    if (opt.real_path.empty() || opt.translated_path.empty() || opt.out_dir.empty())
      throw ConfigError("eval requires --real, --translated and --out");
    ExperimentConfig cfg =
        opt.config_path.empty() ? ExperimentConfig{} : load_experiment_config(opt.config_path);
    if (opt.seed_override) cfg.seed = *opt.seed_override;
    check_config([&] {
      cfg.segmenter.validate();
      if (cfg.eval_folds < 2) throw std::invalid_argument("config.eval_folds must be >= 2");
    });

    auto [real_root, real_tag] = split_dataset_path(opt.real_path);
    auto [tr_root, tr_tag] = split_dataset_path(opt.translated_path);
    DomainDataset real = load_dataset(real_root, real_tag);
    DomainDataset translated = load_dataset(tr_root, tr_tag);
    fs::create_directories(opt.out_dir);

    if (opt.protocol == "eval1") {
      Eval1Result r = eval1<float>(real, translated, cfg.segmenter, cfg.eval_folds, cfg.seed,
                                   opt.translated_path);
      for (const auto& f : r.folds) {
        char name[48];
        std::snprintf(name, sizeof name, "eval1_fold%d.json", f.fold_id);
        write_text_file((fs::path(opt.out_dir) / name).string(), to_json(f).dump(2) + "\n");
      }
      write_text_file((fs::path(opt.out_dir) / "eval1_aggregate.json").string(),
                      to_json(r).dump(2) + "\n");
      write_text_file((fs::path(opt.out_dir) / "eval1.csv").string(), eval1_csv(r));
    } else {
      Eval2Result r = eval2<float>(translated, real, cfg.segmenter, cfg.seed,
                                   opt.translated_path);
      write_text_file((fs::path(opt.out_dir) / "eval2.json").string(),
                      to_json(r).dump(2) + "\n");
      write_text_file((fs::path(opt.out_dir) / "eval2.csv").string(), eval2_csv(r));
    }
  });
}

int cmd_sweep(const SweepOptions& opt) {
  return run_command([&] {
    const std::string raw = read_text_file(opt.config_path);
    ExperimentConfig cfg = parse_experiment_config(raw, opt.config_path);
    apply_overrides(cfg, opt.out_override, opt.seed_override);
    validate_experiment(cfg, true);
    const std::vector<double> lambdas = opt.lambdas.empty() ? cfg.sweep_lambdas : opt.lambdas;
    if (lambdas.empty()) throw ConfigError("sweep: empty lambda list");

    DomainDataset x_domain = load_dataset(cfg.data_root, cfg.domain_x);
    DomainDataset y_domain = load_dataset(cfg.data_root, cfg.domain_y);
    fs::create_directories(cfg.out_dir);
    write_text_file((fs::path(cfg.out_dir) / "config.json").string(), raw);
    write_text_file((fs::path(cfg.out_dir) / "config_resolved.json").string(),
                    to_json(cfg).dump(2) + "\n");

    std::ofstream loss_csv;
    double open_lambda = std::numeric_limits<double>::quiet_NaN();
    auto on_step = [&](double lam, const StepRecord& rec) {
      if (!(lam == open_lambda)) {
        char dir[48];
        std::snprintf(dir, sizeof dir, "lambda_%g", lam);
        fs::create_directories(fs::path(cfg.out_dir) / dir);
        loss_csv.close();
        loss_csv.open(fs::path(cfg.out_dir) / dir / "loss_log.csv",
                      std::ios::binary | std::ios::trunc);
        loss_csv << kLossCsvHeader << "\n";
        open_lambda = lam;
      }
      loss_csv << loss_csv_row(rec) << "\n";
      if (rec.iter % cfg.train.checkpoint_every == 0)
        std::fprintf(stderr, "lambda %g iter %lld/%d\n", lam, static_cast<long long>(rec.iter),
                     cfg.train.total_iters);
    };
    auto rows = sensitivity_sweep<float>(x_domain, y_domain, cfg.generator, cfg.discriminator,
                                         cfg.projection_head, cfg.train, cfg.segmenter, lambdas,
                                         cfg.eval_folds, cfg.seed, on_step);
    write_text_file((fs::path(cfg.out_dir) / "sweep.csv").string(), sweep_csv(rows));
  });
}

int cmd_make_toy(const MakeToyOptions& opt) {
  return run_command([&] {
    if (opt.out_dir.empty()) throw ConfigError("make-toy requires --out");
    check_config([&] {
      if (opt.num_images < 1) throw std::invalid_argument("make-toy: --num-images must be >= 1");
      if (opt.image_size < 16 || opt.image_size % 16 != 0)
        throw std::invalid_argument("make-toy: --size must be a positive multiple of 16");
      if (opt.num_classes < 2) throw std::invalid_argument("make-toy: --classes must be >= 2");
      if (opt.num_groups < 1) throw std::invalid_argument("make-toy: --groups must be >= 1");
    });
    auto [x_domain, y_domain] =
        make_toy_domains(opt.num_images, opt.image_size, opt.num_classes, opt.seed,
                         opt.num_groups);
    fs::create_directories(opt.out_dir);
    save_dataset(x_domain, opt.out_dir);
    save_dataset(y_domain, opt.out_dir);
  });
}

int cmd_grid(const GridOptions& opt) {
  return run_command([&] {
    if (opt.dirs.empty()) throw ConfigError("grid requires at least one --dir");
    if (opt.out_png.empty()) throw ConfigError("grid requires --out");
    if (!opt.labels.empty() && opt.labels.size() != opt.dirs.size())
      throw ConfigError("grid: --label count must match --dir count");

    std::vector<GridColumn> columns;
    for (std::size_t d = 0; d < opt.dirs.size(); ++d) {
      GridColumn col;
      col.label = d < opt.labels.size() ? opt.labels[d]
                                        : fs::path(opt.dirs[d]).filename().string();
      std::vector<std::string> files;
      if (!fs::is_directory(opt.dirs[d]))
        throw ConfigError("grid: '" + opt.dirs[d] + "' is not a directory");
      for (const auto& e : fs::directory_iterator(opt.dirs[d]))
        if (e.path().extension() == ".png") files.push_back(e.path().string());
      std::sort(files.begin(), files.end());
      if (files.empty()) throw ConfigError("grid: no .png files in '" + opt.dirs[d] + "'");
      for (const auto& f : files) col.images.push_back(load_image_png(f));
      columns.push_back(std::move(col));
    }
    for (const auto& col : columns)
      if (col.images.size() != columns[0].images.size())
        throw ConfigError("grid: image count mismatch, '" + columns[0].label + "' has " +
                          std::to_string(columns[0].images.size()) + " but '" + col.label +
                          "' has " + std::to_string(col.images.size()));

    Image grid = make_grid(columns, opt.gutter);
    if (fs::path(opt.out_png).has_parent_path())
      fs::create_directories(fs::path(opt.out_png).parent_path());
    save_image_png(grid, opt.out_png);
  });
}

}  // namespace constructs
