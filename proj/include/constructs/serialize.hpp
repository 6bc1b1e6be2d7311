#pragma once

// JSON (de)serialization for specs and configs. Reading is strict: unknown
// keys are rejected by name so config typos fail loudly instead of silently
// training the wrong model.

#include <json.hpp>

#include <set>
#include <stdexcept>
#include <string>

#include "constructs/losses.hpp"
#include "constructs/networks.hpp"

namespace constructs {

using ordered_json = nlohmann::ordered_json;

// Configuration errors map to exit code 2 at the CLI; runtime failures stay
// plain runtime_errors and map to exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Strict object reader: every field() call marks a key as consumed, done()
// rejects whatever is left, naming the offending key and its path.
class JsonReader {
 public:
  JsonReader(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected a JSON object");
  }

  template <typename T>
  void field(const char* key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  const ordered_json& child(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string child_path(const char* key) const { return path_ + "." + key; }

  void done() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError(path_ + "." + it.key() + ": unknown key");
  }

 private:
  const ordered_json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline ordered_json to_json(const GeneratorSpec& s) {
  ordered_json j;
  j["input_channels"] = s.input_channels;
  j["output_channels"] = s.output_channels;
  j["base_width"] = s.base_width;
  j["num_residual_blocks"] = s.num_residual_blocks;
  j["feature_tap_layers"] = s.feature_tap_layers;
  return j;
}

inline GeneratorSpec generator_spec_from_json(const ordered_json& j, const std::string& path) {
  GeneratorSpec s;
  JsonReader r(j, path);
  r.field("input_channels", s.input_channels);
  r.field("output_channels", s.output_channels);
  r.field("base_width", s.base_width);
  r.field("num_residual_blocks", s.num_residual_blocks);
  r.field("feature_tap_layers", s.feature_tap_layers);
  r.done();
  return s;
}

inline ordered_json to_json(const DiscriminatorSpec& s) {
  ordered_json j;
  j["input_channels"] = s.input_channels;
  j["base_width"] = s.base_width;
  j["num_downsampling_layers"] = s.num_downsampling_layers;
  j["use_spectral_norm"] = s.use_spectral_norm;
  return j;
}

inline DiscriminatorSpec discriminator_spec_from_json(const ordered_json& j,
                                                      const std::string& path) {
  DiscriminatorSpec s;
  JsonReader r(j, path);
  r.field("input_channels", s.input_channels);
  r.field("base_width", s.base_width);
  r.field("num_downsampling_layers", s.num_downsampling_layers);
  r.field("use_spectral_norm", s.use_spectral_norm);
  r.done();
  return s;
}

inline ordered_json to_json(const ProjectionHeadSpec& s) {
  ordered_json j;
  j["width"] = s.width;
  return j;
}

inline ProjectionHeadSpec projection_head_spec_from_json(const ordered_json& j,
                                                         const std::string& path) {
  ProjectionHeadSpec s;
  JsonReader r(j, path);
  r.field("width", s.width);
  r.done();
  return s;
}

inline ordered_json to_json(const LossConfig& c) {
  ordered_json j;
  j["lambda_x"] = c.lambda_x;
  j["lambda_y"] = c.lambda_y;
  j["lambda_ss"] = c.lambda_ss;
  j["tau"] = c.tau;
  j["num_patch_locations"] = c.num_patch_locations;
  j["msssim_scales"] = c.msssim_scales;
  j["msssim_weights"] = c.msssim_weights;
  j["K1"] = c.K1;
  j["K2"] = c.K2;
  j["window_size"] = c.window_size;
  j["window_sigma"] = c.window_sigma;
  j["msssim_composition"] = c.msssim_composition;
  j["gan_mode"] = c.gan_mode;
  j["srunit"] = c.srunit;
  j["srunit_tau_r"] = c.srunit_tau_r;
  j["srunit_tap"] = c.srunit_tap;
  return j;
}

inline LossConfig loss_config_from_json(const ordered_json& j, const std::string& path) {
  LossConfig c;
  JsonReader r(j, path);
  r.field("lambda_x", c.lambda_x);
  r.field("lambda_y", c.lambda_y);
  r.field("lambda_ss", c.lambda_ss);
  r.field("tau", c.tau);
  r.field("num_patch_locations", c.num_patch_locations);
  r.field("msssim_scales", c.msssim_scales);
  r.field("msssim_weights", c.msssim_weights);
  r.field("K1", c.K1);
  r.field("K2", c.K2);
  r.field("window_size", c.window_size);
  r.field("window_sigma", c.window_sigma);
  r.field("msssim_composition", c.msssim_composition);
  r.field("gan_mode", c.gan_mode);
  r.field("srunit", c.srunit);
  r.field("srunit_tau_r", c.srunit_tau_r);
  r.field("srunit_tap", c.srunit_tap);
  r.done();
  return c;
}

}  // namespace constructs
