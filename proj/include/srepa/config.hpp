#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "srepa/align.hpp"
#include "srepa/data.hpp"
#include "srepa/nets.hpp"
#include "srepa/optim.hpp"

namespace srepa {

struct ModelConfig {
  std::size_t depth = 4;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t align_depth = 2;
  std::size_t mlp_ratio = 4;
  std::size_t d_teacher = 16;
};

struct LossConfig {
  double lambda_proj = 1.0;
  double lambda_struc = 2.0;
  std::string variant = "mse";
  double tau_t = 0.2;
  double tau_s = 0.2;
};

struct TrainSection {
  std::size_t batch_size = 64;  // paper scale is 256; desk scale default
  std::size_t total_steps = 2000;
  double ema_decay = 0.9999;
  double label_dropout = 0.1;
  std::uint64_t seed = 0;
  std::size_t log_interval = 100;
  std::size_t checkpoint_interval = 500;
  std::string out_dir = "run";
};

// Full training configuration. JSON schema is strict: exactly the five
// top-level sections, unknown keys rejected at every level, every key
// optional with the defaults above.
struct TrainConfig {
  DataConfig data;
  ModelConfig model;
  LossConfig loss;
  OptimConfig optim;
  TrainSection train;

  StudentConfig student_config() const {
    StudentConfig s;
    s.depth = model.depth;
    s.d_model = model.d_model;
    s.heads = model.heads;
    s.align_depth = model.align_depth;
    s.mlp_ratio = model.mlp_ratio;
    s.n_tokens = data.n_tokens();
    s.d_latent = data.d_patch();
    s.n_classes = data.n_classes;
    return s;
  }

  template <typename T>
  LossWeights<T> loss_weights() const {
    LossWeights<T> w;
    w.lambda_proj = T(loss.lambda_proj);
    w.lambda_struc = T(loss.lambda_struc);
    w.variant = struc_variant_from_string(loss.variant);
    w.tau_t = T(loss.tau_t);
    w.tau_s = T(loss.tau_s);
    return w;
  }

  void validate() const {
    data.validate();
    student_config().validate();
    struc_variant_from_string(loss.variant);
    if (loss.variant == "kl" && (loss.tau_t <= 0 || loss.tau_s <= 0))
      throw std::invalid_argument("config: kl temperatures must be positive");
    if (model.d_teacher > data.d_patch())
      throw std::invalid_argument(
          "config: model.d_teacher exceeds the per-token width");
    if (train.batch_size < 1 || train.checkpoint_interval < 1)
      throw std::invalid_argument(
          "config: batch_size and checkpoint_interval must be >= 1");
    if (train.label_dropout < 0 || train.label_dropout > 1)
      throw std::invalid_argument("config: label_dropout outside [0,1]");
    if (train.ema_decay < 0 || train.ema_decay > 1)
      throw std::invalid_argument("config: ema_decay outside [0,1]");
    if (optim.learning_rate <= 0)
      throw std::invalid_argument("config: learning_rate must be positive");
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj,
                                const std::set<std::string>& allowed,
                                const std::string& where) {
  if (!obj.is_object())
    throw std::invalid_argument("config: " + where + " must be an object");
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw std::invalid_argument("config: unknown key \"" + key + "\" in " +
                                  where);
}

template <typename T>
void read_key(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["data"] = {{"grid", c.data.grid},
               {"patch", c.data.patch},
               {"n_classes", c.data.n_classes},
               {"n_images", c.data.n_images},
               {"seed", c.data.seed}};
  j["model"] = {{"depth", c.model.depth},
                {"d_model", c.model.d_model},
                {"heads", c.model.heads},
                {"align_depth", c.model.align_depth},
                {"mlp_ratio", c.model.mlp_ratio},
                {"d_teacher", c.model.d_teacher}};
  j["loss"] = {{"lambda_proj", c.loss.lambda_proj},
               {"lambda_struc", c.loss.lambda_struc},
               {"variant", c.loss.variant},
               {"tau_t", c.loss.tau_t},
               {"tau_s", c.loss.tau_s}};
  j["optim"] = {{"learning_rate", c.optim.learning_rate},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"weight_decay", c.optim.weight_decay},
                {"eps", c.optim.eps}};
  j["train"] = {{"batch_size", c.train.batch_size},
                {"total_steps", c.train.total_steps},
                {"ema_decay", c.train.ema_decay},
                {"label_dropout", c.train.label_dropout},
                {"seed", c.train.seed},
                {"log_interval", c.train.log_interval},
                {"checkpoint_interval", c.train.checkpoint_interval},
                {"out_dir", c.train.out_dir}};
  return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"data", "model", "loss", "optim", "train"},
                              "top level");
  TrainConfig c;
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown_keys(
        d, {"grid", "patch", "n_classes", "n_images", "seed"}, "data");
    detail::read_key(d, "grid", c.data.grid);
    detail::read_key(d, "patch", c.data.patch);
    detail::read_key(d, "n_classes", c.data.n_classes);
    detail::read_key(d, "n_images", c.data.n_images);
    detail::read_key(d, "seed", c.data.seed);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown_keys(
        m, {"depth", "d_model", "heads", "align_depth", "mlp_ratio",
            "d_teacher"},
        "model");
    detail::read_key(m, "depth", c.model.depth);
    detail::read_key(m, "d_model", c.model.d_model);
    detail::read_key(m, "heads", c.model.heads);
    detail::read_key(m, "align_depth", c.model.align_depth);
    detail::read_key(m, "mlp_ratio", c.model.mlp_ratio);
    detail::read_key(m, "d_teacher", c.model.d_teacher);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    detail::reject_unknown_keys(
        l, {"lambda_proj", "lambda_struc", "variant", "tau_t", "tau_s"},
        "loss");
    detail::read_key(l, "lambda_proj", c.loss.lambda_proj);
    detail::read_key(l, "lambda_struc", c.loss.lambda_struc);
    detail::read_key(l, "variant", c.loss.variant);
    detail::read_key(l, "tau_t", c.loss.tau_t);
    detail::read_key(l, "tau_s", c.loss.tau_s);
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    detail::reject_unknown_keys(
        o, {"learning_rate", "beta1", "beta2", "weight_decay", "eps"},
        "optim");
    detail::read_key(o, "learning_rate", c.optim.learning_rate);
    detail::read_key(o, "beta1", c.optim.beta1);
    detail::read_key(o, "beta2", c.optim.beta2);
    detail::read_key(o, "weight_decay", c.optim.weight_decay);
    detail::read_key(o, "eps", c.optim.eps);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown_keys(
        t,
        {"batch_size", "total_steps", "ema_decay", "label_dropout", "seed",
         "log_interval", "checkpoint_interval", "out_dir"},
        "train");
    detail::read_key(t, "batch_size", c.train.batch_size);
    detail::read_key(t, "total_steps", c.train.total_steps);
    detail::read_key(t, "ema_decay", c.train.ema_decay);
    detail::read_key(t, "label_dropout", c.train.label_dropout);
    detail::read_key(t, "seed", c.train.seed);
    detail::read_key(t, "log_interval", c.train.log_interval);
    detail::read_key(t, "checkpoint_interval", c.train.checkpoint_interval);
    detail::read_key(t, "out_dir", c.train.out_dir);
  }
  c.validate();
  return c;
}

inline TrainConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") +
                                e.what());
  }
  try {
    return config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: bad value: ") + e.what());
  }
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

inline void save_config(const TrainConfig& c, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("config: cannot write " + path);
  os << to_json(c).dump(2) << "\n";
  if (!os) throw std::runtime_error("config: I/O failure on " + path);
}

}  // namespace srepa
