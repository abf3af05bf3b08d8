// JSON form of the experiment configuration.
//
//   { "model": { ModelConfig fields }, "train": { TrainConfig fields }, "data": { DataConfig fields } }
//
// Missing sections or keys keep their defaults; unknown keys are errors.
#pragma once

#include "mvattn/training.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mvattn::config {

using nlohmann::json;
using training::DataConfig;
using training::ExperimentConfig;
using training::TrainConfig;
using model::ModelConfig;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Field table shared by reading and writing.
template <typename S, typename F>
void model_fields(S& m, F&& f) {
  f("depth", m.depth);
  f("model_dim", m.model_dim);
  f("heads", m.heads);
  f("ffn_mult", m.ffn_mult);
  f("adapter_bottleneck_ratio", m.adapter_bottleneck_ratio);
  f("adapter_heads", m.adapter_heads);
  f("lora_rank", m.lora_rank);
  f("supervised_layers", m.supervised_layers);
  f("patch_rows", m.patch_rows);
  f("patch_cols", m.patch_cols);
  f("views", m.views);
  f("latent_dim", m.latent_dim);
  f("projective_dim", m.projective_dim);
  f("rope_base", m.rope_base);
  f("use_ca3", m.use_ca3);
  f("use_lora", m.use_lora);
  f("init_seed", m.init_seed);
}

template <typename S, typename F>
void train_fields(S& t, F&& f) {
  f("steps", t.steps);
  f("lr_adapter", t.lr_adapter);
  f("lr_lora", t.lr_lora);
  f("lr_warmup_steps", t.lr_warmup_steps);
  f("grad_clip", t.grad_clip);
  f("weight_decay", t.weight_decay);
  f("lambda_target", t.lambda_target);
  f("curriculum_warmup", t.curriculum_warmup);
  f("curriculum_ramp", t.curriculum_ramp);
  f("batch_size", t.batch_size);
  f("seed", t.seed);
  f("tau", t.tau);
  f("n_neg", t.n_neg);
  f("pair_budget", t.pair_budget);
  f("checkpoint_every", t.checkpoint_every);
  f("no_csl", t.no_csl);
  f("no_ca3", t.no_ca3);
  f("no_lora", t.no_lora);
  f("no_frame_replication", t.no_frame_replication);
}

template <typename S, typename F>
void data_fields(S& d, F&& f) {
  f("points", d.points);
  f("image_size", d.image_size);
  f("fov_deg", d.fov_deg);
  f("radius", d.radius);
  f("elevations", d.elevations);
  f("splat_sigma", d.splat_sigma);
  f("noise_px", d.noise_px);
  f("sigma_c", d.sigma_c);
  f("eval_scenes", d.eval_scenes);
  f("eval_seed", d.eval_seed);
  f("eval_t", d.eval_t);
  f("eval_layer", d.eval_layer);
  f("threshold_px", d.threshold_px);
}

template <typename S, typename Fields>
json write_section(const S& s, Fields fields) {
  json j = json::object();
  fields(const_cast<S&>(s), [&](const char* key, const auto& v) { j[key] = v; });
  return j;
}

template <typename S, typename Fields>
void read_section(const json& j, const std::string& section, S& s, Fields fields, std::vector<std::string>& problems) {
  if (!j.is_object()) {
    problems.push_back(section + ": expected an object");
    return;
  }
  std::set<std::string> known;
  fields(s, [&](const char* key, auto& v) {
    known.insert(key);
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
      v = it->template get<std::decay_t<decltype(v)>>();
    } catch (const std::exception& e) {
      problems.push_back(section + "." + key + ": " + e.what());
    }
  });
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) problems.push_back(section + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["model"] = detail::write_section(c.model, [](auto& s, auto&& f) { detail::model_fields(s, f); });
  j["train"] = detail::write_section(c.train, [](auto& s, auto&& f) { detail::train_fields(s, f); });
  j["data"] = detail::write_section(c.data, [](auto& s, auto&& f) { detail::data_fields(s, f); });
  return j;
}

/// Every problem found while reading and validating, or an empty list.
inline std::vector<std::string> read_config(const json& j, ExperimentConfig& c) {
  std::vector<std::string> problems;
  if (!j.is_object()) return {"configuration must be a JSON object"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k == "model") {
      detail::read_section(*it, k, c.model, [](auto& s, auto&& f) { detail::model_fields(s, f); }, problems);
    } else if (k == "train") {
      detail::read_section(*it, k, c.train, [](auto& s, auto&& f) { detail::train_fields(s, f); }, problems);
    } else if (k == "data") {
      detail::read_section(*it, k, c.data, [](auto& s, auto&& f) { detail::data_fields(s, f); }, problems);
    } else {
      problems.push_back("unknown section '" + k + "'");
    }
  }
  if (problems.empty()) {
    for (auto& p : c.problems()) problems.push_back(p);
  }
  return problems;
}

inline ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  const auto p = read_config(j, c);
  if (!p.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& s : p) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

/// Canonical text: sorted keys, two-space indent, trailing newline.
inline std::string dump_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace mvattn::config
