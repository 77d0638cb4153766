#pragma once

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "aib/envs.hpp"
#include "aib/sac.hpp"

namespace aib {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A fully resolved experiment configuration. JSON on disk; every key is
/// validated and unknown keys are rejected so configs stay reviewable.
struct RunConfig {
  EnvName env = EnvName::ODE;
  int k = 2;  // polynomial order, ODE-k only
  Variant variant = Variant::DR;
  std::uint64_t seed = 0;
  int n_c = 8;
  long long iterations = 50000;
  long long eval_interval = 5000;
  long long log_interval = 100;
  int n_e = 10;
  std::string out_dir = "runs/out";
  AgentConfig hyper;  // Table-style hyperparameters

  EnvSpec spec() const { return EnvSpec::make(env, k); }

  AgentConfig agent_config() const {
    AgentConfig a = hyper;
    a.variant = variant;
    a.n_c = n_c;
    a.seed = seed;
    return a;
  }

  void validate() const {
    if (n_c < 1) throw ConfigError("n_c must be >= 1");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
    if (log_interval < 1) throw ConfigError("log_interval must be >= 1");
    if (n_e < 1) throw ConfigError("n_e must be >= 1");
    if (hyper.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (hyper.buffer_capacity < 1)
      throw ConfigError("buffer_capacity must be >= 1");
    if (hyper.warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (hyper.K < 1) throw ConfigError("window K must be >= 1");
    if (!(hyper.gamma >= 0 && hyper.gamma < 1))
      throw ConfigError("gamma must be in [0, 1)");
    if (!(hyper.tau > 0 && hyper.tau <= 1))
      throw ConfigError("tau must be in (0, 1]");
    for (double lr : {hyper.lr_critic, hyper.lr_actor, hyper.lr_alpha,
                      hyper.lr_dyn})
      if (!(lr > 0)) throw ConfigError("learning rates must be positive");
    if (!(hyper.init_temperature > 0))
      throw ConfigError("init_temperature must be positive");
    if (hyper.clip_grad_norm < 0)
      throw ConfigError("clip_grad_norm must be >= 0 (0 disables)");
    if (hyper.alpha_min < 0)
      throw ConfigError("alpha_min must be >= 0 (0 disables)");
    if (env == EnvName::ODE_K && k < 1)
      throw ConfigError("ode_k requires k >= 1");
    if (out_dir.empty()) throw ConfigError("out_dir must be set");
  }

  nlohmann::json to_json() const {
    return {
        {"env", env_name_str(env)},
        {"k", k},
        {"variant", variant_str(variant)},
        {"seed", seed},
        {"n_c", n_c},
        {"iterations", iterations},
        {"eval_interval", eval_interval},
        {"log_interval", log_interval},
        {"n_e", n_e},
        {"out_dir", out_dir},
        {"hyper",
         {{"K", hyper.K},
          {"batch_size", hyper.batch_size},
          {"warmup_steps", hyper.warmup_steps},
          {"buffer_capacity", hyper.buffer_capacity},
          {"gamma", hyper.gamma},
          {"tau", hyper.tau},
          {"lr_critic", hyper.lr_critic},
          {"lr_actor", hyper.lr_actor},
          {"lr_alpha", hyper.lr_alpha},
          {"lr_dyn", hyper.lr_dyn},
          {"init_temperature", hyper.init_temperature},
          {"clip_grad_norm", hyper.clip_grad_norm},
          {"alpha_min", hyper.alpha_min}}},
    };
  }

  static RunConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> top_keys = {
        "env",           "k",   "variant", "seed",    "n_c",
        "iterations",    "eval_interval", "log_interval", "n_e",
        "out_dir",       "hyper"};
    static const std::set<std::string> hyper_keys = {
        "K",         "batch_size", "warmup_steps", "buffer_capacity",
        "gamma",     "tau",        "lr_critic",    "lr_actor",
        "lr_alpha",  "lr_dyn",     "init_temperature", "clip_grad_norm",
        "alpha_min"};
    if (!j.is_object()) throw ConfigError("config root must be an object");
    for (auto& [key, val] : j.items())
      if (!top_keys.count(key)) throw ConfigError("unknown config key: " + key);
    RunConfig c;
    try {
      if (j.contains("env")) c.env = env_name_parse(j.at("env"));
      if (j.contains("k")) c.k = j.at("k");
      if (j.contains("variant")) c.variant = variant_parse(j.at("variant"));
      if (j.contains("seed")) c.seed = j.at("seed");
      if (j.contains("n_c")) c.n_c = j.at("n_c");
      if (j.contains("iterations")) c.iterations = j.at("iterations");
      if (j.contains("eval_interval")) c.eval_interval = j.at("eval_interval");
      if (j.contains("log_interval")) c.log_interval = j.at("log_interval");
      if (j.contains("n_e")) c.n_e = j.at("n_e");
      if (j.contains("out_dir")) c.out_dir = j.at("out_dir");
      if (j.contains("hyper")) {
        const auto& h = j.at("hyper");
        if (!h.is_object()) throw ConfigError("hyper must be an object");
        for (auto& [key, val] : h.items())
          if (!hyper_keys.count(key))
            throw ConfigError("unknown hyper key: " + key);
        auto get = [&](const char* k, auto& dst) {
          if (h.contains(k)) dst = h.at(k).template get<std::decay_t<decltype(dst)>>();
        };
        get("K", c.hyper.K);
        get("batch_size", c.hyper.batch_size);
        get("warmup_steps", c.hyper.warmup_steps);
        get("buffer_capacity", c.hyper.buffer_capacity);
        get("gamma", c.hyper.gamma);
        get("tau", c.hyper.tau);
        get("lr_critic", c.hyper.lr_critic);
        get("lr_actor", c.hyper.lr_actor);
        get("lr_alpha", c.hyper.lr_alpha);
        get("lr_dyn", c.hyper.lr_dyn);
        get("init_temperature", c.hyper.init_temperature);
        get("clip_grad_norm", c.hyper.clip_grad_norm);
        get("alpha_min", c.hyper.alpha_min);
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config type error: ") + e.what());
    }
    c.validate();
    return c;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return from_json(j);
  }

  /// Desk-scale preset: the acceptance-budget shape of a run.
  static RunConfig desk_preset() {
    RunConfig c;
    c.n_c = 8;
    c.iterations = 50000;
    c.eval_interval = 5000;
    c.n_e = 10;
    return c;
  }
};

}  // namespace aib
