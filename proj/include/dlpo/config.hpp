#pragma once

// Run configuration: a JSON document whose keys mirror RunConfig fields.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>

#include "dlpo/engine.hpp"
#include "dlpo/error.hpp"
#include "dlpo/hash.hpp"
#include "dlpo/synthetic.hpp"
#include "dlpo/techniques.hpp"

namespace dlpo {

struct EngineConfig {
  std::string kind = "synthetic";  // "synthetic" or "openai"
  EngineSpec spec;
};

struct TechniqueFlags {
  bool tlr = false;
  bool tdo = false;
  bool tregu = true;
  bool tcl = true;
  bool tsa = true;
  bool tmnt = false;
};

/// Defaults follow the best-practice profile (BigGSM column of the
/// hyperparameter table) where it gives a value.
struct RunConfig {
  std::filesystem::path trainset_path;
  std::filesystem::path valset_path;  // empty: no validation curve
  int trainset_size = 200;
  int batch_size = 3;
  int epochs = 1;
  std::uint64_t seed = 0;
  EngineConfig forward{"synthetic", EngineSpec::forward_defaults()};
  EngineConfig backward{"synthetic", EngineSpec::backward_defaults()};
  TechniqueFlags flags;
  std::optional<int> tlrd = 60;  // initial r; decay implied. Overrides the fixed tlr_r.
  double tdo_p = 0.5;
  double tsa_t0 = 0.05;
  double tsa_alpha = 0.9;
  double tcl_margin = 0.05;
  int eval_every = 1;

  int tlr_r = 1;
  TlrMode tlr_mode = TlrMode::InstructionOnly;
  int energy_subset_size = 50;
  std::optional<std::string> initial_prompt;  // absent: built-in default; may be empty
  std::filesystem::path out_dir = "dlpo-run";
  unsigned workers = 1;
  std::optional<synthetic::LandscapeSpec> synthetic;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

inline EngineConfig parse_engine(const nlohmann::json& j, EngineRole role) {
  const std::string where = role == EngineRole::Forward ? "forward" : "backward";
  reject_unknown_keys(j, {"kind", "model", "endpoint_url", "temperature", "max_tokens", "timeout_s", "max_retries",
                          "retry_backoff_ms"},
                      where);
  EngineConfig e{"synthetic", role == EngineRole::Forward ? EngineSpec::forward_defaults()
                                                           : EngineSpec::backward_defaults()};
  read_opt(j, "kind", e.kind);
  read_opt(j, "model", e.spec.model);
  read_opt(j, "endpoint_url", e.spec.endpoint_url);
  read_opt(j, "temperature", e.spec.temperature);
  read_opt(j, "max_tokens", e.spec.max_tokens);
  read_opt(j, "max_retries", e.spec.max_retries);
  double timeout_s = static_cast<double>(e.spec.timeout.count()) / 1000.0;
  read_opt(j, "timeout_s", timeout_s);
  e.spec.timeout = std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000.0));
  long long backoff = e.spec.retry_backoff.count();
  read_opt(j, "retry_backoff_ms", backoff);
  e.spec.retry_backoff = std::chrono::milliseconds(backoff);
  if (timeout_s <= 0.0) throw ConfigError(where + ".timeout_s must be positive");
  return e;
}

inline nlohmann::json engine_to_json(const EngineConfig& e) {
  return {{"kind", e.kind},
          {"model", e.spec.model},
          {"endpoint_url", e.spec.endpoint_url},
          {"temperature", e.spec.temperature},
          {"max_tokens", e.spec.max_tokens},
          {"timeout_s", static_cast<double>(e.spec.timeout.count()) / 1000.0},
          {"max_retries", e.spec.max_retries},
          {"retry_backoff_ms", e.spec.retry_backoff.count()}};
}

inline void validate_engine(const EngineConfig& e, const char* where, bool has_synthetic) {
  const std::string w = where;
  if (e.kind != "synthetic" && e.kind != "openai") throw ConfigError(w + ".kind must be 'synthetic' or 'openai'");
  if (e.spec.max_retries < 0) throw ConfigError(w + ".max_retries must be >= 0");
  if (e.spec.timeout.count() <= 0) throw ConfigError(w + ".timeout_s must be positive");
  if (e.spec.max_tokens < 1) throw ConfigError(w + ".max_tokens must be >= 1");
  if (e.spec.retry_backoff.count() < 0) throw ConfigError(w + ".retry_backoff_ms must be >= 0");
  if (e.kind == "openai" && (e.spec.model.empty() || e.spec.endpoint_url.empty())) {
    throw ConfigError(w + ": openai engines need 'model' and 'endpoint_url'");
  }
  if (e.kind == "synthetic" && !has_synthetic) throw ConfigError(w + ": synthetic engines need a 'synthetic' section");
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  if (c.trainset_path.empty()) throw ConfigError("trainset_path is required");
  if (c.trainset_size < 1) throw ConfigError("trainset_size must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (c.eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (!(c.tdo_p > 0.0 && c.tdo_p <= 1.0)) throw ConfigError("tdo_p must lie in (0, 1]");
  if (!(c.tsa_t0 > 0.0)) throw ConfigError("tsa_t0 must be positive");
  if (!(c.tsa_alpha > 0.0 && c.tsa_alpha <= 1.0)) throw ConfigError("tsa_alpha must lie in (0, 1]");
  if (!(c.tcl_margin >= 0.0)) throw ConfigError("tcl_margin must be >= 0");
  if (c.tlrd && *c.tlrd < 1) throw ConfigError("tlrd must be >= 1");
  if (c.tlr_r < 1) throw ConfigError("tlr_r must be >= 1");
  if (c.energy_subset_size < 1) throw ConfigError("energy_subset_size must be >= 1");
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  detail::validate_engine(c.forward, "forward", c.synthetic.has_value());
  detail::validate_engine(c.backward, "backward", c.synthetic.has_value());
}

/// Parses and validates a config document. Relative dataset paths resolve
/// against `base_dir`.
inline RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  detail::reject_unknown_keys(
      j,
      {"trainset_path", "valset_path", "trainset_size", "batch_size", "epochs", "seed", "forward", "backward", "flags",
       "tlrd", "tdo_p", "tsa_t0", "tsa_alpha", "tcl_margin", "eval_every", "tlr_r", "tlr_mode", "energy_subset_size",
       "initial_prompt", "out_dir", "workers", "synthetic"},
      "config");
  RunConfig c;
  auto resolve = [&](const std::string& p) -> std::filesystem::path {
    if (p.empty()) return {};
    std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : (base_dir / path).lexically_normal();
  };
  std::string s;
  if (j.contains("trainset_path")) {
    detail::read_opt(j, "trainset_path", s);
    c.trainset_path = resolve(s);
  }
  if (j.contains("valset_path") && !j.at("valset_path").is_null()) {
    s.clear();
    detail::read_opt(j, "valset_path", s);
    c.valset_path = resolve(s);
  }
  detail::read_opt(j, "trainset_size", c.trainset_size);
  detail::read_opt(j, "batch_size", c.batch_size);
  detail::read_opt(j, "epochs", c.epochs);
  detail::read_opt(j, "seed", c.seed);
  if (j.contains("forward")) c.forward = detail::parse_engine(j.at("forward"), EngineRole::Forward);
  if (j.contains("backward")) c.backward = detail::parse_engine(j.at("backward"), EngineRole::Backward);
  if (j.contains("flags")) {
    const auto& f = j.at("flags");
    detail::reject_unknown_keys(f, {"tlr", "tdo", "tregu", "tcl", "tsa", "tmnt"}, "flags");
    detail::read_opt(f, "tlr", c.flags.tlr);
    detail::read_opt(f, "tdo", c.flags.tdo);
    detail::read_opt(f, "tregu", c.flags.tregu);
    detail::read_opt(f, "tcl", c.flags.tcl);
    detail::read_opt(f, "tsa", c.flags.tsa);
    detail::read_opt(f, "tmnt", c.flags.tmnt);
  }
  if (j.contains("tlrd")) {
    if (j.at("tlrd").is_null()) {
      c.tlrd.reset();
    } else {
      int r = 0;
      detail::read_opt(j, "tlrd", r);
      c.tlrd = r;
    }
  }
  detail::read_opt(j, "tdo_p", c.tdo_p);
  detail::read_opt(j, "tsa_t0", c.tsa_t0);
  detail::read_opt(j, "tsa_alpha", c.tsa_alpha);
  detail::read_opt(j, "tcl_margin", c.tcl_margin);
  detail::read_opt(j, "eval_every", c.eval_every);
  detail::read_opt(j, "tlr_r", c.tlr_r);
  if (j.contains("tlr_mode")) {
    std::string mode;
    detail::read_opt(j, "tlr_mode", mode);
    if (mode == "instruction_only") {
      c.tlr_mode = TlrMode::InstructionOnly;
    } else if (mode == "hard_reject") {
      c.tlr_mode = TlrMode::HardReject;
    } else {
      throw ConfigError("tlr_mode must be 'instruction_only' or 'hard_reject'");
    }
  }
  detail::read_opt(j, "energy_subset_size", c.energy_subset_size);
  if (j.contains("initial_prompt") && !j.at("initial_prompt").is_null()) {
    std::string text;
    detail::read_opt(j, "initial_prompt", text);
    c.initial_prompt = std::move(text);
  }
  if (j.contains("out_dir")) {
    s.clear();
    detail::read_opt(j, "out_dir", s);
    c.out_dir = resolve(s);
  }
  detail::read_opt(j, "workers", c.workers);
  if (j.contains("synthetic")) {
    try {
      c.synthetic = synthetic::landscape_from_json(j.at("synthetic"));
    } catch (const std::exception& e) {
      throw ConfigError(std::string("bad synthetic section: ") + e.what());
    }
  }
  validate(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return parse_config(j, path.parent_path());
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = {
      {"trainset_path", c.trainset_path.string()},
      {"valset_path", c.valset_path.string()},
      {"trainset_size", c.trainset_size},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"forward", detail::engine_to_json(c.forward)},
      {"backward", detail::engine_to_json(c.backward)},
      {"flags",
       {{"tlr", c.flags.tlr},
        {"tdo", c.flags.tdo},
        {"tregu", c.flags.tregu},
        {"tcl", c.flags.tcl},
        {"tsa", c.flags.tsa},
        {"tmnt", c.flags.tmnt}}},
      {"tlrd", c.tlrd ? nlohmann::json(*c.tlrd) : nlohmann::json(nullptr)},
      {"tdo_p", c.tdo_p},
      {"tsa_t0", c.tsa_t0},
      {"tsa_alpha", c.tsa_alpha},
      {"tcl_margin", c.tcl_margin},
      {"eval_every", c.eval_every},
      {"tlr_r", c.tlr_r},
      {"tlr_mode", to_string(c.tlr_mode)},
      {"energy_subset_size", c.energy_subset_size},
      {"initial_prompt", c.initial_prompt ? nlohmann::json(*c.initial_prompt) : nlohmann::json(nullptr)},
      {"out_dir", c.out_dir.string()},
      {"workers", c.workers},
  };
  if (c.synthetic) j["synthetic"] = synthetic::to_json(*c.synthetic);
  return j;
}

/// Hash over every field that influences the trajectory (output location and
/// thread count excluded).
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("out_dir");
  j.erase("workers");
  return sha256_hex(j.dump());
}

}  // namespace dlpo
