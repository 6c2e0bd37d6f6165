#pragma once

// Engine construction from a run config, including live HTTP engines.
// Requires the dlpo_http target (cpp-httplib with TLS).

#include <filesystem>
#include <iostream>
#include <memory>

#include "dlpo/config.hpp"
#include "dlpo/engine.hpp"
#include "dlpo/http_engine.hpp"
#include "dlpo/orchestrator.hpp"

namespace dlpo {

inline EnginePtr make_http_engine(const EngineConfig& ec, bool verbose = false) {
  HttpEngine::AttemptLogger logger;
  if (verbose) {
    logger = [role = ec.spec.role](const HttpAttempt& a) {
      std::cerr << to_string(role) << " attempt " << a.attempt << ": status " << a.status
                << (a.error.empty() ? "" : " (" + a.error + ")") << '\n';
    };
  }
  return std::make_shared<HttpEngine>(ec.spec, std::move(logger));
}

/// Engines for a config; `record` wraps both in transcript recorders.
inline Engines make_engines(const RunConfig& cfg, const std::optional<std::filesystem::path>& record = std::nullopt,
                            bool verbose = false) {
  Engines e;
  std::optional<Engines> synth;
  if (cfg.forward.kind == "synthetic" || cfg.backward.kind == "synthetic") synth = make_synthetic_engines(cfg);
  e.forward = cfg.forward.kind == "openai" ? make_http_engine(cfg.forward, verbose) : synth->forward;
  e.backward = cfg.backward.kind == "openai" ? make_http_engine(cfg.backward, verbose) : synth->backward;
  if (record) {
    e.forward = record_wrap(e.forward, *record);
    e.backward = record_wrap(e.backward, *record);
  }
  return e;
}

/// Engines answering from a recorded transcript only.
inline Engines make_replay_engines(const RunConfig& cfg, const std::filesystem::path& transcript) {
  auto t = std::make_shared<const Transcript>(Transcript::load(transcript));
  return {std::make_shared<ReplayEngine>(cfg.forward.spec, t), std::make_shared<ReplayEngine>(cfg.backward.spec, t)};
}

}  // namespace dlpo
