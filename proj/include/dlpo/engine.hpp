#pragma once

// Uniform access to forward and backward LLM engines.
//
// Every call is a single-turn (system, user) exchange. Live engines live in
// http_engine.hpp; this header holds the interface, the request hash, and the
// record/replay machinery that makes runs reproducible offline.

#include <chrono>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlpo/error.hpp"
#include "dlpo/hash.hpp"

namespace dlpo {

enum class EngineRole { Forward, Backward };

inline const char* to_string(EngineRole r) { return r == EngineRole::Forward ? "forward" : "backward"; }

inline EngineRole role_from_string(std::string_view s) {
  if (s == "forward") return EngineRole::Forward;
  if (s == "backward") return EngineRole::Backward;
  throw Error("unknown engine role '" + std::string(s) + "'");
}

struct EngineSpec {
  EngineRole role = EngineRole::Forward;
  std::string model;
  std::string endpoint_url;
  double temperature = 0.0;
  int max_tokens = 2048;
  std::chrono::milliseconds timeout{60'000};
  int max_retries = 3;
  std::chrono::milliseconds retry_backoff{500};

  static EngineSpec forward_defaults() { return {}; }
  static EngineSpec backward_defaults() {
    EngineSpec s;
    s.role = EngineRole::Backward;
    s.temperature = 1.0;
    return s;
  }
};

/// Digest of (system, user, model, temperature). Stable across platforms.
inline std::string request_hash(std::string_view system, std::string_view user, std::string_view model,
                                double temperature) {
  const nlohmann::json key = {std::string(model), temperature, std::string(system), std::string(user)};
  return sha256_hex(key.dump());
}

struct ChatExchange {
  std::string system;
  std::string user;
  std::string response;
  EngineRole engine_role = EngineRole::Forward;
  std::string model;
  std::chrono::milliseconds latency{0};
  std::string request_hash;
};

class Engine {
 public:
  virtual ~Engine() = default;

  /// Returns the assistant text for one exchange. Implementations must be safe
  /// to call from several threads at once.
  virtual std::string complete(std::string_view system, std::string_view user) = 0;

  virtual const EngineSpec& spec() const = 0;

  /// Opaque resumable state (replay cursors). Stateless engines return null.
  virtual nlohmann::json save_state() const { return nullptr; }
  virtual void load_state(const nlohmann::json& /*state*/) {}
};

using EnginePtr = std::shared_ptr<Engine>;

/// Engine backed by a callable; used for scripted and synthetic engines.
class CallbackEngine : public Engine {
 public:
  using Fn = std::function<std::string(std::string_view system, std::string_view user)>;

  CallbackEngine(EngineSpec spec, Fn fn) : spec_(std::move(spec)), fn_(std::move(fn)) {}

  std::string complete(std::string_view system, std::string_view user) override { return fn_(system, user); }
  const EngineSpec& spec() const override { return spec_; }

 private:
  EngineSpec spec_;
  Fn fn_;
};

// ---------------------------------------------------------------------------
// Transcripts: JSON-lines, a header line followed by one exchange per line.

inline constexpr std::string_view kTranscriptFormat = "dlpo-transcript";
inline constexpr int kTranscriptVersion = 1;

inline nlohmann::json transcript_header() {
  return {{"format", kTranscriptFormat}, {"version", kTranscriptVersion}};
}

inline nlohmann::json to_json(const ChatExchange& ex) {
  return {{"role", to_string(ex.engine_role)}, {"model", ex.model},       {"system", ex.system},
          {"user", ex.user},                   {"response", ex.response}, {"hash", ex.request_hash}};
}

struct Transcript {
  enum class Mode { Record, Replay };

  Mode mode = Mode::Replay;
  std::vector<ChatExchange> exchanges;

  /// Loads and validates a transcript file. Stored hashes must be consistent:
  /// one hash never maps to two different requests.
  static Transcript load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot open transcript " + path.string());
    Transcript t;
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    std::map<std::string, std::size_t> first_by_hash;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(lineno, e.what());
      }
      if (!header_seen) {
        if (j.value("format", "") != kTranscriptFormat) throw ParseError(lineno, "missing transcript header");
        header_seen = true;
        continue;
      }
      ChatExchange ex;
      try {
        ex.engine_role = role_from_string(j.at("role").get<std::string>());
        ex.model = j.at("model").get<std::string>();
        ex.system = j.at("system").get<std::string>();
        ex.user = j.at("user").get<std::string>();
        ex.response = j.at("response").get<std::string>();
        ex.request_hash = j.at("hash").get<std::string>();
      } catch (const std::exception& e) {
        throw ParseError(lineno, e.what());
      }
      auto [it, inserted] = first_by_hash.emplace(ex.request_hash, t.exchanges.size());
      if (!inserted) {
        const auto& prev = t.exchanges[it->second];
        if (prev.system != ex.system || prev.user != ex.user || prev.model != ex.model) {
          throw ParseError(lineno, "request hash collision for " + ex.request_hash);
        }
      }
      t.exchanges.push_back(std::move(ex));
    }
    if (!header_seen) throw ParseError(lineno, "empty transcript (no header)");
    return t;
  }
};

/// Answers requests from a transcript. Repeated identical requests are served
/// in recorded order (FIFO per hash).
class ReplayEngine : public Engine {
 public:
  ReplayEngine(EngineSpec spec, std::shared_ptr<const Transcript> transcript)
      : spec_(std::move(spec)), transcript_(std::move(transcript)) {
    for (std::size_t i = 0; i < transcript_->exchanges.size(); ++i) {
      by_hash_[transcript_->exchanges[i].request_hash].push_back(i);
    }
  }

  std::string complete(std::string_view system, std::string_view user) override {
    const std::string h = request_hash(system, user, spec_.model, spec_.temperature);
    std::lock_guard lock(mu_);
    auto it = by_hash_.find(h);
    if (it == by_hash_.end()) throw ReplayMiss("replay transcript has no response for request " + h);
    std::size_t& cursor = cursor_[h];
    const auto& queue = it->second;
    if (cursor >= queue.size()) {
      throw ReplayMiss("replay transcript exhausted for request " + h + " after " +
                       std::to_string(queue.size()) + " response(s)");
    }
    return transcript_->exchanges[queue[cursor++]].response;
  }

  const EngineSpec& spec() const override { return spec_; }

  nlohmann::json save_state() const override {
    std::lock_guard lock(mu_);
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [h, c] : cursor_) j[h] = c;
    return j;
  }

  void load_state(const nlohmann::json& state) override {
    std::lock_guard lock(mu_);
    cursor_.clear();
    if (!state.is_object()) return;
    for (const auto& [h, c] : state.items()) cursor_[h] = c.get<std::size_t>();
  }

 private:
  EngineSpec spec_;
  std::shared_ptr<const Transcript> transcript_;
  std::map<std::string, std::vector<std::size_t>> by_hash_;
  mutable std::mutex mu_;
  std::map<std::string, std::size_t> cursor_;
};

/// Forwards to an inner engine and appends every exchange to a transcript
/// file before returning it.
class RecordingEngine : public Engine {
 public:
  RecordingEngine(EnginePtr inner, const std::filesystem::path& path) : inner_(std::move(inner)), path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app | std::ios::binary);
    if (!out_) throw IoFailure("cannot open transcript for writing: " + path.string());
    if (fresh) write_line(transcript_header().dump());
  }

  std::string complete(std::string_view system, std::string_view user) override {
    const auto t0 = std::chrono::steady_clock::now();
    std::string response = inner_->complete(system, user);
    ChatExchange ex;
    ex.system = system;
    ex.user = user;
    ex.response = response;
    ex.engine_role = inner_->spec().role;
    ex.model = inner_->spec().model;
    ex.latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0);
    ex.request_hash = request_hash(system, user, ex.model, inner_->spec().temperature);
    std::lock_guard lock(mu_);
    write_line(to_json(ex).dump());
    return response;
  }

  const EngineSpec& spec() const override { return inner_->spec(); }
  nlohmann::json save_state() const override { return inner_->save_state(); }
  void load_state(const nlohmann::json& state) override { inner_->load_state(state); }

 private:
  void write_line(const std::string& line) {
    out_ << line << '\n';
    out_.flush();
    if (!out_) throw IoFailure("failed writing transcript " + path_.string());
  }

  EnginePtr inner_;
  std::filesystem::path path_;
  std::mutex mu_;
  std::ofstream out_;
};

/// Wraps `inner` so every exchange is recorded to `transcript_path`.
inline EnginePtr record_wrap(EnginePtr inner, const std::filesystem::path& transcript_path) {
  return std::make_shared<RecordingEngine>(std::move(inner), transcript_path);
}

}  // namespace dlpo
