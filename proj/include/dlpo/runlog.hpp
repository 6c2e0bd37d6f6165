#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dlpo/error.hpp"

namespace dlpo {

namespace event {
inline constexpr std::string_view kStepStarted = "StepStarted";
inline constexpr std::string_view kForwardBatch = "ForwardBatch";
inline constexpr std::string_view kLossComputed = "LossComputed";
inline constexpr std::string_view kGradientProduced = "GradientProduced";
inline constexpr std::string_view kCandidateProduced = "CandidateProduced";
inline constexpr std::string_view kTlrMeasured = "TlrMeasured";
inline constexpr std::string_view kTsaDecision = "TsaDecision";
inline constexpr std::string_view kEvaluated = "Evaluated";
inline constexpr std::string_view kCheckpointed = "Checkpointed";
inline constexpr std::string_view kRunFinished = "RunFinished";
}  // namespace event

/// Keeps the first `lines` lines of a text file (no-op when it is shorter or absent).
inline void truncate_lines(const std::filesystem::path& path, std::size_t lines) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path, std::ios::binary);
  std::string kept, line;
  std::size_t n = 0;
  while (n < lines && std::getline(in, line)) {
    kept += line;
    kept += '\n';
    ++n;
  }
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << kept;
  if (!out) throw IoFailure("cannot rewrite " + path.string());
}

/// Append-only JSON-lines writer. Each line is an object with `event`, `step`
/// and the payload fields; wall-clock time goes in the optional `ts` field.
class JsonlWriter {
 public:
  JsonlWriter() = default;

  JsonlWriter(const std::filesystem::path& path, std::size_t existing_lines) : path_(path), lines_(existing_lines) {
    out_.open(path, std::ios::binary | std::ios::app);
    if (!out_) throw IoFailure("cannot open " + path.string());
  }

  void write(const nlohmann::json& line) {
    out_ << line.dump() << '\n';
    out_.flush();
    if (!out_) throw IoFailure("failed writing " + path_.string());
    ++lines_;
  }

  std::size_t lines() const noexcept { return lines_; }
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t lines_ = 0;
};

class RunLog {
 public:
  RunLog() = default;
  RunLog(const std::filesystem::path& path, std::size_t existing_lines, bool timestamps)
      : writer_(path, existing_lines), timestamps_(timestamps) {}

  void emit(std::string_view name, int step, nlohmann::json payload = nlohmann::json::object()) {
    payload["event"] = name;
    payload["step"] = step;
    if (timestamps_) {
      payload["ts"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::system_clock::now().time_since_epoch())
                          .count();
    }
    writer_.write(payload);
  }

  std::size_t lines() const noexcept { return writer_.lines(); }

 private:
  JsonlWriter writer_;
  bool timestamps_ = true;
};

/// Reads a run log. Throws ParseError on a malformed line.
inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return out;
}

/// Log lines with wall-clock fields removed, for determinism comparisons.
inline std::vector<std::string> strip_timestamps(const std::vector<nlohmann::json>& events) {
  std::vector<std::string> out;
  out.reserve(events.size());
  for (auto e : events) {
    e.erase("ts");
    out.push_back(e.dump());
  }
  return out;
}

}  // namespace dlpo
