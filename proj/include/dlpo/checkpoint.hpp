#pragma once

// Single-file, versioned checkpoints guarded by a payload checksum and the
// hash of the config that produced them.

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

#include "dlpo/error.hpp"
#include "dlpo/hash.hpp"

namespace dlpo {

inline constexpr std::string_view kCheckpointFormat = "dlpo-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::string payload_checksum(const nlohmann::json& payload) { return sha256_hex(payload.dump()); }

/// Writes atomically (temp file + rename).
inline void write_checkpoint(const std::filesystem::path& path, const std::string& config_hash,
                             const nlohmann::json& payload) {
  const nlohmann::json doc = {{"format", kCheckpointFormat},
                              {"version", kCheckpointVersion},
                              {"config_hash", config_hash},
                              {"checksum", payload_checksum(payload)},
                              {"payload", payload}};
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << doc.dump() << '\n';
    if (!out) throw IoFailure("cannot write checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Loads a checkpoint payload. Throws ChecksumMismatch if the file is
/// unreadable or altered, ConfigDrift if it belongs to a different config.
inline nlohmann::json read_checkpoint(const std::filesystem::path& path, const std::string& expected_config_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::exception&) {
    throw ChecksumMismatch("checkpoint is not valid JSON: " + path.string());
  }
  if (!doc.is_object() || doc.value("format", "") != kCheckpointFormat || !doc.contains("payload") ||
      !doc.contains("checksum") || !doc.contains("config_hash")) {
    throw ChecksumMismatch("checkpoint is missing required fields: " + path.string());
  }
  if (doc.value("version", 0) != kCheckpointVersion) {
    throw ChecksumMismatch("unsupported checkpoint version in " + path.string());
  }
  if (payload_checksum(doc.at("payload")) != doc.at("checksum").get<std::string>()) {
    throw ChecksumMismatch("checkpoint checksum mismatch: " + path.string());
  }
  if (doc.at("config_hash").get<std::string>() != expected_config_hash) {
    throw ConfigDrift("config differs from the one that wrote " + path.string());
  }
  return doc.at("payload");
}

}  // namespace dlpo
