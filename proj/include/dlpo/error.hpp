#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dlpo {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// prompt-model
class PreservedSentenceLost : public Error {
 public:
  explicit PreservedSentenceLost(const std::string& sentence)
      : Error("preserved sentence lost: '" + sentence + "'"), sentence_(sentence) {}
  const std::string& sentence() const noexcept { return sentence_; }

 private:
  std::string sentence_;
};

// engine-gateway
class EngineUnavailable : public Error {
 public:
  using Error::Error;
};
class ReplayMiss : public Error {
 public:
  using Error::Error;
};
class MalformedResponse : public Error {
 public:
  using Error::Error;
};
class IoFailure : public Error {
 public:
  using Error::Error;
};

// tgd-core
class EmptyBatch : public Error {
 public:
  EmptyBatch() : Error("loss requested for an empty batch") {}
};
class DelimiterMissing : public Error {
 public:
  DelimiterMissing() : Error("optimizer response lacks <IMPROVED-VARIABLE> delimiters") {}
};

// dlpo-techniques
class HistoryTooSmall : public Error {
 public:
  explicit HistoryTooSmall(std::size_t n)
      : Error("contrastive partition needs at least 2 history entries, got " + std::to_string(n)) {}
};

// eval-harness / report
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("parse error at line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};
class DuplicateId : public Error {
 public:
  explicit DuplicateId(const std::string& id) : Error("duplicate example id '" + id + "'") {}
};

// run-orchestrator
class ConfigError : public Error {
 public:
  using Error::Error;
};
class ChecksumMismatch : public Error {
 public:
  using Error::Error;
};
class ConfigDrift : public Error {
 public:
  using Error::Error;
};

}  // namespace dlpo
