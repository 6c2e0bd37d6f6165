#pragma once

// OpenAI-compatible chat-completions client.
//
// Link against dlpo_http (defines CPPHTTPLIB_OPENSSL_SUPPORT for https).

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <thread>
#include <utility>

#include "dlpo/engine.hpp"

namespace dlpo {

inline constexpr const char* kApiKeyEnv = "DLPO_API_KEY";

struct HttpAttempt {
  int attempt = 0;  // 1-based
  int status = 0;   // 0 when the connection itself failed
  std::string error;
};

struct ParsedUrl {
  std::string scheme_host_port;  // e.g. "https://api.openai.com:443"
  std::string path;              // e.g. "/v1/chat/completions"
};

inline ParsedUrl parse_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error("endpoint_url lacks a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

class HttpEngine : public Engine {
 public:
  using AttemptLogger = std::function<void(const HttpAttempt&)>;

  explicit HttpEngine(EngineSpec spec, AttemptLogger logger = {})
      : spec_(std::move(spec)), url_(parse_url(spec_.endpoint_url)), logger_(std::move(logger)) {
    if (const char* key = std::getenv(kApiKeyEnv)) api_key_ = key;
  }

  std::string complete(std::string_view system, std::string_view user) override {
    const nlohmann::json body = {
        {"model", spec_.model},
        {"messages",
         {{{"role", "system"}, {"content", std::string(system)}}, {{"role", "user"}, {"content", std::string(user)}}}},
        {"temperature", spec_.temperature},
        {"max_tokens", spec_.max_tokens},
    };
    const std::string payload = body.dump();

    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

    std::string last_error;
    for (int attempt = 0; attempt <= spec_.max_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(spec_.retry_backoff * (1LL << (attempt - 1)));
      attempts_.fetch_add(1, std::memory_order_relaxed);

      httplib::Client cli(url_.scheme_host_port);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(spec_.timeout);
      const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(spec_.timeout - secs);
      cli.set_connection_timeout(secs.count(), usecs.count());
      cli.set_read_timeout(secs.count(), usecs.count());
      cli.set_write_timeout(secs.count(), usecs.count());

      auto res = cli.Post(url_.path, headers, payload, "application/json");
      HttpAttempt info{attempt + 1, res ? res->status : 0, {}};
      if (!res) {
        info.error = httplib::to_string(res.error());
      } else if (res->status == 429 || res->status >= 500) {
        info.error = "HTTP " + std::to_string(res->status);
      }
      if (logger_) logger_(info);
      if (!info.error.empty()) {
        last_error = info.error;
        continue;
      }
      if (res->status < 200 || res->status >= 300) {
        throw EngineUnavailable("engine returned HTTP " + std::to_string(res->status) + ": " + res->body);
      }
      return extract_content(res->body);
    }
    throw EngineUnavailable("engine unavailable after " + std::to_string(spec_.max_retries + 1) +
                            " attempt(s): " + last_error);
  }

  const EngineSpec& spec() const override { return spec_; }

  int attempts() const noexcept { return attempts_.load(); }

  static std::string extract_content(const std::string& body) {
    if (body.empty()) throw MalformedResponse("empty response body");
    try {
      const auto j = nlohmann::json::parse(body);
      const auto& content = j.at("choices").at(0).at("message").at("content");
      if (!content.is_string()) throw MalformedResponse("message content is not a string");
      return content.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw MalformedResponse(std::string("undecodable response: ") + e.what());
    }
  }

 private:
  EngineSpec spec_;
  ParsedUrl url_;
  AttemptLogger logger_;
  std::string api_key_;
  std::atomic<int> attempts_{0};
};

}  // namespace dlpo
