#pragma once

// Datasets, answer extraction and matching, accuracy evaluation, and the
// convergence-step rule.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <regex>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlpo/engine.hpp"
#include "dlpo/error.hpp"
#include "dlpo/parallel.hpp"
#include "dlpo/prompt.hpp"
#include "dlpo/rng.hpp"

namespace dlpo {

struct Example {
  std::string id;
  std::string question;
  std::string gold_answer;
};

struct DatasetSplit {
  std::string name;
  std::vector<Example> examples;

  bool empty() const noexcept { return examples.empty(); }
  std::size_t size() const noexcept { return examples.size(); }

  /// n examples chosen uniformly without replacement; reproducible per RNG state.
  std::vector<Example> sample(std::size_t n, Rng& rng) const {
    std::vector<Example> out;
    for (std::size_t i : sample_indices(examples.size(), n, rng)) out.push_back(examples[i]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Answer canonicalization

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

// Sign, optional currency symbol, digits with thousands separators, optional fraction.
inline const std::regex& number_regex() {
  static const std::regex re(R"([-+]?(?:\$|€|£|¥)?[-+]?\d[\d,]*(?:\.\d+)?)");
  return re;
}

}  // namespace detail

/// Canonical form of a numeric token: no commas, currency symbols or leading
/// "+", no trailing fractional zeros, no redundant leading zeros. Returns
/// nullopt when `token` is not a number.
inline std::optional<std::string> canonical_number(std::string_view token) {
  std::string s;
  for (std::size_t i = 0; i < token.size(); ++i) {
    const char c = token[i];
    if (c == ',' || c == '$' || c == '+' || detail::is_space(c)) continue;
    if (static_cast<unsigned char>(c) >= 0x80) continue;  // multibyte currency symbols
    s.push_back(c);
  }
  bool negative = false;
  if (!s.empty() && s.front() == '-') {
    negative = true;
    s.erase(0, 1);
  }
  static const std::regex plain(R"(\d+(\.\d+)?)");
  if (!std::regex_match(s, plain)) return std::nullopt;
  auto dot = s.find('.');
  if (dot != std::string::npos) {
    while (s.back() == '0') s.pop_back();
    if (s.back() == '.') s.pop_back();
  }
  dot = s.find('.');
  const std::size_t int_len = dot == std::string::npos ? s.size() : dot;
  std::size_t lead = 0;
  while (lead + 1 < int_len && s[lead] == '0') ++lead;
  s.erase(0, lead);
  if (s == "0") negative = false;
  return negative ? "-" + s : s;
}

namespace detail {

inline std::optional<std::string> last_number(std::string_view text) {
  const std::string s(text);
  std::optional<std::string> found;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), number_regex()); it != std::sregex_iterator(); ++it) {
    if (auto c = canonical_number(it->str())) found = std::move(c);
  }
  return found;
}

inline std::optional<std::string> first_number(std::string_view text) {
  const std::string s(text);
  for (auto it = std::sregex_iterator(s.begin(), s.end(), number_regex()); it != std::sregex_iterator(); ++it) {
    if (auto c = canonical_number(it->str())) return c;
  }
  return std::nullopt;
}

}  // namespace detail

/// Pulls the final answer out of a model completion.
///
/// Cascade: the last [bracketed] group when it holds a number, else the first
/// number after the last "Answer:" (any case), else the last number anywhere.
inline std::optional<std::string> extract_answer(std::string_view raw_output) {
  const auto close = raw_output.rfind(']');
  if (close != std::string_view::npos) {
    const auto open = raw_output.rfind('[', close);
    if (open != std::string_view::npos) {
      if (auto n = canonical_number(detail::trim(raw_output.substr(open + 1, close - open - 1)))) return n;
    }
  }
  const std::string lower = detail::lowercase(raw_output);
  const auto marker = lower.rfind("answer:");
  if (marker != std::string::npos) {
    if (auto n = detail::first_number(raw_output.substr(marker + 7))) return n;
  }
  return detail::last_number(raw_output);
}

/// Canonical gold answer. GSM8K-style "reasoning #### 42" keeps only the tail.
inline std::string canonical_gold(std::string_view answer) {
  const auto hashes = answer.rfind("####");
  std::string tail = detail::trim(hashes == std::string_view::npos ? answer : answer.substr(hashes + 4));
  if (auto n = canonical_number(tail)) return *n;
  return tail;
}

namespace detail {
inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}
}  // namespace detail

/// Numeric comparison with relative tolerance 1e-6 when both sides parse as
/// numbers; exact string comparison otherwise.
inline bool score(const std::string& pred, const std::string& gold) {
  const auto a = detail::parse_double(pred);
  const auto b = detail::parse_double(gold);
  if (a && b) return std::abs(*a - *b) <= 1e-6 * std::max(1.0, std::abs(*b));
  return pred == gold;
}

inline bool score(const std::optional<std::string>& pred, const std::string& gold) {
  return pred.has_value() && score(*pred, gold);
}

// ---------------------------------------------------------------------------
// Dataset ingestion

/// Reads a JSON-lines dataset with `question`, `answer` and optional `id`.
/// Missing ids become the zero-padded (6 digit) line number.
inline DatasetSplit load_dataset(const std::filesystem::path& path, std::string name = "train") {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open dataset " + path.string());
  DatasetSplit split;
  split.name = std::move(name);
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    Example ex;
    try {
      const auto j = nlohmann::json::parse(line);
      ex.question = j.at("question").get<std::string>();
      const auto& answer = j.at("answer");
      ex.gold_answer = canonical_gold(answer.is_string() ? answer.get<std::string>() : answer.dump());
      if (j.contains("id")) {
        ex.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      } else {
        std::string num = std::to_string(lineno);
        ex.id = std::string(num.size() < 6 ? 6 - num.size() : 0, '0') + num;
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
    if (ex.gold_answer.empty()) throw ParseError(lineno, "empty answer");
    if (!seen.insert(ex.id).second) throw DuplicateId(ex.id);
    split.examples.push_back(std::move(ex));
  }
  return split;
}

// ---------------------------------------------------------------------------
// Evaluation

/// One forward pass: the prompt is the system message, the input the user message.
inline std::string forward(Engine& engine, const Prompt& prompt, std::string_view x) {
  return engine.complete(prompt.text(), x);
}

struct EvalRecord {
  std::string example_id;
  bool correct = false;
  std::optional<std::string> pred;
  std::string gold;
  std::string raw_output;
};

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<EvalRecord> records;
};

inline nlohmann::json to_json(const EvalRecord& r, int step) {
  return {{"step", step},
          {"example_id", r.example_id},
          {"correct", r.correct},
          {"pred", r.pred ? nlohmann::json(*r.pred) : nlohmann::json(nullptr)},
          {"gold", r.gold}};
}

namespace detail {
// A transient engine failure on one example is retried once.
inline std::string forward_with_retry(Engine& engine, const Prompt& prompt, std::string_view x) {
  try {
    return forward(engine, prompt, x);
  } catch (const EngineUnavailable&) {
  } catch (const MalformedResponse&) {
  }
  return forward(engine, prompt, x);
}
}  // namespace detail

/// Accuracy of `prompt` over `examples` (in order).
inline EvalResult evaluate(Engine& engine, const Prompt& prompt, std::span<const Example> examples,
                           unsigned workers = 1) {
  if (examples.empty()) throw Error("evaluate called on an empty split");
  EvalResult res;
  res.records = parallel_map(examples.size(), workers, [&](std::size_t i) {
    const Example& ex = examples[i];
    EvalRecord rec;
    rec.example_id = ex.id;
    rec.gold = ex.gold_answer;
    rec.raw_output = detail::forward_with_retry(engine, prompt, ex.question);
    rec.pred = extract_answer(rec.raw_output);
    rec.correct = score(rec.pred, ex.gold_answer);
    return rec;
  });
  res.total = res.records.size();
  for (const auto& r : res.records) res.correct += r.correct ? 1 : 0;
  res.accuracy = static_cast<double>(res.correct) / static_cast<double>(res.total);
  return res;
}

/// Evaluates on the whole split, or on a seeded subset of `subset_size` examples.
inline EvalResult evaluate(Engine& engine, const Prompt& prompt, const DatasetSplit& split,
                           std::optional<std::size_t> subset_size, Rng& rng, unsigned workers = 1) {
  if (split.empty()) throw Error("evaluate called on an empty split");
  if (!subset_size || *subset_size >= split.size()) return evaluate(engine, prompt, split.examples, workers);
  const auto subset = split.sample(*subset_size, rng);
  return evaluate(engine, prompt, subset, workers);
}

// ---------------------------------------------------------------------------
// Convergence

struct ConvergenceReport {
  std::optional<int> converged_step;
  double threshold = 0.0;
  int window = 3;
};

/// First step that starts a run of `window` consecutive entries at or above
/// `threshold`.
inline ConvergenceReport detect_convergence(std::span<const std::pair<int, double>> val_history, double threshold,
                                            int window = 3) {
  ConvergenceReport rep;
  rep.threshold = threshold;
  rep.window = window;
  int run = 0;
  for (std::size_t i = 0; i < val_history.size(); ++i) {
    run = val_history[i].second >= threshold ? run + 1 : 0;
    if (run == window) {
      rep.converged_step = val_history[i + 1 - static_cast<std::size_t>(window)].first;
      break;
    }
  }
  return rep;
}

}  // namespace dlpo
