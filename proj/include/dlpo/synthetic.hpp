#pragma once

// Offline stand-ins for the LLM engines.
//
// The landscape scores a prompt by which target keywords it mentions, minus a
// length penalty, plus optional per-prompt Gaussian noise. The forward engine
// answers an example correctly when the example's fixed uniform draw falls
// below the prompt's fitness, so accuracy is monotone in fitness. The scripted
// backward engine names missing keywords; the scripted optimizer appends one
// sentence per named keyword and honors learning-rate, dropout and
// regularization instructions.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlpo/engine.hpp"
#include "dlpo/eval.hpp"
#include "dlpo/hash.hpp"
#include "dlpo/prompt.hpp"
#include "dlpo/rng.hpp"
#include "dlpo/tgd.hpp"

namespace dlpo::synthetic {

struct Keyword {
  std::string word;
  double weight = 0.0;
};

struct LandscapeSpec {
  std::vector<Keyword> keywords;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> fillers;  // sentences a regularizing optimizer removes
  double edit_damage = 0.0;          // chance the optimizer also deletes an unprotected sentence
  int sentence_budget = 12;
  double sentence_penalty = 0.02;
};

inline LandscapeSpec landscape_from_json(const nlohmann::json& j) {
  LandscapeSpec s;
  for (const auto& kw : j.at("keywords")) {
    s.keywords.push_back({kw.at("word").get<std::string>(), kw.at("weight").get<double>()});
  }
  s.noise_sigma = j.value("noise_sigma", 0.0);
  s.seed = j.value("seed", std::uint64_t{0});
  s.fillers = j.value("fillers", std::vector<std::string>{});
  s.edit_damage = j.value("edit_damage", 0.0);
  for (const auto& kw : s.keywords) {
    if (kw.weight < 0.0 || kw.weight > 1.0) throw Error("keyword weight outside [0, 1]: " + kw.word);
  }
  if (s.noise_sigma < 0.0) throw Error("noise_sigma must be non-negative");
  if (s.edit_damage < 0.0 || s.edit_damage > 1.0) throw Error("edit_damage must lie in [0, 1]");
  return s;
}

inline nlohmann::json to_json(const LandscapeSpec& s) {
  nlohmann::json kws = nlohmann::json::array();
  for (const auto& kw : s.keywords) kws.push_back({{"word", kw.word}, {"weight", kw.weight}});
  return {{"keywords", kws},      {"noise_sigma", s.noise_sigma}, {"seed", s.seed},
          {"fillers", s.fillers}, {"edit_damage", s.edit_damage}};
}

// ---------------------------------------------------------------------------
// Fitness

namespace detail {

inline bool is_word_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
}

inline double seeded_uniform(std::uint64_t seed, std::string_view tag, std::string_view key) {
  Rng rng(seed ^ hash64(std::string(tag) + '\0' + std::string(key)));
  return rng.uniform01();
}

}  // namespace detail

/// Case-insensitive whole-word match.
inline bool mentions(std::string_view text, std::string_view word) {
  const std::string hay = dlpo::detail::lowercase(text);
  const std::string needle = dlpo::detail::lowercase(word);
  if (needle.empty()) return false;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
    const bool left = pos == 0 || !detail::is_word_char(hay[pos - 1]);
    const std::size_t end = pos + needle.size();
    const bool right = end == hay.size() || !detail::is_word_char(hay[end]);
    if (left && right) return true;
  }
  return false;
}

/// Keyword score minus the length penalty, clamped to [0, 1]; no noise.
inline double base_fitness(const LandscapeSpec& spec, std::string_view prompt_text) {
  double sum = 0.0;
  for (const auto& kw : spec.keywords) {
    if (mentions(prompt_text, kw.word)) sum += kw.weight;
  }
  const auto sentences = static_cast<int>(segment(prompt_text).size());
  sum -= spec.sentence_penalty * std::max(0, sentences - spec.sentence_budget);
  return std::clamp(sum, 0.0, 1.0);
}

/// base_fitness plus seeded per-prompt Gaussian noise, clamped to [0, 1].
inline double fitness(const LandscapeSpec& spec, std::string_view prompt_text) {
  double f = base_fitness(spec, prompt_text);
  if (spec.noise_sigma > 0.0) {
    Rng rng(spec.seed ^ hash64(std::string("noise\0", 6) + std::string(prompt_text)));
    f += spec.noise_sigma * rng.normal();
  }
  return std::clamp(f, 0.0, 1.0);
}

/// The forward model's answer: gold when the example's draw is below fitness,
/// otherwise a wrong number.
inline std::string landscape_forward(const LandscapeSpec& spec, std::string_view prompt_text, const Example& ex) {
  const double u = detail::seeded_uniform(spec.seed, "example", ex.question);
  if (u < fitness(spec, prompt_text)) return "Answer: " + ex.gold_answer;
  if (const auto g = dlpo::detail::parse_double(ex.gold_answer)) {
    return "Answer: " + *canonical_number(std::to_string(static_cast<long long>(*g) + 1));
  }
  return "Answer: unknown";
}

// ---------------------------------------------------------------------------
// Scripted backward and optimizer

inline constexpr std::string_view kMissingPrefix = "Missing keywords: ";
inline constexpr std::string_view kNoIssues = "no issues found";

inline std::string keyword_sentence(std::string_view word) { return "Pay attention to " + std::string(word) + "."; }

/// Names up to two missing keywords, lowest weight first.
inline std::string scripted_backward(const LandscapeSpec& spec, std::string_view prompt_text) {
  std::vector<std::pair<Keyword, std::size_t>> missing;
  for (std::size_t i = 0; i < spec.keywords.size(); ++i) {
    if (!mentions(prompt_text, spec.keywords[i].word)) missing.emplace_back(spec.keywords[i], i);
  }
  if (missing.empty()) return std::string(kNoIssues);
  std::stable_sort(missing.begin(), missing.end(),
                   [](const auto& a, const auto& b) { return a.first.weight < b.first.weight; });
  std::string out(kMissingPrefix);
  for (std::size_t i = 0; i < std::min<std::size_t>(2, missing.size()); ++i) {
    if (i) out += ", ";
    out += missing[i].first.word;
  }
  return out + ".";
}

namespace detail {

inline std::optional<std::string> between(std::string_view text, std::string_view open, std::string_view close,
                                          bool last = false) {
  const auto o = last ? text.rfind(open) : text.find(open);
  if (o == std::string_view::npos) return std::nullopt;
  const auto body = o + open.size();
  const auto c = text.find(close, body);
  if (c == std::string_view::npos) return std::nullopt;
  return std::string(text.substr(body, c - body));
}

inline std::vector<std::string> split(std::string_view s, std::string_view sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  for (auto next = s.find(sep); next != std::string_view::npos; next = s.find(sep, pos)) {
    out.emplace_back(s.substr(pos, next - pos));
    pos = next + sep.size();
  }
  out.emplace_back(s.substr(pos));
  return out;
}

}  // namespace detail

/// What the scripted optimizer reads out of an update request.
struct UpdateRequestView {
  std::string prompt_text;
  std::vector<std::string> keywords;
  std::optional<int> learning_rate;
  std::vector<std::string> preserved;
  bool regularize_l1 = false;
};

inline UpdateRequestView parse_update_request(std::string_view user) {
  UpdateRequestView v;
  v.prompt_text = detail::between(user, "<VARIABLE>\n", "\n</VARIABLE>").value_or("");
  const std::string feedback = detail::between(user, "<FEEDBACK>\n", "\n</FEEDBACK>").value_or("");
  if (const auto pos = feedback.find(kMissingPrefix); pos != std::string::npos) {
    std::string list = feedback.substr(pos + kMissingPrefix.size());
    list = list.substr(0, list.find('\n'));
    if (!list.empty() && list.back() == '.') list.pop_back();
    for (auto& w : detail::split(list, ", ")) {
      w = dlpo::detail::trim(w);
      if (!w.empty()) v.keywords.push_back(w);
    }
  }
  if (const auto lr = detail::between(user, "Your learning rate is: ", ".", /*last=*/true)) {
    v.learning_rate = std::stoi(*lr);
  }
  if (const auto kept = detail::between(user, "<DROPOUT>'", "'</DROPOUT>")) {
    v.preserved = detail::split(*kept, "', '");
  }
  v.regularize_l1 = user.find("please delete that sentence") != std::string_view::npos;
  return v;
}

/// Deterministic optimizer: appends keyword sentences (at most r edits when a
/// learning rate is given), removes one filler sentence under L1
/// regularization if budget remains, and, with probability edit_damage, also
/// drops one sentence not frozen by dropout.
inline std::string scripted_update_text(const LandscapeSpec& spec, std::string_view user) {
  const UpdateRequestView req = parse_update_request(user);
  std::vector<std::string> sentences;
  for (const auto& s : segment(req.prompt_text)) sentences.push_back(s.content);

  auto is_preserved = [&](const std::string& s) {
    const std::string n = normalize_ws(s);
    return std::any_of(req.preserved.begin(), req.preserved.end(),
                       [&](const std::string& p) { return normalize_ws(p) == n; });
  };

  const std::size_t budget = req.learning_rate ? static_cast<std::size_t>(std::max(*req.learning_rate, 0))
                                               : static_cast<std::size_t>(-1);
  std::size_t edits = 0;

  if (spec.edit_damage > 0.0 && detail::seeded_uniform(spec.seed, "damage", user) < spec.edit_damage) {
    std::vector<std::size_t> victims;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      if (!is_preserved(sentences[i])) victims.push_back(i);
    }
    if (!victims.empty()) {
      Rng rng(spec.seed ^ hash64(std::string("victim\0", 7) + std::string(user)));
      sentences.erase(sentences.begin() + static_cast<std::ptrdiff_t>(victims[rng.below(victims.size())]));
    }
  }

  for (const auto& kw : req.keywords) {
    if (edits >= budget) break;
    const std::string sentence = keyword_sentence(kw);
    if (mentions(req.prompt_text, kw)) continue;
    sentences.push_back(sentence);
    ++edits;
  }

  if (req.regularize_l1 && edits < budget) {
    for (auto it = sentences.begin(); it != sentences.end(); ++it) {
      const bool filler = std::any_of(spec.fillers.begin(), spec.fillers.end(), [&](const std::string& f) {
        return normalize_ws(f) == normalize_ws(*it);
      });
      if (filler && !is_preserved(*it)) {
        sentences.erase(it);
        ++edits;
        break;
      }
    }
  }

  std::string text;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (i) text += '\n';
    text += sentences[i];
  }
  return std::string(kImprovedOpen) + "\n" + text + "\n" + std::string(kImprovedClose);
}

/// Forward engine over the landscape. Gold answers are looked up by question
/// text, so every split the run touches must be registered.
class LandscapeForwardEngine : public Engine {
 public:
  LandscapeForwardEngine(EngineSpec spec, LandscapeSpec landscape) : spec_(std::move(spec)), land_(std::move(landscape)) {}

  void add_examples(std::span<const Example> examples) {
    for (const auto& ex : examples) by_question_[ex.question] = ex;
  }

  std::string complete(std::string_view system, std::string_view user) override {
    const auto it = by_question_.find(std::string(user));
    if (it == by_question_.end()) throw Error("synthetic forward engine does not know this question");
    return landscape_forward(land_, system, it->second);
  }

  const EngineSpec& spec() const override { return spec_; }
  const LandscapeSpec& landscape() const noexcept { return land_; }

 private:
  EngineSpec spec_;
  LandscapeSpec land_;
  std::map<std::string, Example, std::less<>> by_question_;
};

/// Backward engine serving both reflection and update requests.
class ScriptedBackwardEngine : public Engine {
 public:
  ScriptedBackwardEngine(EngineSpec spec, LandscapeSpec landscape) : spec_(std::move(spec)), land_(std::move(landscape)) {}

  std::string complete(std::string_view system, std::string_view user) override {
    if (system == kBackwardSystem) {
      return scripted_backward(land_, detail::between(user, "<VARIABLE>\n", "\n</VARIABLE>").value_or(""));
    }
    if (system == kOptimizerSystem) return scripted_update_text(land_, user);
    throw Error("scripted backward engine received an unknown request type");
  }

  const EngineSpec& spec() const override { return spec_; }

 private:
  EngineSpec spec_;
  LandscapeSpec land_;
};

}  // namespace dlpo::synthetic
