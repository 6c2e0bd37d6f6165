#pragma once

// The textual-gradient loop: forward, loss, backward reflection, update.
//
// Request texts are pure functions of their inputs, so replayed runs issue
// byte-identical requests.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlpo/engine.hpp"
#include "dlpo/error.hpp"
#include "dlpo/eval.hpp"
#include "dlpo/prompt.hpp"

namespace dlpo {

/// Technique-provided instruction text spliced into a backward or update request.
struct InstructionBlock {
  enum class Kind { LearningRate, Explore, Dropout, Contrastive, RegularizeL2, RegularizeL1, Momentum, Correction };

  Kind kind{};
  std::string text;
};

inline const char* to_string(InstructionBlock::Kind k) {
  using K = InstructionBlock::Kind;
  switch (k) {
    case K::LearningRate: return "tlr";
    case K::Explore: return "explore";
    case K::Dropout: return "tdo";
    case K::Contrastive: return "tcl";
    case K::RegularizeL2: return "tregu_l2";
    case K::RegularizeL1: return "tregu_l1";
    case K::Momentum: return "tmnt";
    case K::Correction: return "correction";
  }
  return "?";
}

struct ChatRequest {
  std::string system;
  std::string user;
};

inline constexpr std::string_view kBackwardSystem =
    "You are part of an optimization system that improves the system prompt of a language model. "
    "You will see the prompt and the model's graded answers on a batch of examples. "
    "Explain concretely how the prompt should change so that the model makes fewer mistakes. "
    "Do not write the new prompt yourself.";

inline constexpr std::string_view kOptimizerSystem =
    "You are part of an optimization system that improves the system prompt of a language model. "
    "You will see the prompt and feedback on it. Rewrite the prompt to address the feedback, "
    "following any additional instructions. Return only the new prompt between "
    "<IMPROVED-VARIABLE> and </IMPROVED-VARIABLE>.";

inline constexpr std::string_view kVariableOpen = "<VARIABLE>";
inline constexpr std::string_view kVariableClose = "</VARIABLE>";
inline constexpr std::string_view kImprovedOpen = "<IMPROVED-VARIABLE>";
inline constexpr std::string_view kImprovedClose = "</IMPROVED-VARIABLE>";

// ---------------------------------------------------------------------------
// Loss

struct LossPair {
  std::string example_id;
  std::string x;      // input
  std::string y;      // gold
  std::string y_hat;  // raw model output
};

struct LossRecord {
  std::string example_id;
  std::string input;
  std::string gold;
  std::optional<std::string> predicted;
  bool correct = false;
  std::string raw_output;
};

struct LossReport {
  std::vector<LossRecord> records;
  double accuracy = 0.0;
  int batch_index = 0;
  int step = 0;

  std::size_t correct_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.correct ? 1 : 0;
    return n;
  }
};

inline LossReport compute_loss(std::span<const LossPair> pairs, int batch_index = 0, int step = 0) {
  if (pairs.empty()) throw EmptyBatch();
  LossReport rep;
  rep.batch_index = batch_index;
  rep.step = step;
  for (const auto& p : pairs) {
    LossRecord r;
    r.example_id = p.example_id;
    r.input = p.x;
    r.gold = p.y;
    r.raw_output = p.y_hat;
    r.predicted = extract_answer(p.y_hat);
    r.correct = score(r.predicted, p.y);
    rep.records.push_back(std::move(r));
  }
  rep.accuracy = static_cast<double>(rep.correct_count()) / static_cast<double>(rep.records.size());
  return rep;
}

/// Per-example verdict listing handed to the backward engine.
inline std::string render_loss(const LossReport& loss) {
  std::string out = "Accuracy: " + std::to_string(loss.correct_count()) + "/" + std::to_string(loss.records.size()) + "\n";
  for (std::size_t i = 0; i < loss.records.size(); ++i) {
    const auto& r = loss.records[i];
    out += "\nExample " + std::to_string(i + 1) + ": " + (r.correct ? "correct" : "incorrect") + "\n";
    out += "Question: " + r.input + "\n";
    out += "Expected answer: " + r.gold + "\n";
    out += "Extracted answer: " + r.predicted.value_or("(none)") + "\n";
    out += "Model output: " + r.raw_output + "\n";
  }
  return out;
}

/// Runs the forward engine over a batch (in order) and scores it.
inline LossReport forward_batch(Engine& engine, const Prompt& prompt, std::span<const Example> batch,
                                int batch_index, unsigned workers = 1) {
  const auto outputs =
      parallel_map(batch.size(), workers, [&](std::size_t i) { return forward(engine, prompt, batch[i].question); });
  std::vector<LossPair> pairs;
  pairs.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    pairs.push_back({batch[i].id, batch[i].question, batch[i].gold_answer, outputs[i]});
  }
  return compute_loss(pairs, batch_index, prompt.step());
}

// ---------------------------------------------------------------------------
// Backward

struct TextualGradient {
  std::string feedback;
  int step = 0;
  int source_batch = 0;
  double loss_accuracy = 0.0;
};

namespace detail {
inline void append_blocks(std::string& out, std::span<const InstructionBlock> extras) {
  for (const auto& b : extras) {
    out += b.text;
    out += "\n\n";
  }
}
}  // namespace detail

inline ChatRequest build_backward_request(const Prompt& prompt, const LossReport& loss,
                                          std::span<const InstructionBlock> extras) {
  std::string user;
  user += "Here is the variable under optimization, the system prompt of the model:\n\n";
  user += std::string(kVariableOpen) + "\n" + prompt.text() + "\n" + std::string(kVariableClose) + "\n\n";
  user += "Here are the model's answers on a batch of examples under this prompt:\n\n";
  user += "<LOSS>\n" + render_loss(loss) + "</LOSS>\n\n";
  detail::append_blocks(user, extras);
  user += "Give feedback on how to change the variable so the model answers more of these examples correctly.";
  return {std::string(kBackwardSystem), std::move(user)};
}

inline TextualGradient backward(Engine& engine, const Prompt& prompt, const LossReport& loss,
                                std::span<const InstructionBlock> extras) {
  const ChatRequest req = build_backward_request(prompt, loss, extras);
  std::string feedback = engine.complete(req.system, req.user);
  if (normalize_ws(feedback).empty()) throw MalformedResponse("backward engine returned empty feedback");
  return {std::move(feedback), prompt.step(), loss.batch_index, loss.accuracy};
}

// ---------------------------------------------------------------------------
// Update

inline ChatRequest build_update_request(const Prompt& prompt, const TextualGradient& gradient,
                                        std::span<const InstructionBlock> extras) {
  std::string user;
  user += "Here is the variable to improve:\n\n";
  user += std::string(kVariableOpen) + "\n" + prompt.text() + "\n" + std::string(kVariableClose) + "\n\n";
  user += "Here is the feedback on the variable:\n\n";
  user += "<FEEDBACK>\n" + gradient.feedback + "\n</FEEDBACK>\n\n";
  detail::append_blocks(user, extras);
  user += "Write the improved variable between " + std::string(kImprovedOpen) + " and " +
          std::string(kImprovedClose) + ". Put nothing but the new variable inside the tags.";
  return {std::string(kOptimizerSystem), std::move(user)};
}

/// Text between the improved-variable markers, trimmed; nullopt when absent.
inline std::optional<std::string> extract_improved(std::string_view response) {
  const auto open = response.find(kImprovedOpen);
  if (open == std::string_view::npos) return std::nullopt;
  const auto body = open + kImprovedOpen.size();
  const auto close = response.find(kImprovedClose, body);
  if (close == std::string_view::npos) return std::nullopt;
  return detail::trim(response.substr(body, close - body));
}

struct UpdateOutcome {
  std::optional<Prompt> candidate;
  int attempts = 0;
  std::vector<std::string> failures;  // one message per failed attempt

  bool skipped() const noexcept { return !candidate.has_value(); }
};

inline constexpr int kUpdateAttempts = 2;

/// Asks the optimizer for an improved prompt.
///
/// A response without delimiters, or one that drops a sentence frozen by
/// dropout, is retried once with a corrective note; a second failure skips
/// the step (no candidate) instead of aborting the run.
inline UpdateOutcome apply_update(Engine& engine, const Prompt& prompt, const TextualGradient& gradient,
                                  std::span<const InstructionBlock> extras,
                                  std::span<const SentenceSpan> preserved = {}) {
  if (gradient.step != prompt.step()) throw Error("gradient does not belong to the prompt's step");
  UpdateOutcome out;
  std::vector<InstructionBlock> blocks(extras.begin(), extras.end());
  for (int attempt = 0; attempt < kUpdateAttempts; ++attempt) {
    ++out.attempts;
    const ChatRequest req = build_update_request(prompt, gradient, blocks);
    const std::string response = engine.complete(req.system, req.user);
    try {
      const auto improved = extract_improved(response);
      if (!improved) throw DelimiterMissing();
      out.candidate = preserved.empty() ? prompt.child(*improved) : merge(prompt, preserved, *improved);
      return out;
    } catch (const DelimiterMissing& e) {
      out.failures.emplace_back(e.what());
      blocks.push_back({InstructionBlock::Kind::Correction,
                        "Your previous answer did not contain the " + std::string(kImprovedOpen) + " and " +
                            std::string(kImprovedClose) + " tags. Wrap the complete new variable in them."});
    } catch (const PreservedSentenceLost& e) {
      out.failures.emplace_back(e.what());
      blocks.push_back({InstructionBlock::Kind::Correction,
                        "Your previous answer changed or removed the sentence '" + e.sentence() +
                            "', which must stay exactly as written in this step."});
    }
  }
  return out;
}

}  // namespace dlpo
