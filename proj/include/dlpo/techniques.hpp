#pragma once

// Instruction templates and decision rules for the optimization techniques:
// learning rate (and its decay), dropout, simulated annealing, momentum,
// contrastive history sampling, and regularization.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dlpo/error.hpp"
#include "dlpo/prompt.hpp"
#include "dlpo/rng.hpp"
#include "dlpo/tgd.hpp"

namespace dlpo {

// ---------------------------------------------------------------------------
// Learning rate

/// Sentence-level learning-rate instruction with its worked four-change example.
inline std::string tlr_block_text(int r) {
  if (r < 1) throw Error("learning-rate block requires r >= 1");
  const std::string rs = std::to_string(r);
  return "You need to update the original variable on a sentence level, and the number of updates "
         "(including adding sentence, deleting sentence, and modifying sentence) should be limited to a "
         "specific quantity (which we call the 'learning rate').\n"
         "If the learning rate is: 4, here's an example:\n"
         "Initial:\n"
         "<VARIABLE>\n"
         "As a Math Calculator, please solve:\n"
         "Required Steps:\n"
         "1. Identify problem type\n"
         "2. Show calculation steps\n"
         "Output Format:\n"
         "- Process:\n"
         "- Final Result:\n"
         "- Verification:\n"
         "</VARIABLE>\n"
         "Modified Version with exactly 4 changes:\n"
         "<IMPROVED-VARIABLE>\n"
         "As a reasoning Engine, please solve:  [modifying sentence]\n"
         "Required Steps:\n"
         "1. Identify problem type\n"
         "2. Show calculation steps\n"
         "3. Analyze complexity [adding sentence]\n"
         "4. Assess stability [adding sentence]\n"
         "Output Format:\n"
         "- Process:\n"
         "- Final Result:   [deleting sentence 'Verification:']\n"
         "</IMPROVED-VARIABLE>\n"
         "Conclusion:\n"
         "1(modify) + 2(add) + 1(delete) = 4.\n"
         "Your learning rate is: " +
         rs + ". For each optimize step, please make " + rs +
         " update(s) to the original sentences and keep the other unchanged.";
}

inline InstructionBlock tlr_block(int r) { return {InstructionBlock::Kind::LearningRate, tlr_block_text(r)}; }

inline constexpr std::string_view kExploreText =
    "In order to break away from convention, discover more creative solutions, and explore limitless "
    "possibilities, please boldly unleash your imagination based on feedback and make transformative "
    "modifications to the previous variables. Do not be confined by existing forms; courageously break the "
    "mold and experiment with entirely new combinations and ideas, as this may spark unexpected and "
    "groundbreaking outcomes.";

inline InstructionBlock explore_block() { return {InstructionBlock::Kind::Explore, std::string(kExploreText)}; }

enum class TlrMode { InstructionOnly, HardReject };

inline const char* to_string(TlrMode m) { return m == TlrMode::InstructionOnly ? "instruction_only" : "hard_reject"; }

struct TlrDecision {
  std::size_t units = 0;
  int r = 0;
  bool accepted = true;
  std::size_t overage = 0;  // units beyond r (logged even when accepted)
};

/// Measures the update units a candidate spent against the learning rate.
inline TlrDecision enforce_tlr(const Prompt& old_prompt, const Prompt& candidate, int r, TlrMode mode) {
  TlrDecision d;
  d.units = diff(old_prompt, candidate).unit_count;
  d.r = r;
  const auto limit = static_cast<std::size_t>(std::max(r, 0));
  d.overage = d.units > limit ? d.units - limit : 0;
  d.accepted = mode == TlrMode::InstructionOnly || d.units <= limit;
  return d;
}

/// Extra note attached when a hard-rejected candidate is requested again.
inline InstructionBlock tlr_restatement(std::size_t units, int r) {
  return {InstructionBlock::Kind::Correction,
          "Your previous answer made " + std::to_string(units) + " sentence-level changes, but the learning rate "
          "is " + std::to_string(r) + ". Keep only the " + std::to_string(r) +
          " most impactful change(s) and leave every other sentence exactly as it was."};
}

struct LrSchedule {
  int current_r = 60;
  int fine_threshold = 4;
  int explore_threshold = 10;
  bool decay_enabled = true;
};

struct TlrdStep {
  enum class Choice { None, Fine, Explore };

  int r = 0;
  Choice choice = Choice::None;
};

inline const char* to_string(TlrdStep::Choice c) {
  switch (c) {
    case TlrdStep::Choice::None: return "none";
    case TlrdStep::Choice::Fine: return "fine";
    case TlrdStep::Choice::Explore: return "explore";
  }
  return "?";
}

/// Decays r by one (floor 1) and picks the instruction for the new rate:
/// exploration above the explore threshold, the learning-rate block at or
/// below the fine threshold, nothing in between.
inline TlrdStep tlrd_step(LrSchedule& schedule) {
  if (schedule.decay_enabled) schedule.current_r = std::max(schedule.current_r - 1, 1);
  TlrdStep out;
  out.r = schedule.current_r;
  if (out.r > schedule.explore_threshold) {
    out.choice = TlrdStep::Choice::Explore;
  } else if (out.r <= schedule.fine_threshold) {
    out.choice = TlrdStep::Choice::Fine;
  }
  return out;
}

inline std::optional<InstructionBlock> tlrd_block(const TlrdStep& s) {
  switch (s.choice) {
    case TlrdStep::Choice::Explore: return explore_block();
    case TlrdStep::Choice::Fine: return tlr_block(s.r);
    case TlrdStep::Choice::None: break;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Dropout

/// Number of sentences frozen for dropout rate p over S sentences: ceil(p*S).
/// The 1e-9 slack keeps decimal rates exact (0.3 * 10 preserves 3).
inline std::size_t dropout_keep_count(std::size_t sentences, double p) {
  if (sentences == 0 || p <= 0.0) return 0;
  const double raw = std::ceil(p * static_cast<double>(sentences) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(raw, 1.0)), 1, sentences);
}

struct DropoutSelection {
  std::vector<SentenceSpan> preserved;  // in prompt order
  InstructionBlock block;
};

inline std::string tdo_block_text(std::span<const SentenceSpan> preserved) {
  std::string list;
  for (std::size_t i = 0; i < preserved.size(); ++i) {
    if (i) list += "', '";
    list += preserved[i].content;
  }
  return "We have introduced a dropout mechanism. The <DROPOUT>'" + list +
         "'</DROPOUT> in the original variable need to remain unchanged for this optimize step. You should "
         "focus on altering the other sentences.";
}

/// Freezes ceil(p*S) sentences chosen uniformly without replacement.
inline DropoutSelection tdo_select(const Prompt& prompt, double p, Rng& rng) {
  const auto& sentences = prompt.sentences();
  if (sentences.empty()) throw Error("dropout needs at least one sentence");
  if (!(p > 0.0 && p <= 1.0)) throw Error("dropout rate must lie in (0, 1]");
  auto picks = sample_indices(sentences.size(), dropout_keep_count(sentences.size(), p), rng);
  std::sort(picks.begin(), picks.end());
  DropoutSelection sel;
  for (std::size_t i : picks) sel.preserved.push_back(sentences[i]);
  sel.block = {InstructionBlock::Kind::Dropout, tdo_block_text(sel.preserved)};
  return sel;
}

// ---------------------------------------------------------------------------
// Simulated annealing

struct AnnealerState {
  double temperature = 0.05;
  double alpha = 0.9;
  double initial_t = 0.05;
  int steps = 0;

  static AnnealerState start(double t0, double alpha) {
    if (!(t0 > 0.0)) throw Error("annealing temperature must be positive");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw Error("cooling rate must lie in (0, 1]");
    return {t0, alpha, t0, 0};
  }
};

struct TsaDecision {
  bool accepted = false;
  double delta = 0.0;
  double probability = 1.0;
  std::optional<double> draw;  // present only when delta < 0
};

/// Metropolis rule on energy (train accuracy): improvements and ties are
/// always taken; a drop of |dE| is taken with probability exp(dE / T).
inline TsaDecision tsa_decide(const AnnealerState& state, double e_old, double e_new, Rng& rng) {
  if (!(state.temperature > 0.0)) throw Error("annealing temperature must be positive");
  TsaDecision d;
  d.delta = e_new - e_old;
  if (d.delta >= 0.0) {
    d.accepted = true;
    return d;
  }
  d.probability = std::exp(d.delta / state.temperature);
  d.draw = rng.uniform01();
  d.accepted = *d.draw < d.probability;
  return d;
}

inline AnnealerState tsa_cool(AnnealerState state) {
  state.temperature *= state.alpha;
  ++state.steps;
  return state;
}

// ---------------------------------------------------------------------------
// Momentum

inline constexpr std::size_t kMomentumWindow = 3;

/// Past-feedback block over the most recent (at most three) gradients, oldest
/// first. Returns nullopt when there is no past feedback.
inline std::optional<InstructionBlock> tmnt_block(std::span<const TextualGradient> past) {
  if (past.empty()) return std::nullopt;
  const std::size_t first = past.size() > kMomentumWindow ? past.size() - kMomentumWindow : 0;
  std::string history;
  for (std::size_t i = first; i < past.size(); ++i) {
    history += "\nFeedback " + std::to_string(i - first + 1) + ":\n" + past[i].feedback + "\n";
  }
  return InstructionBlock{
      InstructionBlock::Kind::Momentum,
      "Here is the historical feedback on this variable:\n<PAST-FEEDBACK>" + history +
          "</PAST-FEEDBACK>\n"
          "Please analyze the main trends and patterns in the feedback across different iterations. If the "
          "feedback consistently points to similar issues or suggests insufficient modifications, it indicates "
          "that the changes made to the variable are not substantial enough. The later history feedback will be "
          "more accurate and relevant.\n"
          "In such cases, please propose more significant and impactful adjustments to the variable to better "
          "address the feedback and improve its performance."};
}

// ---------------------------------------------------------------------------
// Contrastive history

struct HistoryEntry {
  Prompt prompt;
  double train_energy = 0.0;
  bool accepted = false;
  int step = 0;
};

/// Indices into the history, best first within each group.
struct TclPartition {
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
};

/// Sorts by energy (descending, ties by step then insertion order) and splits
/// in half; an odd middle entry goes to the positives.
inline TclPartition tcl_partition(std::span<const HistoryEntry> history) {
  if (history.size() < 2) throw HistoryTooSmall(history.size());
  std::vector<std::size_t> order(history.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (history[a].train_energy != history[b].train_energy) return history[a].train_energy > history[b].train_energy;
    return history[a].step < history[b].step;
  });
  const std::size_t n_pos = (history.size() + 1) / 2;
  TclPartition part;
  part.positives.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_pos));
  part.negatives.assign(order.begin() + static_cast<std::ptrdiff_t>(n_pos), order.end());
  return part;
}

/// Linear selection weights: positives by rank (best = |P|), negatives by
/// recency (most recent = |N|).
inline std::vector<double> tcl_positive_weights(const TclPartition& part) {
  std::vector<double> w;
  for (std::size_t i = 0; i < part.positives.size(); ++i) w.push_back(static_cast<double>(part.positives.size() - i));
  return w;
}

inline std::vector<double> tcl_negative_weights(const TclPartition& part, std::span<const HistoryEntry> history) {
  const std::size_t n = part.negatives.size();
  std::vector<std::size_t> by_recency(n);
  std::iota(by_recency.begin(), by_recency.end(), std::size_t{0});
  // Oldest first; history order breaks step ties.
  std::stable_sort(by_recency.begin(), by_recency.end(), [&](std::size_t a, std::size_t b) {
    const auto ha = part.negatives[a], hb = part.negatives[b];
    if (history[ha].step != history[hb].step) return history[ha].step < history[hb].step;
    return ha < hb;
  });
  std::vector<double> w(n);
  for (std::size_t rank = 0; rank < n; ++rank) w[by_recency[rank]] = static_cast<double>(rank + 1);
  return w;
}

/// Draws k items without replacement, each draw proportional to the remaining weights.
inline std::vector<std::size_t> weighted_sample(std::vector<double> weights, std::size_t k, Rng& rng) {
  std::vector<std::size_t> out;
  k = std::min(k, weights.size());
  for (std::size_t draw = 0; draw < k; ++draw) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    double u = rng.uniform01() * total;
    std::size_t pick = weights.size();
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      pick = i;
      if (u < weights[i]) break;
      u -= weights[i];
    }
    out.push_back(pick);
    weights[pick] = 0.0;
  }
  return out;
}

struct ContrastSample {
  std::vector<std::size_t> positives;  // history indices
  std::vector<std::size_t> negatives;  // history indices that passed the margin
  std::vector<std::size_t> discarded;  // sampled negatives that failed it
  double margin = 0.0;
  InstructionBlock block;

  bool two_sided() const noexcept { return !negatives.empty(); }
};

namespace detail {
inline std::string render_variables(std::span<const std::size_t> idx, std::span<const HistoryEntry> history) {
  std::string out = "\n";
  for (std::size_t i : idx) {
    char acc[32];
    std::snprintf(acc, sizeof acc, "%.4f", history[i].train_energy);
    out += "[training accuracy " + std::string(acc) + "]\n" + history[i].prompt.text() + "\n";
  }
  return out;
}
}  // namespace detail

/// Samples up to two positives and two negatives by their linear weights and
/// keeps the negatives that trail the best sampled positive by at least
/// `margin`. Emits the two-sided instruction when any negative survives,
/// otherwise the positive-only one.
inline ContrastSample tcl_sample(std::span<const HistoryEntry> history, const TclPartition& part, double margin,
                                 Rng& rng) {
  if (part.positives.empty()) throw Error("contrastive sampling needs at least one positive");
  ContrastSample s;
  s.margin = margin;
  for (std::size_t i : weighted_sample(tcl_positive_weights(part), 2, rng)) s.positives.push_back(part.positives[i]);
  double best = -1.0;
  for (std::size_t h : s.positives) best = std::max(best, history[h].train_energy);
  for (std::size_t i : weighted_sample(tcl_negative_weights(part, history), 2, rng)) {
    const std::size_t h = part.negatives[i];
    (best - history[h].train_energy >= margin ? s.negatives : s.discarded).push_back(h);
  }
  const std::string pos = detail::render_variables(s.positives, history);
  if (s.two_sided()) {
    s.block = {InstructionBlock::Kind::Contrastive,
               "You can learn valuable insights by comparing the good and bad variables from past data. On the "
               "training set, the better-performing variables are <Positive-VAR>" +
                   pos + "</Positive-VAR>, while the poorer-performing variables are <Negative-VAR>" +
                   detail::render_variables(s.negatives, history) +
                   "</Negative-VAR>. To improve your variable, focus on adopting the unique features that "
                   "contribute to the success of the better variables and eliminate the unique features "
                   "associated with the poorer variables. This approach will help enhance performance and avoid "
                   "repeating past mistakes."};
  } else {
    s.block = {InstructionBlock::Kind::Contrastive,
               "You can gain valuable insights by analyzing high-performing variables from historical data. On "
               "the training set, the top-performing variables are <Positive-VAR>" +
                   pos + "</Positive-VAR>."};
  }
  return s;
}

// ---------------------------------------------------------------------------
// Regularization

inline std::pair<InstructionBlock, InstructionBlock> tregu_blocks() {
  return {
      {InstructionBlock::Kind::RegularizeL2,
       "Please simplify the overly complex and lengthy sentences in the variable. Ensure the output is concise, "
       "easy to understand, and suitable for a general audience."},
      {InstructionBlock::Kind::RegularizeL1,
       "If you are certain that a particular sentence in the variable has no impact on the overall meaning or "
       "purpose or has a negative effect, please delete that sentence. However, if you believe that all "
       "sentences are useful and contribute to the overall meaning, then retain all sentences. Ensure that the "
       "final variable maintains clarity, coherence, and relevance."},
  };
}

}  // namespace dlpo
