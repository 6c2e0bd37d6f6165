#pragma once

// Prompts as ordered sentence sequences, plus the sentence-level diff that
// measures how many update units an optimizer step spent.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlpo/error.hpp"
#include "dlpo/hash.hpp"

namespace dlpo {

struct SentenceSpan {
  std::size_t index = 0;
  std::string content;
  std::size_t start = 0;  // byte offset into the prompt text
  std::size_t end = 0;    // one past the last byte

  friend bool operator==(const SentenceSpan&, const SentenceSpan&) = default;
};

namespace detail {

constexpr bool is_space(char c) noexcept {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}
constexpr bool is_digit(char c) noexcept { return c >= '0' && c <= '9'; }
constexpr bool is_terminal(char c) noexcept { return c == '.' || c == '!' || c == '?'; }
constexpr bool is_closer(char c) noexcept {
  return c == '"' || c == '\'' || c == ')' || c == ']';
}

// "1." / "12." at the head of a line is a list marker, not a sentence end.
inline bool is_enumerator(std::string_view head) {
  return !head.empty() && std::all_of(head.begin(), head.end(), is_digit);
}

}  // namespace detail

/// Collapses whitespace runs to one space and trims both ends.
inline std::string normalize_ws(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char c : s) {
    if (detail::is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

/// Splits text into sentences.
///
/// A sentence ends at a run of `.`, `!` or `?` (optionally followed by closing
/// quotes/brackets) that is followed by whitespace or end of text, and at every
/// newline. A period inside a number never ends a sentence, and neither does
/// the period of a leading list marker such as "2.". Spans exclude the
/// surrounding whitespace, so the text between consecutive spans is always
/// whitespace.
inline std::vector<SentenceSpan> segment(std::string_view text) {
  std::vector<SentenceSpan> spans;
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::size_t start = kNone;

  auto close = [&](std::size_t end) {
    if (start == kNone) return;
    while (end > start && detail::is_space(text[end - 1])) --end;
    if (end > start) {
      spans.push_back({spans.size(), std::string(text.substr(start, end - start)), start, end});
    }
    start = kNone;
  };

  const std::size_t n = text.size();
  for (std::size_t i = 0; i < n; ++i) {
    const char c = text[i];
    if (c == '\n') {
      close(i);
      continue;
    }
    if (start == kNone) {
      if (detail::is_space(c)) continue;
      start = i;
    }
    if (!detail::is_terminal(c)) continue;

    std::size_t j = i;
    while (j + 1 < n && detail::is_terminal(text[j + 1])) ++j;
    std::size_t k = j;
    while (k + 1 < n && detail::is_closer(text[k + 1])) ++k;
    const bool at_break = (k + 1 == n) || detail::is_space(text[k + 1]);
    const bool decimal = c == '.' && i > 0 && i + 1 < n && detail::is_digit(text[i - 1]) &&
                         detail::is_digit(text[i + 1]);
    const bool marker = c == '.' && j == i && k == i &&
                        detail::is_enumerator(text.substr(start, i - start));
    if (at_break && !decimal && !marker) {
      close(k + 1);
    }
    i = k;
  }
  close(n);
  return spans;
}

/// A prompt version: the parameter being optimized.
class Prompt {
 public:
  Prompt() : Prompt(std::string{}, 0, std::nullopt) {}

  static Prompt root(std::string text) { return Prompt(std::move(text), 0, std::nullopt); }

  /// Restores a prompt with explicit lineage (checkpoints, logs).
  static Prompt restore(std::string text, int step, std::optional<std::string> parent_id) {
    return Prompt(std::move(text), step, std::move(parent_id));
  }

  Prompt child(std::string text) const { return Prompt(std::move(text), step_ + 1, id_); }

  const std::string& id() const noexcept { return id_; }
  const std::string& text() const noexcept { return text_; }
  int step() const noexcept { return step_; }
  const std::optional<std::string>& parent_id() const noexcept { return parent_id_; }
  const std::vector<SentenceSpan>& sentences() const noexcept { return sentences_; }

  std::vector<std::string> sentence_texts() const {
    std::vector<std::string> out;
    out.reserve(sentences_.size());
    for (const auto& s : sentences_) out.push_back(s.content);
    return out;
  }

 private:
  Prompt(std::string text, int step, std::optional<std::string> parent_id)
      : text_(std::move(text)),
        step_(step),
        parent_id_(std::move(parent_id)),
        sentences_(segment(text_)) {
    id_ = "p" + std::to_string(step_) + "-" + sha256_hex(text_).substr(0, 12);
  }

  std::string id_;
  std::string text_;
  int step_ = 0;
  std::optional<std::string> parent_id_;
  std::vector<SentenceSpan> sentences_;
};

struct EditOp {
  enum class Kind { Add, Delete, Modify };

  Kind kind = Kind::Add;
  std::optional<std::size_t> old_index;
  std::optional<std::size_t> new_index;
  std::optional<std::string> old_content;
  std::optional<std::string> new_content;

  friend bool operator==(const EditOp&, const EditOp&) = default;
};

inline const char* to_string(EditOp::Kind k) {
  switch (k) {
    case EditOp::Kind::Add: return "add";
    case EditOp::Kind::Delete: return "delete";
    case EditOp::Kind::Modify: return "modify";
  }
  return "?";
}

struct PromptDiff {
  std::vector<EditOp> ops;
  std::size_t unit_count = 0;

  std::size_t count(EditOp::Kind k) const {
    return static_cast<std::size_t>(
        std::count_if(ops.begin(), ops.end(), [k](const EditOp& op) { return op.kind == k; }));
  }
};

/// Sentence-level diff of two sentence lists.
///
/// Sentences align by a longest common subsequence over whitespace-normalized
/// content. Between two aligned pairs, deleted and inserted sentences pair up
/// in order as Modify ops; the surplus becomes Delete or Add ops. A moved
/// sentence therefore costs one Delete plus one Add.
inline PromptDiff diff_sentences(std::span<const std::string> old_s,
                                 std::span<const std::string> new_s) {
  const std::size_t n = old_s.size();
  const std::size_t m = new_s.size();
  std::vector<std::string> a(n), b(m);
  for (std::size_t i = 0; i < n; ++i) a[i] = normalize_ws(old_s[i]);
  for (std::size_t j = 0; j < m; ++j) b[j] = normalize_ws(new_s[j]);

  // lcs[i][j] = LCS length of a[i..] and b[j..]
  std::vector<std::vector<std::size_t>> lcs(n + 1, std::vector<std::size_t>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = m; j-- > 0;) {
      lcs[i][j] = a[i] == b[j] ? lcs[i + 1][j + 1] + 1 : std::max(lcs[i + 1][j], lcs[i][j + 1]);
    }
  }

  PromptDiff out;
  std::vector<std::size_t> dels, ins;
  auto flush_gap = [&] {
    const std::size_t paired = std::min(dels.size(), ins.size());
    for (std::size_t k = 0; k < paired; ++k) {
      out.ops.push_back({EditOp::Kind::Modify, dels[k], ins[k], old_s[dels[k]], new_s[ins[k]]});
    }
    for (std::size_t k = paired; k < dels.size(); ++k) {
      out.ops.push_back({EditOp::Kind::Delete, dels[k], std::nullopt, old_s[dels[k]], std::nullopt});
    }
    for (std::size_t k = paired; k < ins.size(); ++k) {
      out.ops.push_back({EditOp::Kind::Add, std::nullopt, ins[k], std::nullopt, new_s[ins[k]]});
    }
    dels.clear();
    ins.clear();
  };

  std::size_t i = 0, j = 0;
  while (i < n || j < m) {
    if (i < n && j < m && a[i] == b[j]) {
      flush_gap();
      ++i;
      ++j;
    } else if (j == m || (i < n && lcs[i + 1][j] >= lcs[i][j + 1])) {
      dels.push_back(i++);
    } else {
      ins.push_back(j++);
    }
  }
  flush_gap();
  out.unit_count = out.ops.size();
  return out;
}

inline PromptDiff diff(const Prompt& old_prompt, const Prompt& new_prompt) {
  const auto a = old_prompt.sentence_texts();
  const auto b = new_prompt.sentence_texts();
  return diff_sentences(a, b);
}

/// Rebuilds the new sentence list from the old one and a diff. Sentences not
/// touched by any op keep their old content.
inline std::vector<std::string> apply_diff(std::span<const std::string> old_s, const PromptDiff& d) {
  std::vector<bool> consumed(old_s.size(), false);
  std::size_t new_size = old_s.size();
  for (const auto& op : d.ops) {
    if (op.kind == EditOp::Kind::Add) ++new_size;
    if (op.kind == EditOp::Kind::Delete) --new_size;
  }
  std::vector<std::optional<std::string>> slots(new_size);
  for (const auto& op : d.ops) {
    if (op.old_index) consumed.at(*op.old_index) = true;
    if (op.new_index) slots.at(*op.new_index) = op.new_content;
  }
  std::size_t next_old = 0;
  std::vector<std::string> out;
  out.reserve(new_size);
  for (auto& slot : slots) {
    if (slot) {
      out.push_back(std::move(*slot));
      continue;
    }
    while (next_old < old_s.size() && consumed[next_old]) ++next_old;
    out.push_back(old_s[next_old++]);
  }
  return out;
}

/// Merges the optimizer's updated text with the sentences frozen by dropout.
///
/// Every preserved sentence must appear in `updated_text`, in its original
/// relative order (whitespace-insensitive); it is written back verbatim.
/// Throws PreservedSentenceLost naming the first missing sentence. An empty
/// update means no edits and yields the parent text.
inline Prompt merge(const Prompt& parent, std::span<const SentenceSpan> preserved,
                    std::string_view updated_text) {
  const auto candidate = segment(updated_text);
  if (candidate.empty()) return parent.child(parent.text());
  std::vector<std::pair<const SentenceSpan*, const SentenceSpan*>> matches;  // (candidate, preserved)
  std::size_t j = 0;
  for (const auto& keep : preserved) {
    const std::string want = normalize_ws(keep.content);
    while (j < candidate.size() && normalize_ws(candidate[j].content) != want) ++j;
    if (j == candidate.size()) throw PreservedSentenceLost(keep.content);
    matches.emplace_back(&candidate[j], &keep);
    ++j;
  }
  std::string text(updated_text);
  for (auto it = matches.rbegin(); it != matches.rend(); ++it) {
    const auto& [cand, keep] = *it;
    text.replace(cand->start, cand->end - cand->start, keep->content);
  }
  return parent.child(std::move(text));
}

}  // namespace dlpo
