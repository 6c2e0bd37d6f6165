#include <gtest/gtest.h>

#include <algorithm>
#include <string>
#include <vector>

#include "dlpo/prompt.hpp"
#include "dlpo/rng.hpp"

using dlpo::EditOp;
using dlpo::Prompt;

namespace {

std::vector<std::string> contents(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& s : dlpo::segment(text)) out.push_back(s.content);
  return out;
}

const std::vector<std::string> kWords = {"alpha", "beta", "gamma", "delta", "solve", "check", "the", "answer",
                                         "3.5",   "units", "carefully", "(see", "note)", "\"quoted\""};

std::string random_sentence(dlpo::Rng& rng) {
  std::string s;
  const auto len = 1 + rng.below(6);
  for (std::uint64_t i = 0; i < len; ++i) {
    if (i) s += ' ';
    s += kWords[rng.below(kWords.size())];
  }
  static const char* enders[] = {".", "!", "?", "...", ".\"", ")."};
  return s + enders[rng.below(6)];
}

std::string random_text(dlpo::Rng& rng, std::size_t sentences) {
  std::string t;
  static const char* seps[] = {" ", "  ", "\n", "\n\n", " \t"};
  for (std::size_t i = 0; i < sentences; ++i) {
    if (i) t += seps[rng.below(5)];
    t += random_sentence(rng);
  }
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// segment

TEST(Segment, TwoTerminalDelimiters) { EXPECT_EQ(contents("A. B!"), (std::vector<std::string>{"A.", "B!"})); }

TEST(Segment, DecimalGuard) { EXPECT_EQ(contents("Pay 3.5 now."), (std::vector<std::string>{"Pay 3.5 now."})); }

TEST(Segment, Empty) {
  EXPECT_TRUE(dlpo::segment("").empty());
  EXPECT_TRUE(dlpo::segment("  \n\t ").empty());
}

TEST(Segment, NewlinesEndSentences) {
  EXPECT_EQ(contents("Output Format:\n- Process:\n- Final Result:"),
            (std::vector<std::string>{"Output Format:", "- Process:", "- Final Result:"}));
}

TEST(Segment, ListMarkerIsNotABoundary) {
  EXPECT_EQ(contents("1. Identify problem type\n12. Done."),
            (std::vector<std::string>{"1. Identify problem type", "12. Done."}));
}

TEST(Segment, ClosersStayWithTheirSentence) {
  EXPECT_EQ(contents("He said \"stop.\" Then (quietly.) left?!"),
            (std::vector<std::string>{"He said \"stop.\"", "Then (quietly.)", "left?!"}));
}

TEST(Segment, NoBoundaryWithoutFollowingSpace) {
  EXPECT_EQ(contents("See example.com for details."), (std::vector<std::string>{"See example.com for details."}));
}

TEST(Segment, IndicesAndOffsets) {
  const std::string text = "  One.  Two?\nThree";
  const auto spans = dlpo::segment(text);
  ASSERT_EQ(spans.size(), 3u);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    EXPECT_EQ(spans[i].index, i);
    EXPECT_EQ(text.substr(spans[i].start, spans[i].end - spans[i].start), spans[i].content);
  }
}

// Spans plus the separators between them reproduce the text, and every
// separator is whitespace.
TEST(Segment, RoundTripProperty) {
  dlpo::Rng rng(17);
  for (int trial = 0; trial < 2000; ++trial) {
    std::string text = random_text(rng, rng.below(8));
    if (rng.below(3) == 0) text = "  " + text + "\n";
    if (rng.below(4) == 0) text += " \xc3\xa9t\xc3\xa9 \xe2\x9c\x93.";  // UTF-8 bytes pass through
    const auto spans = dlpo::segment(text);
    std::string rebuilt;
    std::size_t pos = 0;
    for (const auto& s : spans) {
      const std::string gap = text.substr(pos, s.start - pos);
      ASSERT_TRUE(std::all_of(gap.begin(), gap.end(), [](char c) { return dlpo::detail::is_space(c); }))
          << "non-space separator in: " << text;
      rebuilt += gap + s.content;
      pos = s.end;
    }
    const std::string tail = text.substr(pos);
    ASSERT_TRUE(std::all_of(tail.begin(), tail.end(), [](char c) { return dlpo::detail::is_space(c); }));
    rebuilt += tail;
    ASSERT_EQ(rebuilt, text);
  }
}

TEST(NormalizeWs, CollapsesAndTrims) { EXPECT_EQ(dlpo::normalize_ws("  a \t\n b  "), "a b"); }

// ---------------------------------------------------------------------------
// Prompt

TEST(PromptTest, LineageAndIds) {
  const auto root = Prompt::root("Solve it. Check it.");
  EXPECT_EQ(root.step(), 0);
  EXPECT_FALSE(root.parent_id());
  EXPECT_EQ(root.sentences().size(), 2u);
  const auto kid = root.child("Solve it.");
  EXPECT_EQ(kid.step(), 1);
  EXPECT_EQ(kid.parent_id(), root.id());
  EXPECT_NE(kid.id(), root.id());
  EXPECT_EQ(Prompt::root("Solve it. Check it.").id(), root.id());
}

// ---------------------------------------------------------------------------
// diff

TEST(Diff, WorkedLearningRateExampleCountsFourUnits) {
  const auto before = Prompt::root(
      "As a Math Calculator, please solve:\nRequired Steps:\n1. Identify problem type\n2. Show calculation steps\n"
      "Output Format:\n- Process:\n- Final Result:\n- Verification:");
  const auto after = before.child(
      "As a reasoning Engine, please solve:\nRequired Steps:\n1. Identify problem type\n2. Show calculation steps\n"
      "3. Analyze complexity\n4. Assess stability\nOutput Format:\n- Process:\n- Final Result:");
  const auto d = dlpo::diff(before, after);
  EXPECT_EQ(d.unit_count, 4u);
  EXPECT_EQ(d.count(EditOp::Kind::Modify), 1u);
  EXPECT_EQ(d.count(EditOp::Kind::Add), 2u);
  EXPECT_EQ(d.count(EditOp::Kind::Delete), 1u);
  EXPECT_EQ(d.ops.front().old_content, "As a Math Calculator, please solve:");
  EXPECT_EQ(d.ops.back().old_content, "- Verification:");
}

TEST(Diff, IdentityIsZero) {
  const auto p = Prompt::root("A. B. C.");
  EXPECT_EQ(dlpo::diff(p, p).unit_count, 0u);
}

TEST(Diff, PureInsertion) {
  const std::vector<std::string> a, b = {"x.", "y."};
  const auto d = dlpo::diff_sentences(a, b);
  EXPECT_EQ(d.unit_count, 2u);
  EXPECT_EQ(d.count(EditOp::Kind::Add), 2u);
}

TEST(Diff, WhitespaceInsensitive) {
  const std::vector<std::string> a = {"Solve  the\tproblem."}, b = {"Solve the problem."};
  EXPECT_EQ(dlpo::diff_sentences(a, b).unit_count, 0u);
}

TEST(Diff, ReorderCostsDeletePlusAdd) {
  const std::vector<std::string> a = {"A.", "B."}, b = {"B.", "A."};
  const auto d = dlpo::diff_sentences(a, b);
  EXPECT_EQ(d.unit_count, 2u);
  EXPECT_EQ(d.count(EditOp::Kind::Delete), 1u);
  EXPECT_EQ(d.count(EditOp::Kind::Add), 1u);
}

namespace {

// Oracle: plain O(nm) LCS length.
std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
    }
  }
  return t[a.size()][b.size()];
}

std::vector<std::string> random_sentences(dlpo::Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("s" + std::to_string(rng.below(vocab)) + ".");
  return out;
}

}  // namespace

TEST(Diff, IdentityOnRandomPrompts) {
  dlpo::Rng rng(23);
  for (int i = 0; i < 1000; ++i) {
    const auto p = Prompt::root(random_text(rng, rng.below(15)));
    ASSERT_EQ(dlpo::diff(p, p).unit_count, 0u);
  }
}

TEST(Diff, ApplyReconstructsAndCountsAreBounded) {
  dlpo::Rng rng(29);
  for (int trial = 0; trial < 3000; ++trial) {
    const auto a = random_sentences(rng, rng.below(10), 6);
    const auto b = random_sentences(rng, rng.below(10), 6);
    const auto d = dlpo::diff_sentences(a, b);
    ASSERT_EQ(d.unit_count, d.ops.size());
    ASSERT_EQ(dlpo::apply_diff(a, d), b);
    const std::size_t l = lcs_length(a, b);
    ASSERT_EQ(d.count(EditOp::Kind::Modify) + d.count(EditOp::Kind::Delete), a.size() - l);
    ASSERT_EQ(d.count(EditOp::Kind::Modify) + d.count(EditOp::Kind::Add), b.size() - l);
    ASSERT_GE(d.unit_count, std::max(a.size(), b.size()) - l);
    ASSERT_LE(d.unit_count, a.size() + b.size() - 2 * l);
  }
}

TEST(Diff, PureInsertDeleteIsSymmetric) {
  dlpo::Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::string> a;
    for (std::size_t i = 0; i < rng.below(8); ++i) a.push_back("base" + std::to_string(i) + ".");
    auto b = a;
    const auto inserts = rng.below(5);
    for (std::uint64_t k = 0; k < inserts; ++k) {
      b.insert(b.begin() + static_cast<std::ptrdiff_t>(rng.below(b.size() + 1)), "new" + std::to_string(k) + ".");
    }
    const auto fwd = dlpo::diff_sentences(a, b);
    const auto back = dlpo::diff_sentences(b, a);
    ASSERT_EQ(fwd.unit_count, inserts);
    ASSERT_EQ(back.unit_count, inserts);
    ASSERT_EQ(fwd.count(EditOp::Kind::Add), inserts);
    ASSERT_EQ(back.count(EditOp::Kind::Delete), inserts);
  }
}

// ---------------------------------------------------------------------------
// merge

TEST(Merge, PreservedSentenceWrittenBackVerbatimInOrder) {
  const auto parent = Prompt::root("First line. Keep  this   one. Last line.");
  const std::vector<dlpo::SentenceSpan> keep = {parent.sentences()[1]};
  const auto merged = dlpo::merge(parent, keep, "New first. Keep this one. New last.");
  EXPECT_EQ(merged.sentence_texts(), (std::vector<std::string>{"New first.", "Keep  this   one.", "New last."}));
  EXPECT_EQ(merged.step(), 1);
  EXPECT_EQ(merged.parent_id(), parent.id());
}

TEST(Merge, AllPreservedAndEmptyUpdateKeepsParent) {
  const auto parent = Prompt::root("A. B. C.");
  const auto merged = dlpo::merge(parent, parent.sentences(), "");
  EXPECT_EQ(merged.text(), parent.text());
}

TEST(Merge, MissingPreservedSentenceThrows) {
  const auto parent = Prompt::root("Keep me. Other.");
  const std::vector<dlpo::SentenceSpan> keep = {parent.sentences()[0]};
  try {
    dlpo::merge(parent, keep, "Other. Something else.");
    FAIL() << "expected PreservedSentenceLost";
  } catch (const dlpo::PreservedSentenceLost& e) {
    EXPECT_EQ(e.sentence(), "Keep me.");
  }
}

TEST(Merge, OrderViolationThrows) {
  const auto parent = Prompt::root("One. Two. Three.");
  const std::vector<dlpo::SentenceSpan> keep = {parent.sentences()[0], parent.sentences()[2]};
  EXPECT_THROW(dlpo::merge(parent, keep, "Three. Extra. One."), dlpo::PreservedSentenceLost);
}
