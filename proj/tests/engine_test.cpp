#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "dlpo/engine.hpp"

namespace fs = std::filesystem;
using namespace dlpo;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "dlpo_engine_test";
  fs::create_directories(dir);
  const auto p = dir / name;
  fs::remove(p);
  return p;
}

EngineSpec spec_with(std::string model, double temperature) {
  EngineSpec s;
  s.model = std::move(model);
  s.temperature = temperature;
  return s;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += line.empty() ? 0 : 1;
  return n;
}

}  // namespace

TEST(RequestHash, StableAndSensitiveToEveryField) {
  const auto h = request_hash("sys", "user", "m", 0.0);
  EXPECT_EQ(h, request_hash("sys", "user", "m", 0.0));
  EXPECT_EQ(h.size(), 64u);
  EXPECT_NE(h, request_hash("sys2", "user", "m", 0.0));
  EXPECT_NE(h, request_hash("sys", "user2", "m", 0.0));
  EXPECT_NE(h, request_hash("sys", "user", "m2", 0.0));
  EXPECT_NE(h, request_hash("sys", "user", "m", 1.0));
  // Field boundaries matter: moving text between system and user changes the hash.
  EXPECT_NE(request_hash("ab", "c", "m", 0.0), request_hash("a", "bc", "m", 0.0));
}

TEST(CallbackEngineTest, ForwardsArguments) {
  CallbackEngine e(spec_with("m", 0.0), [](std::string_view s, std::string_view u) {
    return std::string(s) + "|" + std::string(u);
  });
  EXPECT_EQ(e.complete("a", ""), "a|");
}

TEST(Transcript, EmptySessionWritesHeaderOnly) {
  const auto path = temp_file("empty.jsonl");
  {
    auto inner = std::make_shared<CallbackEngine>(spec_with("m", 0.0), [](auto, auto) { return std::string("x"); });
    RecordingEngine rec(inner, path);
  }
  EXPECT_EQ(count_lines(path), 1u);
  const auto t = Transcript::load(path);
  EXPECT_TRUE(t.exchanges.empty());
}

TEST(Transcript, RecordThenReplayRoundTrip) {
  const auto path = temp_file("roundtrip.jsonl");
  auto inner = std::make_shared<CallbackEngine>(spec_with("fwd", 0.0), [](auto, std::string_view u) {
    return "reply to " + std::string(u);
  });
  {
    auto rec = record_wrap(inner, path);
    EXPECT_EQ(rec->complete("sys", "q1"), "reply to q1");
  }
  auto t = std::make_shared<const Transcript>(Transcript::load(path));
  ASSERT_EQ(t->exchanges.size(), 1u);
  EXPECT_EQ(t->exchanges[0].request_hash, request_hash("sys", "q1", "fwd", 0.0));
  ReplayEngine replay(spec_with("fwd", 0.0), t);
  EXPECT_EQ(replay.complete("sys", "q1"), "reply to q1");
}

TEST(Transcript, LinesCarryExactlyTheDocumentedFields) {
  const auto path = temp_file("fields.jsonl");
  auto inner = std::make_shared<CallbackEngine>(spec_with("fwd", 0.0), [](auto, auto) { return std::string("r"); });
  record_wrap(inner, path)->complete("s", "u");
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  std::getline(in, line);
  EXPECT_EQ(nlohmann::json::parse(header), transcript_header());
  const auto j = nlohmann::json::parse(line);
  std::vector<std::string> keys;
  for (const auto& [k, _] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"hash", "model", "response", "role", "system", "user"}));
}

TEST(ReplayEngineTest, TableLookup) {
  auto t = std::make_shared<Transcript>();
  t->exchanges.push_back({"s", "u", "42", EngineRole::Forward, "m", {}, request_hash("s", "u", "m", 0.0)});
  ReplayEngine e(spec_with("m", 0.0), t);
  EXPECT_EQ(e.complete("s", "u"), "42");
}

TEST(ReplayEngineTest, UnseenRequestIsAMiss) {
  auto t = std::make_shared<const Transcript>();
  ReplayEngine e(spec_with("m", 0.0), t);
  EXPECT_THROW(e.complete("s", "u"), ReplayMiss);
}

TEST(ReplayEngineTest, IdenticalRequestsServedFifoThenExhausted) {
  const auto path = temp_file("fifo.jsonl");
  int n = 0;
  auto inner = std::make_shared<CallbackEngine>(spec_with("b", 1.0), [&n](auto, auto) {
    return "sample " + std::to_string(++n);
  });
  {
    auto rec = record_wrap(inner, path);
    rec->complete("s", "same");
    rec->complete("s", "same");
  }
  ReplayEngine e(spec_with("b", 1.0), std::make_shared<const Transcript>(Transcript::load(path)));
  EXPECT_EQ(e.complete("s", "same"), "sample 1");
  EXPECT_EQ(e.complete("s", "same"), "sample 2");
  EXPECT_THROW(e.complete("s", "same"), ReplayMiss);
}

TEST(ReplayEngineTest, CursorStateRoundTrip) {
  auto t = std::make_shared<Transcript>();
  const auto h = request_hash("s", "u", "m", 0.0);
  t->exchanges.push_back({"s", "u", "first", EngineRole::Forward, "m", {}, h});
  t->exchanges.push_back({"s", "u", "second", EngineRole::Forward, "m", {}, h});
  ReplayEngine a(spec_with("m", 0.0), t);
  EXPECT_EQ(a.complete("s", "u"), "first");
  ReplayEngine b(spec_with("m", 0.0), t);
  b.load_state(a.save_state());
  EXPECT_EQ(b.complete("s", "u"), "second");
}

TEST(ReplayEngineTest, TemperatureIsPartOfTheKey) {
  auto t = std::make_shared<Transcript>();
  t->exchanges.push_back({"s", "u", "cold", EngineRole::Forward, "m", {}, request_hash("s", "u", "m", 0.0)});
  ReplayEngine hot(spec_with("m", 0.7), t);
  EXPECT_THROW(hot.complete("s", "u"), ReplayMiss);
}

TEST(Transcript, MalformedInputs) {
  const auto path = temp_file("bad.jsonl");
  {
    std::ofstream(path) << "{\"not\":\"a header\"}\n";
  }
  EXPECT_THROW(Transcript::load(path), ParseError);
  {
    std::ofstream(path) << transcript_header().dump() << "\n{\"role\":\"forward\"}\n";
  }
  try {
    Transcript::load(path);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  {
    std::ofstream out(path);
    out << transcript_header().dump() << "\n";
    for (const char* user : {"a", "b"}) {
      out << nlohmann::json{{"role", "forward"}, {"model", "m"}, {"system", "s"}, {"user", user}, {"response", "r"},
                            {"hash", "same"}}
                 .dump()
          << "\n";
    }
  }
  EXPECT_THROW(Transcript::load(path), ParseError);
}

TEST(RecordingEngineTest, ConcurrentCallsProduceWholeLines) {
  const auto path = temp_file("concurrent.jsonl");
  auto inner = std::make_shared<CallbackEngine>(spec_with("m", 0.0), [](auto, std::string_view u) {
    return std::string(u);
  });
  auto rec = record_wrap(inner, path);
  std::vector<std::jthread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 50; ++i) rec->complete("s", std::to_string(t) + "-" + std::to_string(i));
    });
  }
  threads.clear();
  const auto transcript = Transcript::load(path);
  EXPECT_EQ(transcript.exchanges.size(), 400u);
}
