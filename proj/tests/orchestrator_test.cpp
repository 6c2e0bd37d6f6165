#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <regex>

#include "dlpo/checkpoint.hpp"
#include "dlpo/orchestrator.hpp"
#include "dlpo/runlog.hpp"

using namespace dlpo;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = DLPO_CONFIGS;

fs::path scratch() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  const auto dir = fs::temp_directory_path() / "dlpo_orch" / (std::string(info->test_suite_name()) + "." + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig base_config(const fs::path& out) {
  auto c = load_config(kConfigs / "synthetic.json");
  c.out_dir = out;
  c.energy_subset_size = 12;
  return c;
}

RunOptions quiet() {
  RunOptions o;
  o.timestamps = false;
  return o;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class CountingEngine : public Engine {
 public:
  explicit CountingEngine(EnginePtr inner) : inner_(std::move(inner)) {}
  std::string complete(std::string_view system, std::string_view user) override {
    ++calls;
    return inner_->complete(system, user);
  }
  const EngineSpec& spec() const override { return inner_->spec(); }
  std::atomic<std::size_t> calls{0};

 private:
  EnginePtr inner_;
};

// Compact per-step event grammar: one letter per event.
std::map<int, std::string> step_shapes(const std::vector<nlohmann::json>& events) {
  static const std::map<std::string, std::string> letter = {
      {"StepStarted", "S"},      {"ForwardBatch", "F"}, {"LossComputed", "L"}, {"GradientProduced", "G"},
      {"CandidateProduced", "C"}, {"TlrMeasured", "T"},  {"TsaDecision", "D"},  {"Checkpointed", "K"},
      {"RunFinished", "R"}};
  std::map<int, std::string> out;
  for (const auto& e : events) {
    const std::string name = e.at("event");
    std::string tok = name == "Evaluated" ? (e.at("split") == "val" ? "V" : "E") : letter.at(name);
    auto& s = out[e.at("step").get<int>()];
    if (!s.empty()) s += ' ';
    s += tok;
  }
  return out;
}

}  // namespace

TEST(Orchestrator, RunsToCompletionAndWritesArtifacts) {
  const auto dir = scratch();
  const auto cfg = base_config(dir);
  const auto r = run(cfg, make_synthetic_engines(cfg), quiet());
  EXPECT_TRUE(r.finished);
  EXPECT_EQ(r.steps, 12);
  EXPECT_EQ(r.total_steps, 12);
  EXPECT_TRUE(fs::exists(dir / "runlog.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "eval.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint.json"));
  EXPECT_EQ(read_all(dir / "final_prompt.txt"), r.final_prompt.text() + "\n");
  EXPECT_EQ(r.val_history.size(), 13u);
  const auto events = read_jsonl(r.log_path);
  EXPECT_EQ(events.back().at("event"), "RunFinished");
  EXPECT_EQ(events.front().at("config_hash"), config_hash(cfg));
}

TEST(Orchestrator, SameSeedSameLog) {
  const auto dir = scratch();
  auto cfg = base_config(dir / "a");
  run(cfg, make_synthetic_engines(cfg), quiet());
  cfg.out_dir = dir / "b";
  run(cfg, make_synthetic_engines(cfg), quiet());
  EXPECT_EQ(read_all(dir / "a" / "runlog.jsonl"), read_all(dir / "b" / "runlog.jsonl"));
  EXPECT_EQ(read_all(dir / "a" / "eval.jsonl"), read_all(dir / "b" / "eval.jsonl"));
}

TEST(Orchestrator, TimestampsAreTheOnlyDifference) {
  const auto dir = scratch();
  auto cfg = base_config(dir / "a");
  run(cfg, make_synthetic_engines(cfg));
  cfg.out_dir = dir / "b";
  run(cfg, make_synthetic_engines(cfg), quiet());
  const auto a = read_jsonl(dir / "a" / "runlog.jsonl");
  EXPECT_TRUE(a.front().contains("ts"));
  EXPECT_EQ(strip_timestamps(a), strip_timestamps(read_jsonl(dir / "b" / "runlog.jsonl")));
}

TEST(Orchestrator, ResumeMatchesUninterruptedRun) {
  const auto dir = scratch();
  auto cfg = base_config(dir / "full");
  cfg.flags.tdo = true;
  cfg.flags.tmnt = true;
  cfg.synthetic->noise_sigma = 0.05;
  cfg.synthetic->edit_damage = 0.3;
  run(cfg, make_synthetic_engines(cfg));

  cfg.out_dir = dir / "split";
  auto opts = quiet();
  opts.stop_after_step = 5;
  const auto partial = run(cfg, make_synthetic_engines(cfg), opts);
  EXPECT_FALSE(partial.finished);
  EXPECT_EQ(partial.steps, 5);
  const auto resumed = resume(cfg, make_synthetic_engines(cfg), dir / "split" / "checkpoint.json", quiet());
  EXPECT_TRUE(resumed.finished);

  EXPECT_EQ(strip_timestamps(read_jsonl(dir / "full" / "runlog.jsonl")),
            strip_timestamps(read_jsonl(dir / "split" / "runlog.jsonl")));
  EXPECT_EQ(read_all(dir / "full" / "eval.jsonl"), read_all(dir / "split" / "eval.jsonl"));
  EXPECT_EQ(read_all(dir / "full" / "final_prompt.txt"), read_all(dir / "split" / "final_prompt.txt"));
}

TEST(Orchestrator, ResumeAfterCrashDropsUncheckpointedLines) {
  const auto dir = scratch();
  auto cfg = base_config(dir / "full");
  run(cfg, make_synthetic_engines(cfg), quiet());
  cfg.out_dir = dir / "split";
  auto opts = quiet();
  opts.stop_after_step = 4;
  run(cfg, make_synthetic_engines(cfg), opts);
  std::ofstream(dir / "split" / "runlog.jsonl", std::ios::app) << R"({"event":"StepStarted","step":5})" << '\n';
  resume(cfg, make_synthetic_engines(cfg), dir / "split" / "checkpoint.json", quiet());
  EXPECT_EQ(read_all(dir / "full" / "runlog.jsonl"), read_all(dir / "split" / "runlog.jsonl"));
}

TEST(Orchestrator, ResumeRejectsChangedConfig) {
  const auto dir = scratch();
  auto cfg = base_config(dir);
  auto opts = quiet();
  opts.stop_after_step = 5;
  run(cfg, make_synthetic_engines(cfg), opts);
  cfg.batch_size = 4;
  EXPECT_THROW(resume(cfg, make_synthetic_engines(cfg), dir / "checkpoint.json"), ConfigDrift);
  cfg.batch_size = 3;
  cfg.workers = 4;  // not part of the hash
  EXPECT_NO_THROW(resume(cfg, make_synthetic_engines(cfg), dir / "checkpoint.json"));
}

TEST(Orchestrator, ResumeRejectsCorruptCheckpoint) {
  const auto dir = scratch();
  auto cfg = base_config(dir);
  auto opts = quiet();
  opts.stop_after_step = 3;
  run(cfg, make_synthetic_engines(cfg), opts);
  const auto path = dir / "checkpoint.json";
  auto doc = nlohmann::json::parse(read_all(path));
  doc["payload"]["step"] = 7;
  std::ofstream(path, std::ios::trunc) << doc.dump();
  EXPECT_THROW(resume(cfg, make_synthetic_engines(cfg), path), ChecksumMismatch);
  std::ofstream(path, std::ios::trunc) << "{\"format\":";
  EXPECT_THROW(resume(cfg, make_synthetic_engines(cfg), path), ChecksumMismatch);
}

TEST(Orchestrator, CallAccountingWithoutAnnealing) {
  for (int batch : {3, 6, 9}) {
    const auto dir = scratch() / std::to_string(batch);
    auto cfg = base_config(dir);
    cfg.batch_size = batch;
    cfg.flags.tsa = false;
    cfg.flags.tcl = false;
    auto engines = make_synthetic_engines(cfg);
    auto fwd = std::make_shared<CountingEngine>(engines.forward);
    auto bwd = std::make_shared<CountingEngine>(engines.backward);
    const auto r = run(cfg, {fwd, bwd}, quiet());
    const int steps = 36 / batch;
    EXPECT_EQ(r.steps, steps);
    EXPECT_EQ(r.counters.forward_loss, 36u);
    EXPECT_EQ(r.counters.forward_energy, 0u);
    EXPECT_EQ(r.counters.forward_val, 20u * static_cast<std::size_t>(steps + 1));
    EXPECT_EQ(fwd->calls.load(), r.counters.forward_loss + r.counters.forward_val);
    EXPECT_EQ(r.counters.backward, static_cast<std::size_t>(steps));
    EXPECT_EQ(bwd->calls.load(), r.counters.backward + r.counters.optimizer);
  }
}

TEST(Orchestrator, CallAccountingWithAnnealing) {
  const auto dir = scratch();
  auto cfg = base_config(dir);
  cfg.valset_path.clear();
  auto engines = make_synthetic_engines(cfg);
  auto fwd = std::make_shared<CountingEngine>(engines.forward);
  const auto r = run(cfg, {fwd, engines.backward}, quiet());
  const auto events = read_jsonl(r.log_path);
  const auto decisions = std::count_if(events.begin(), events.end(),
                                       [](const auto& e) { return e.at("event") == "TsaDecision"; });
  EXPECT_EQ(r.counters.forward_energy, 12u * static_cast<std::size_t>(decisions + 1));
  EXPECT_EQ(fwd->calls.load(), 36u + r.counters.forward_energy);
  EXPECT_EQ(r.counters.forward_val, 0u);
}

TEST(Orchestrator, StepGrammar) {
  const auto dir = scratch();
  auto cfg = base_config(dir);
  cfg.flags.tdo = true;
  cfg.flags.tmnt = true;
  cfg.synthetic->edit_damage = 0.3;
  const auto r = run(cfg, make_synthetic_engines(cfg), quiet());
  const auto shapes = step_shapes(read_jsonl(r.log_path));
  ASSERT_EQ(shapes.size(), 13u);
  EXPECT_TRUE(std::regex_match(shapes.at(0), std::regex("S E V K"))) << shapes.at(0);
  const std::regex step("S F L G C T( C T)? E D V K( R)?");
  for (int t = 1; t <= 12; ++t) EXPECT_TRUE(std::regex_match(shapes.at(t), step)) << t << ": " << shapes.at(t);
  EXPECT_EQ(shapes.at(12).back(), 'R');
}

TEST(Orchestrator, RejectedCandidatesStayInHistory) {
  const auto dir = scratch();
  auto cfg = base_config(dir);
  cfg.synthetic->edit_damage = 0.5;
  const auto r = run(cfg, make_synthetic_engines(cfg), quiet());
  std::size_t decisions = 0, rejected = 0;
  for (const auto& e : read_jsonl(r.log_path)) {
    if (e.at("event") != "TsaDecision") continue;
    const auto idx = e.at("history_index").get<std::size_t>();
    ASSERT_LT(idx, r.history.size());
    EXPECT_EQ(r.history[idx].prompt.id(), e.at("candidate_id"));
    EXPECT_EQ(r.history[idx].accepted, e.at("accepted").get<bool>());
    ++decisions;
    rejected += e.at("accepted").get<bool>() ? 0 : 1;
  }
  EXPECT_EQ(decisions, r.history.size());
  EXPECT_GT(rejected, 0u);
}

TEST(Orchestrator, RecordedRunReplaysIdentically) {
  const auto dir = scratch();
  auto cfg = base_config(dir / "live");
  cfg.synthetic->edit_damage = 0.3;
  const auto transcript = dir / "transcript.jsonl";
  auto live = make_synthetic_engines(cfg);
  run(cfg, {record_wrap(live.forward, transcript), record_wrap(live.backward, transcript)}, quiet());

  cfg.out_dir = dir / "replay";
  auto t = std::make_shared<const Transcript>(Transcript::load(transcript));
  run(cfg, {std::make_shared<ReplayEngine>(cfg.forward.spec, t), std::make_shared<ReplayEngine>(cfg.backward.spec, t)},
      quiet());
  EXPECT_EQ(read_all(dir / "live" / "runlog.jsonl"), read_all(dir / "replay" / "runlog.jsonl"));
}

TEST(Orchestrator, ReplayMissAbortsRun) {
  const auto dir = scratch();
  auto cfg = base_config(dir);
  std::ofstream(dir / "t.jsonl") << transcript_header().dump() << '\n';
  auto t = std::make_shared<const Transcript>(Transcript::load(dir / "t.jsonl"));
  EXPECT_THROW(
      run(cfg, {std::make_shared<ReplayEngine>(cfg.forward.spec, t), std::make_shared<ReplayEngine>(cfg.backward.spec, t)},
          quiet()),
      ReplayMiss);
}

TEST(Orchestrator, EngineFailureAbortsAndKeepsLastCheckpoint) {
  const auto dir = scratch();
  auto cfg = base_config(dir);
  cfg.valset_path.clear();
  auto engines = make_synthetic_engines(cfg);
  auto calls = std::make_shared<int>(0);
  auto inner = engines.backward;
  auto flaky = std::make_shared<CallbackEngine>(inner->spec(), [=](std::string_view s, std::string_view u) {
    if (++*calls > 6) throw EngineUnavailable("backward engine down");
    return inner->complete(s, u);
  });
  EXPECT_THROW(run(cfg, {engines.forward, flaky}, quiet()), EngineUnavailable);
  const auto payload = read_checkpoint(dir / "checkpoint.json", config_hash(cfg));
  EXPECT_EQ(payload.at("step"), 3);  // two backward calls per step
}

TEST(Orchestrator, HardRejectRetriesOnceWithRestatement) {
  const auto dir = scratch();
  auto cfg = base_config(dir);
  cfg.tlrd.reset();
  cfg.flags.tlr = true;
  cfg.tlr_r = 1;
  cfg.tlr_mode = TlrMode::HardReject;
  cfg.valset_path.clear();
  auto engines = make_synthetic_engines(cfg);
  auto inner = engines.backward;
  std::vector<std::string> optimizer_requests;
  auto greedy = std::make_shared<CallbackEngine>(inner->spec(), [&](std::string_view s, std::string_view u) {
    if (s != kOptimizerSystem) return inner->complete(s, u);
    optimizer_requests.emplace_back(u);
    // The first request of each step ignores the learning rate.
    if (u.find("previous answer made") == std::string_view::npos) {
      return std::string(kImprovedOpen) + "One. Two. Three." + std::string(kImprovedClose);
    }
    return inner->complete(s, u);
  });
  const auto r = run(cfg, {engines.forward, greedy}, quiet());
  std::size_t first = 0, retries = 0;
  for (const auto& e : read_jsonl(r.log_path)) {
    if (e.at("event") == "CandidateProduced") (e.at("retry").get<bool>() ? retries : first) += 1;
    if (e.at("event") == "TlrMeasured" && !e.at("accepted").get<bool>()) {
      EXPECT_EQ(e.at("r"), 1);
    }
  }
  EXPECT_EQ(first, 12u);
  EXPECT_EQ(retries, 12u);
  EXPECT_EQ(optimizer_requests.size(), 24u);
  EXPECT_NE(optimizer_requests[1].find("changes, but the learning rate is 1"), std::string::npos);
  for (const auto& h : r.history) EXPECT_LE(h.prompt.sentences().size(), static_cast<std::size_t>(h.step));
}

TEST(Orchestrator, DefaultInitialPromptWhenAbsent) {
  const auto dir = scratch();
  auto cfg = base_config(dir);
  cfg.initial_prompt.reset();
  auto opts = quiet();
  opts.stop_after_step = 1;
  run(cfg, make_synthetic_engines(cfg), opts);
  EXPECT_EQ(read_jsonl(dir / "runlog.jsonl").front().at("text"), std::string(kDefaultInitialPrompt));
}
