#pragma once

// Drives an optimization run: batching, the technique hooks around each
// textual-gradient step, evaluation, logging and checkpoint/resume.
//
// Per-step RNG draw order (fixed, so runs replay exactly): epoch shuffle when
// an epoch starts, dropout selection, contrastive sampling, annealing draw.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dlpo/checkpoint.hpp"
#include "dlpo/config.hpp"
#include "dlpo/engine.hpp"
#include "dlpo/eval.hpp"
#include "dlpo/prompt.hpp"
#include "dlpo/rng.hpp"
#include "dlpo/runlog.hpp"
#include "dlpo/synthetic.hpp"
#include "dlpo/techniques.hpp"
#include "dlpo/tgd.hpp"

namespace dlpo {

inline constexpr std::string_view kDefaultInitialPrompt =
    "You will answer a reasoning question. Think step by step. The last line of your response should be of the "
    "form 'Answer: $VALUE' where VALUE is a numerical value.";

struct Engines {
  EnginePtr forward;
  EnginePtr backward;
};

/// Logical engine calls by purpose (per-example forward calls, one per
/// backward or optimizer request).
struct RunCounters {
  std::size_t forward_loss = 0;
  std::size_t forward_energy = 0;
  std::size_t forward_val = 0;
  std::size_t backward = 0;
  std::size_t optimizer = 0;
};

inline nlohmann::json to_json(const RunCounters& c) {
  return {{"forward_loss", c.forward_loss},
          {"forward_energy", c.forward_energy},
          {"forward_val", c.forward_val},
          {"backward", c.backward},
          {"optimizer", c.optimizer}};
}

inline RunCounters counters_from_json(const nlohmann::json& j) {
  return {j.at("forward_loss").get<std::size_t>(), j.at("forward_energy").get<std::size_t>(),
          j.at("forward_val").get<std::size_t>(), j.at("backward").get<std::size_t>(),
          j.at("optimizer").get<std::size_t>()};
}

struct RunOptions {
  std::optional<int> stop_after_step;  // return early (unfinished) after this step's checkpoint
  bool timestamps = true;              // add `ts` to log lines
};

struct RunResult {
  Prompt final_prompt;
  int steps = 0;
  int total_steps = 0;
  bool finished = false;
  std::optional<double> incumbent_energy;
  std::vector<HistoryEntry> history;
  std::vector<std::pair<int, double>> val_history;
  RunCounters counters;
  std::filesystem::path log_path;
  std::filesystem::path eval_path;
  std::filesystem::path checkpoint_path;
};

namespace detail {

inline nlohmann::json prompt_json(const Prompt& p) {
  return {{"text", p.text()},
          {"step", p.step()},
          {"parent_id", p.parent_id() ? nlohmann::json(*p.parent_id()) : nlohmann::json(nullptr)}};
}

inline Prompt prompt_from_json(const nlohmann::json& j) {
  std::optional<std::string> parent;
  if (!j.at("parent_id").is_null()) parent = j.at("parent_id").get<std::string>();
  return Prompt::restore(j.at("text").get<std::string>(), j.at("step").get<int>(), std::move(parent));
}

inline std::vector<std::string> ids_of(std::span<const Example> xs) {
  std::vector<std::string> ids;
  ids.reserve(xs.size());
  for (const auto& x : xs) ids.push_back(x.id);
  return ids;
}

}  // namespace detail

class Orchestrator {
 public:
  Orchestrator(RunConfig config, Engines engines, RunOptions options = {})
      : cfg_(std::move(config)), engines_(std::move(engines)), opts_(options) {
    validate(cfg_);
    if (!engines_.forward || !engines_.backward) throw Error("both engines are required");
    hash_ = config_hash(cfg_);
    train_all_ = load_dataset(cfg_.trainset_path, "train");
    if (train_all_.empty()) throw Error("training set is empty");
    if (!cfg_.valset_path.empty()) val_ = load_dataset(cfg_.valset_path, "val");
    std::filesystem::create_directories(cfg_.out_dir);
  }

  std::filesystem::path log_path() const { return cfg_.out_dir / "runlog.jsonl"; }
  std::filesystem::path eval_path() const { return cfg_.out_dir / "eval.jsonl"; }
  std::filesystem::path checkpoint_path() const { return cfg_.out_dir / "checkpoint.json"; }
  const std::string& config_hash_value() const noexcept { return hash_; }

  /// Fresh run. Existing logs in out_dir are replaced.
  RunResult run() {
    std::filesystem::remove(log_path());
    std::filesystem::remove(eval_path());
    log_ = RunLog(log_path(), 0, opts_.timestamps);
    evals_ = JsonlWriter(eval_path(), 0);
    rng_.reseed(cfg_.seed);

    const auto n = std::min<std::size_t>(static_cast<std::size_t>(cfg_.trainset_size), train_all_.size());
    train_ = n == train_all_.size() ? train_all_.examples : train_all_.sample(n, rng_);
    const auto picks = sample_indices(train_.size(), std::min<std::size_t>(cfg_.energy_subset_size, train_.size()), rng_);
    for (std::size_t i : picks) energy_.push_back(train_[i]);

    prompt_ = Prompt::root(cfg_.initial_prompt.value_or(std::string(kDefaultInitialPrompt)));
    annealer_ = AnnealerState::start(cfg_.tsa_t0, cfg_.tsa_alpha);
    if (cfg_.tlrd) schedule_.current_r = *cfg_.tlrd;
    step_ = 0;

    log_.emit(event::kStepStarted, 0,
              {{"prompt_id", prompt_.id()},
               {"text", prompt_.text()},
               {"train_ids", detail::ids_of(train_)},
               {"energy_ids", detail::ids_of(energy_)},
               {"config_hash", hash_}});
    if (cfg_.flags.tsa) incumbent_ = evaluate_energy(prompt_);
    if (!val_.empty()) evaluate_val();
    checkpoint();
    return loop();
  }

  /// Continues from a checkpoint written by a run with the same config.
  /// Logs are truncated to the checkpoint, so the finished log matches an
  /// uninterrupted run line for line (ignoring `ts`).
  RunResult resume(const std::filesystem::path& checkpoint_file) {
    restore(read_checkpoint(checkpoint_file, hash_));
    return loop();
  }

  const Prompt& prompt() const noexcept { return prompt_; }

 private:
  int batches_per_epoch() const {
    return static_cast<int>((train_.size() + static_cast<std::size_t>(cfg_.batch_size) - 1) /
                            static_cast<std::size_t>(cfg_.batch_size));
  }
  int total_steps() const { return batches_per_epoch() * cfg_.epochs; }

  RunResult loop() {
    while (step_ < total_steps()) {
      run_step(step_ + 1);
      checkpoint();
      if (opts_.stop_after_step && step_ >= *opts_.stop_after_step && step_ < total_steps()) return result(false);
    }
    log_.emit(event::kRunFinished, step_,
              {{"final_prompt_id", prompt_.id()},
               {"final_text", prompt_.text()},
               {"history_size", history_.size()},
               {"counters", to_json(counters_)}});
    std::ofstream(cfg_.out_dir / "final_prompt.txt", std::ios::trunc) << prompt_.text() << '\n';
    return result(true);
  }

  RunResult result(bool finished) const {
    RunResult r;
    r.final_prompt = prompt_;
    r.steps = step_;
    r.total_steps = total_steps();
    r.finished = finished;
    r.incumbent_energy = incumbent_;
    r.history = history_;
    r.val_history = val_history_;
    r.counters = counters_;
    r.log_path = log_path();
    r.eval_path = eval_path();
    r.checkpoint_path = checkpoint_path();
    return r;
  }

  double evaluate_energy(const Prompt& p) {
    const auto res = evaluate(*engines_.forward, p, energy_, cfg_.workers);
    counters_.forward_energy += res.total;
    write_eval_records(res, "energy", p);
    log_.emit(event::kEvaluated, step_,
              {{"split", "energy"}, {"prompt_id", p.id()}, {"accuracy", res.accuracy}, {"correct", res.correct},
               {"total", res.total}});
    return res.accuracy;
  }

  void evaluate_val() {
    const auto res = evaluate(*engines_.forward, prompt_, val_.examples, cfg_.workers);
    counters_.forward_val += res.total;
    write_eval_records(res, "val", prompt_);
    val_history_.emplace_back(step_, res.accuracy);
    log_.emit(event::kEvaluated, step_,
              {{"split", "val"}, {"prompt_id", prompt_.id()}, {"accuracy", res.accuracy}, {"correct", res.correct},
               {"total", res.total}});
  }

  void write_eval_records(const EvalResult& res, const char* split, const Prompt& p) {
    for (const auto& rec : res.records) {
      auto line = to_json(rec, step_);
      line["split"] = split;
      line["prompt_id"] = p.id();
      evals_.write(line);
    }
  }

  std::vector<Example> batch_for(int batch_index) const {
    std::vector<Example> batch;
    const auto begin = static_cast<std::size_t>(batch_index) * static_cast<std::size_t>(cfg_.batch_size);
    const auto end = std::min(train_.size(), begin + static_cast<std::size_t>(cfg_.batch_size));
    for (std::size_t i = begin; i < end; ++i) batch.push_back(train_[epoch_order_[i]]);
    return batch;
  }

  nlohmann::json candidate_event(const UpdateOutcome& out, std::span<const InstructionBlock> extras,
                                 const std::optional<DropoutSelection>& dropout,
                                 const std::optional<ContrastSample>& contrast, bool retry) const {
    nlohmann::json j = {{"attempts", out.attempts}, {"failures", out.failures}, {"retry", retry},
                        {"skipped", out.skipped()}};
    nlohmann::json kinds = nlohmann::json::array();
    for (const auto& b : extras) kinds.push_back(to_string(b.kind));
    j["blocks"] = kinds;
    if (dropout) {
      std::vector<std::size_t> idx;
      for (const auto& s : dropout->preserved) idx.push_back(s.index);
      j["preserved"] = idx;
    }
    if (contrast) {
      j["contrast"] = {{"positives", contrast->positives},
                       {"negatives", contrast->negatives},
                       {"discarded", contrast->discarded},
                       {"margin", contrast->margin}};
    }
    if (out.candidate) {
      j["prompt_id"] = out.candidate->id();
      j["parent_id"] = prompt_.id();
      j["text"] = out.candidate->text();
      j["units"] = diff(prompt_, *out.candidate).unit_count;
    } else {
      j["reason"] = "update_failed";
    }
    return j;
  }

  void run_step(int t) {
    step_ = t;
    const int bpe = batches_per_epoch();
    const int epoch = (t - 1) / bpe;
    const int batch_index = (t - 1) % bpe;
    if (batch_index == 0) epoch_order_ = permutation(train_.size(), rng_);

    std::optional<TlrdStep> lr_step;
    if (cfg_.tlrd) lr_step = tlrd_step(schedule_);
    nlohmann::json started = {{"epoch", epoch}, {"batch", batch_index}, {"prompt_id", prompt_.id()}};
    if (lr_step) {
      started["lr"] = lr_step->r;
      started["lr_choice"] = to_string(lr_step->choice);
    }
    if (cfg_.flags.tsa) started["temperature"] = annealer_.temperature;
    log_.emit(event::kStepStarted, t, started);

    // Forward and loss.
    const auto batch = batch_for(batch_index);
    const LossReport loss = forward_batch(*engines_.forward, prompt_, batch, batch_index, cfg_.workers);
    counters_.forward_loss += batch.size();
    log_.emit(event::kForwardBatch, t, {{"prompt_id", prompt_.id()}, {"example_ids", detail::ids_of(batch)}});
    log_.emit(event::kLossComputed, t,
              {{"accuracy", loss.accuracy}, {"correct", loss.correct_count()}, {"total", loss.records.size()}});

    // Backward.
    std::vector<InstructionBlock> backward_extras;
    if (cfg_.flags.tmnt) {
      if (auto b = tmnt_block(past_gradients_)) backward_extras.push_back(std::move(*b));
    }
    const TextualGradient gradient = backward(*engines_.backward, prompt_, loss, backward_extras);
    ++counters_.backward;
    log_.emit(event::kGradientProduced, t,
              {{"feedback", gradient.feedback},
               {"source_batch", gradient.source_batch},
               {"momentum", cfg_.flags.tmnt ? std::min(past_gradients_.size(), kMomentumWindow) : 0}});
    past_gradients_.push_back(gradient);
    if (past_gradients_.size() > kMomentumWindow) past_gradients_.erase(past_gradients_.begin());

    // Update instructions, in fixed order: learning rate, dropout, contrast, regularization.
    std::vector<InstructionBlock> extras;
    std::optional<int> r;
    if (lr_step) {
      r = lr_step->r;
      if (auto b = tlrd_block(*lr_step)) extras.push_back(std::move(*b));
    } else if (cfg_.flags.tlr) {
      r = cfg_.tlr_r;
      extras.push_back(tlr_block(cfg_.tlr_r));
    }
    std::optional<DropoutSelection> dropout;
    if (cfg_.flags.tdo && !prompt_.sentences().empty()) {
      dropout = tdo_select(prompt_, cfg_.tdo_p, rng_);
      extras.push_back(dropout->block);
    }
    std::optional<ContrastSample> contrast;
    if (cfg_.flags.tcl && history_.size() >= 2) {
      contrast = tcl_sample(history_, tcl_partition(history_), cfg_.tcl_margin, rng_);
      extras.push_back(contrast->block);
    }
    if (cfg_.flags.tregu) {
      auto [l2, l1] = tregu_blocks();
      extras.push_back(std::move(l2));
      extras.push_back(std::move(l1));
    }
    const std::span<const SentenceSpan> preserved =
        dropout ? std::span<const SentenceSpan>(dropout->preserved) : std::span<const SentenceSpan>{};

    UpdateOutcome out = apply_update(*engines_.backward, prompt_, gradient, extras, preserved);
    counters_.optimizer += static_cast<std::size_t>(out.attempts);
    log_.emit(event::kCandidateProduced, t, candidate_event(out, extras, dropout, contrast, false));
    std::optional<Prompt> candidate = out.candidate;

    // Learning-rate measurement and, in hard-reject mode, one restated retry.
    if (candidate && r) {
      auto dec = enforce_tlr(prompt_, *candidate, *r, cfg_.tlr_mode);
      log_.emit(event::kTlrMeasured, t, tlr_json(dec, candidate->id()));
      if (!dec.accepted) {
        auto retry_extras = extras;
        retry_extras.push_back(tlr_restatement(dec.units, *r));
        out = apply_update(*engines_.backward, prompt_, gradient, retry_extras, preserved);
        counters_.optimizer += static_cast<std::size_t>(out.attempts);
        log_.emit(event::kCandidateProduced, t, candidate_event(out, retry_extras, dropout, contrast, true));
        candidate = out.candidate;
        if (candidate) {
          dec = enforce_tlr(prompt_, *candidate, *r, cfg_.tlr_mode);
          log_.emit(event::kTlrMeasured, t, tlr_json(dec, candidate->id()));
          if (!dec.accepted) candidate.reset();
        }
      }
    }

    if (candidate) {
      const bool need_energy = cfg_.flags.tsa || cfg_.flags.tcl;
      std::optional<double> e_new;
      if (need_energy) e_new = evaluate_energy(*candidate);
      if (cfg_.flags.tsa) {
        const double e_old = *incumbent_;
        const TsaDecision d = tsa_decide(annealer_, e_old, *e_new, rng_);
        history_.push_back({*candidate, *e_new, d.accepted, t});
        log_.emit(event::kTsaDecision, t,
                  {{"candidate_id", candidate->id()},
                   {"accepted", d.accepted},
                   {"e_old", e_old},
                   {"e_new", *e_new},
                   {"delta", d.delta},
                   {"probability", d.probability},
                   {"draw", d.draw ? nlohmann::json(*d.draw) : nlohmann::json(nullptr)},
                   {"temperature", annealer_.temperature},
                   {"history_index", history_.size() - 1}});
        if (d.accepted) {
          prompt_ = *candidate;
          incumbent_ = e_new;
        }
      } else {
        if (e_new) history_.push_back({*candidate, *e_new, true, t});
        prompt_ = *candidate;
        incumbent_ = e_new;
      }
    }
    if (cfg_.flags.tsa) annealer_ = tsa_cool(annealer_);
    if (!val_.empty() && t % cfg_.eval_every == 0) evaluate_val();
  }

  static nlohmann::json tlr_json(const TlrDecision& d, const std::string& candidate_id) {
    return {{"candidate_id", candidate_id}, {"units", d.units}, {"r", d.r}, {"accepted", d.accepted},
            {"overage", d.overage}};
  }

  // -------------------------------------------------------------------------
  // Checkpointing

  void checkpoint() {
    log_.emit(event::kCheckpointed, step_, {{"path", checkpoint_path().filename().string()}});
    write_checkpoint(checkpoint_path(), hash_, snapshot());
  }

  nlohmann::json snapshot() const {
    nlohmann::json history = nlohmann::json::array();
    for (const auto& h : history_) {
      history.push_back({{"prompt", detail::prompt_json(h.prompt)},
                         {"train_energy", h.train_energy},
                         {"accepted", h.accepted},
                         {"step", h.step}});
    }
    nlohmann::json grads = nlohmann::json::array();
    for (const auto& g : past_gradients_) {
      grads.push_back({{"feedback", g.feedback},
                       {"step", g.step},
                       {"source_batch", g.source_batch},
                       {"loss_accuracy", g.loss_accuracy}});
    }
    nlohmann::json val = nlohmann::json::array();
    for (const auto& [s, a] : val_history_) val.push_back({s, a});
    return {{"step", step_},
            {"train_ids", detail::ids_of(train_)},
            {"energy_ids", detail::ids_of(energy_)},
            {"epoch_order", epoch_order_},
            {"prompt", detail::prompt_json(prompt_)},
            {"incumbent_energy", incumbent_ ? nlohmann::json(*incumbent_) : nlohmann::json(nullptr)},
            {"annealer",
             {{"temperature", annealer_.temperature},
              {"alpha", annealer_.alpha},
              {"initial_t", annealer_.initial_t},
              {"steps", annealer_.steps}}},
            {"schedule", {{"current_r", schedule_.current_r}}},
            {"history", history},
            {"past_gradients", grads},
            {"val_history", val},
            {"rng", rng_.state()},
            {"counters", to_json(counters_)},
            {"log_lines", log_.lines()},
            {"eval_lines", evals_.lines()},
            {"engines", {{"forward", engines_.forward->save_state()}, {"backward", engines_.backward->save_state()}}}};
  }

  void restore(const nlohmann::json& p) {
    std::map<std::string, const Example*> by_id;
    for (const auto& ex : train_all_.examples) by_id[ex.id] = &ex;
    auto lookup = [&](const std::vector<std::string>& ids) {
      std::vector<Example> out;
      for (const auto& id : ids) {
        const auto it = by_id.find(id);
        if (it == by_id.end()) throw ChecksumMismatch("checkpoint references unknown example " + id);
        out.push_back(*it->second);
      }
      return out;
    };
    try {
      step_ = p.at("step").get<int>();
      train_ = lookup(p.at("train_ids").get<std::vector<std::string>>());
      energy_ = lookup(p.at("energy_ids").get<std::vector<std::string>>());
      epoch_order_ = p.at("epoch_order").get<std::vector<std::size_t>>();
      prompt_ = detail::prompt_from_json(p.at("prompt"));
      incumbent_.reset();
      if (!p.at("incumbent_energy").is_null()) incumbent_ = p.at("incumbent_energy").get<double>();
      const auto& a = p.at("annealer");
      annealer_ = {a.at("temperature").get<double>(), a.at("alpha").get<double>(), a.at("initial_t").get<double>(),
                   a.at("steps").get<int>()};
      schedule_.current_r = p.at("schedule").at("current_r").get<int>();
      history_.clear();
      for (const auto& h : p.at("history")) {
        history_.push_back({detail::prompt_from_json(h.at("prompt")), h.at("train_energy").get<double>(),
                            h.at("accepted").get<bool>(), h.at("step").get<int>()});
      }
      past_gradients_.clear();
      for (const auto& g : p.at("past_gradients")) {
        past_gradients_.push_back({g.at("feedback").get<std::string>(), g.at("step").get<int>(),
                                   g.at("source_batch").get<int>(), g.at("loss_accuracy").get<double>()});
      }
      val_history_.clear();
      for (const auto& v : p.at("val_history")) val_history_.emplace_back(v.at(0).get<int>(), v.at(1).get<double>());
      rng_.set_state(p.at("rng").get<Rng::State>());
      counters_ = counters_from_json(p.at("counters"));
      engines_.forward->load_state(p.at("engines").at("forward"));
      engines_.backward->load_state(p.at("engines").at("backward"));
      const auto log_lines = p.at("log_lines").get<std::size_t>();
      const auto eval_lines = p.at("eval_lines").get<std::size_t>();
      truncate_lines(log_path(), log_lines);
      truncate_lines(eval_path(), eval_lines);
      log_ = RunLog(log_path(), log_lines, opts_.timestamps);
      evals_ = JsonlWriter(eval_path(), eval_lines);
    } catch (const nlohmann::json::exception& e) {
      throw ChecksumMismatch(std::string("checkpoint payload is incomplete: ") + e.what());
    }
  }

  RunConfig cfg_;
  Engines engines_;
  RunOptions opts_;
  std::string hash_;

  DatasetSplit train_all_;
  DatasetSplit val_;
  std::vector<Example> train_;
  std::vector<Example> energy_;
  std::vector<std::size_t> epoch_order_;

  Rng rng_;
  int step_ = 0;
  Prompt prompt_;
  std::optional<double> incumbent_;
  AnnealerState annealer_;
  LrSchedule schedule_;
  std::vector<HistoryEntry> history_;
  std::vector<TextualGradient> past_gradients_;
  std::vector<std::pair<int, double>> val_history_;
  RunCounters counters_;

  RunLog log_;
  JsonlWriter evals_;
};

/// Synthetic engines for a config with a `synthetic` section; the forward
/// engine learns every train and validation example.
inline Engines make_synthetic_engines(const RunConfig& cfg) {
  if (!cfg.synthetic) throw ConfigError("config has no synthetic section");
  auto fwd = std::make_shared<synthetic::LandscapeForwardEngine>(cfg.forward.spec, *cfg.synthetic);
  fwd->add_examples(load_dataset(cfg.trainset_path, "train").examples);
  if (!cfg.valset_path.empty()) fwd->add_examples(load_dataset(cfg.valset_path, "val").examples);
  auto bwd = std::make_shared<synthetic::ScriptedBackwardEngine>(cfg.backward.spec, *cfg.synthetic);
  return {std::move(fwd), std::move(bwd)};
}

inline RunResult run(const RunConfig& cfg, Engines engines, RunOptions options = {}) {
  return Orchestrator(cfg, std::move(engines), options).run();
}

inline RunResult resume(const RunConfig& cfg, Engines engines, const std::filesystem::path& checkpoint_file,
                        RunOptions options = {}) {
  return Orchestrator(cfg, std::move(engines), options).resume(checkpoint_file);
}

}  // namespace dlpo
