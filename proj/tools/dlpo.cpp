// dlpo: run, evaluate, replay and report prompt-optimization runs.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dlpo/dlpo.hpp"
#include "dlpo/factory.hpp"

namespace fs = std::filesystem;

namespace {

void print_result(const dlpo::RunResult& r) {
  std::cout << (r.finished ? "finished" : "stopped") << " after step " << r.steps << "/" << r.total_steps << '\n';
  std::cout << "final prompt " << r.final_prompt.id() << '\n';
  if (r.incumbent_energy) std::printf("train energy %.4f\n", *r.incumbent_energy);
  if (!r.val_history.empty()) std::printf("val accuracy %.4f\n", r.val_history.back().second);
  std::cout << "log " << r.log_path.string() << '\n';
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw dlpo::IoFailure("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete prompt optimization with textual gradients"};
  app.require_subcommand(1);

  std::string config_path, resume_path, record_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> stop_after;
  bool verbose = false;
  auto* run = app.add_subcommand("run", "Optimize a prompt");
  run->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--resume", resume_path, "Continue from a checkpoint")->check(CLI::ExistingFile);
  run->add_option("--record", record_path, "Append every engine exchange to this transcript");
  run->add_option("--out", out_dir, "Override the output directory");
  run->add_option("--stop-after", stop_after, "Stop after this step (checkpoint kept)");
  run->add_flag("-v,--verbose", verbose, "Log HTTP attempts to stderr");

  std::string prompt_file, dataset_path, eval_config, model = "gpt-4o-mini",
                                                      endpoint = "https://api.openai.com/v1/chat/completions",
                                                      records_out;
  unsigned workers = 4;
  auto* eval = app.add_subcommand("eval", "Score a prompt on a dataset");
  eval->add_option("--prompt", prompt_file, "File holding the prompt text")->required()->check(CLI::ExistingFile);
  eval->add_option("--dataset", dataset_path, "JSON-lines dataset")->required()->check(CLI::ExistingFile);
  eval->add_option("--config", eval_config, "Take the forward engine from this run config")
      ->check(CLI::ExistingFile);
  eval->add_option("--model", model, "Forward model (without --config)");
  eval->add_option("--endpoint", endpoint, "Chat-completions URL (without --config)");
  eval->add_option("--workers", workers, "Parallel requests")->check(CLI::PositiveNumber);
  eval->add_option("--out", records_out, "Write per-example records (JSON lines)");

  std::string transcript_path, replay_config, replay_out;
  auto* replay = app.add_subcommand("replay", "Re-run a recorded run without network access");
  replay->add_option("--transcript", transcript_path, "Recorded transcript")->required()->check(CLI::ExistingFile);
  replay->add_option("--config", replay_config, "Config of the recorded run")->required()->check(CLI::ExistingFile);
  replay->add_option("--out", replay_out, "Override the output directory");

  std::vector<std::string> logs;
  std::string csv_out;
  std::optional<double> threshold;
  auto* report = app.add_subcommand("report", "Per-step series and convergence statistics");
  report->add_option("--log", logs, "Run logs (runlog.jsonl)")->required()->check(CLI::ExistingFile);
  report->add_option("--out", csv_out, "CSV output")->required();
  report->add_option("--threshold", threshold, "Validation accuracy that counts as converged");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      auto cfg = dlpo::load_config(config_path);
      if (seed) cfg.seed = *seed;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      std::optional<fs::path> record;
      if (!record_path.empty()) record = record_path;
      dlpo::RunOptions opts;
      opts.stop_after_step = stop_after;
      dlpo::Orchestrator orch(cfg, dlpo::make_engines(cfg, record, verbose), opts);
      print_result(resume_path.empty() ? orch.run() : orch.resume(resume_path));
    } else if (*eval) {
      dlpo::EngineConfig ec{"openai", dlpo::EngineSpec::forward_defaults()};
      std::optional<dlpo::RunConfig> cfg;
      if (!eval_config.empty()) {
        cfg = dlpo::load_config(eval_config);
        ec = cfg->forward;
      } else {
        ec.spec.model = model;
        ec.spec.endpoint_url = endpoint;
      }
      const auto data = dlpo::load_dataset(dataset_path, "eval");
      dlpo::EnginePtr engine;
      if (ec.kind == "synthetic") {
        auto fwd = std::make_shared<dlpo::synthetic::LandscapeForwardEngine>(ec.spec, *cfg->synthetic);
        fwd->add_examples(data.examples);
        engine = fwd;
      } else {
        engine = dlpo::make_http_engine(ec);
      }
      std::string text = read_file(prompt_file);
      while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
      const auto res = dlpo::evaluate(*engine, dlpo::Prompt::root(text), data.examples, workers);
      std::printf("accuracy %.4f (%zu/%zu)\n", res.accuracy, res.correct, res.total);
      if (!records_out.empty()) {
        std::ofstream out(records_out, std::ios::trunc);
        for (const auto& r : res.records) out << dlpo::to_json(r, 0).dump() << '\n';
      }
    } else if (*replay) {
      auto cfg = dlpo::load_config(replay_config);
      if (!replay_out.empty()) cfg.out_dir = replay_out;
      print_result(dlpo::run(cfg, dlpo::make_replay_engines(cfg, transcript_path)));
    } else if (*report) {
      std::vector<dlpo::SeriesRow> all;
      std::vector<std::optional<int>> converged;
      for (const auto& log : logs) {
        const fs::path p(log);
        const std::string name = p.parent_path().filename().empty() ? p.stem().string()
                                                                    : p.parent_path().filename().string();
        auto rows = dlpo::series_from_log(dlpo::read_jsonl(p), name);
        if (threshold) converged.push_back(dlpo::detect_convergence(dlpo::val_series(rows), *threshold).converged_step);
        all.insert(all.end(), rows.begin(), rows.end());
      }
      dlpo::write_series_csv(csv_out, all);
      std::cout << "wrote " << all.size() << " rows to " << csv_out << '\n';
      if (threshold) {
        const auto s = dlpo::summarize_convergence(converged);
        for (std::size_t i = 0; i < logs.size(); ++i) {
          std::cout << logs[i] << ": "
                    << (s.per_run[i] ? "converged at step " + std::to_string(*s.per_run[i]) : "not converged") << '\n';
        }
        if (s.mean) {
          std::printf("convergence step: mean %.2f, stddev %.2f over %zu/%zu runs\n", *s.mean, *s.stddev, s.converged,
                      logs.size());
        }
      }
    }
  } catch (const dlpo::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
