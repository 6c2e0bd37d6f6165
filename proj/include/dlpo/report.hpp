#pragma once

// Per-step series and convergence summaries extracted from run logs.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dlpo/eval.hpp"
#include "dlpo/runlog.hpp"

namespace dlpo {

struct SeriesRow {
  std::string run;
  int step = 0;
  std::optional<double> train_acc;         // batch accuracy
  std::optional<double> energy;            // incumbent energy after the step
  std::optional<double> candidate_energy;  // energy of this step's candidate
  std::optional<bool> tsa_accepted;
  std::optional<double> acceptance_rate;   // cumulative over annealing decisions
  std::optional<double> val_acc;
  std::optional<std::size_t> update_units; // units of the final candidate of the step
};

/// One row per step (0 = initial prompt) from a run log.
inline std::vector<SeriesRow> series_from_log(const std::vector<nlohmann::json>& events, const std::string& run) {
  std::map<int, SeriesRow> rows;
  auto row = [&](int step) -> SeriesRow& {
    auto& r = rows[step];
    r.run = run;
    r.step = step;
    return r;
  };
  std::optional<double> incumbent;
  std::size_t decisions = 0, accepted = 0;
  for (const auto& e : events) {
    const std::string name = e.value("event", "");
    const int step = e.value("step", 0);
    if (name == event::kLossComputed) {
      row(step).train_acc = e.at("accuracy").get<double>();
    } else if (name == event::kEvaluated) {
      const double acc = e.at("accuracy").get<double>();
      if (e.at("split") == "val") {
        row(step).val_acc = acc;
      } else if (step == 0) {
        incumbent = acc;
      } else {
        row(step).candidate_energy = acc;
      }
    } else if (name == event::kCandidateProduced) {
      if (e.contains("units")) row(step).update_units = e.at("units").get<std::size_t>();
    } else if (name == event::kTsaDecision) {
      const bool ok = e.at("accepted").get<bool>();
      ++decisions;
      accepted += ok ? 1 : 0;
      if (ok) incumbent = e.at("e_new").get<double>();
      auto& r = row(step);
      r.tsa_accepted = ok;
      r.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(decisions);
    } else if (name == event::kStepStarted || name == event::kCheckpointed) {
      row(step);
    }
    if (name == event::kCheckpointed) {
      auto& r = row(step);
      // Without annealing every candidate replaces the incumbent.
      if (!r.tsa_accepted && r.candidate_energy) incumbent = r.candidate_energy;
      r.energy = incumbent;
    }
  }
  std::vector<SeriesRow> out;
  for (auto& [_, r] : rows) out.push_back(std::move(r));
  return out;
}

inline std::vector<std::pair<int, double>> val_series(const std::vector<SeriesRow>& rows) {
  std::vector<std::pair<int, double>> out;
  for (const auto& r : rows) {
    if (r.val_acc) out.emplace_back(r.step, *r.val_acc);
  }
  return out;
}

namespace detail {
inline std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", *v);
  return buf;
}
}  // namespace detail

inline void write_series_csv(const std::filesystem::path& path, const std::vector<SeriesRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoFailure("cannot write " + path.string());
  out << "run,step,train_acc,energy,candidate_energy,tsa_accepted,acceptance_rate,val_acc,update_units\n";
  for (const auto& r : rows) {
    out << r.run << ',' << r.step << ',' << detail::cell(r.train_acc) << ',' << detail::cell(r.energy) << ','
        << detail::cell(r.candidate_energy) << ',' << (r.tsa_accepted ? (*r.tsa_accepted ? "1" : "0") : "") << ','
        << detail::cell(r.acceptance_rate) << ',' << detail::cell(r.val_acc) << ','
        << (r.update_units ? std::to_string(*r.update_units) : "") << '\n';
  }
}

struct ConvergenceSummary {
  std::vector<std::optional<int>> per_run;
  std::size_t converged = 0;
  std::optional<double> mean;
  std::optional<double> stddev;  // sample standard deviation (n - 1)
};

inline ConvergenceSummary summarize_convergence(const std::vector<std::optional<int>>& steps) {
  ConvergenceSummary s;
  s.per_run = steps;
  std::vector<double> xs;
  for (const auto& v : steps) {
    if (v) xs.push_back(*v);
  }
  s.converged = xs.size();
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - *s.mean) * (x - *s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  } else {
    s.stddev = 0.0;
  }
  return s;
}

}  // namespace dlpo
