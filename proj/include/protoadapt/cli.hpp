#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage or unreadable
// input, 2 failure while running.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "protoadapt/pipeline.hpp"

namespace protoadapt {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cli_detail {

inline std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError(std::string("cannot open ") + what + " '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const std::string& path, const char* what) {
  const std::string text = read_file(path, what);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(std::string(what) + " '" + path + "' is not valid JSON: " + e.what());
  }
}

inline AdaptConfig read_config(const std::string& path) {
  const auto j = read_json(path, "config file");
  try {
    return config_from_json(j);
  } catch (const std::exception& e) {
    throw UsageError("config file '" + path + "': " + e.what());
  }
}

inline std::array<Dataset, 2> read_data(const std::string& path) {
  std::istringstream in(read_file(path, "data file"));
  try {
    return read_csv(in);
  } catch (const std::exception& e) {
    throw UsageError("data file '" + path + "': " + e.what());
  }
}

inline DetectorCheckpoint read_checkpoint(const std::string& path) {
  const auto j = read_json(path, "model file");
  try {
    return checkpoint_from_json(j);
  } catch (const std::exception& e) {
    throw UsageError("model file '" + path + "': " + e.what());
  }
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("--seeds: bad seed '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("--seeds: empty list");
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) throw UsageError("--seeds: duplicate seed");
  return out;
}

inline std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline const Dataset& require_rows(const Dataset& d, const char* which, const std::string& path) {
  if (d.size() == 0) throw UsageError("data file '" + path + "' has no " + which + " rows");
  return d;
}

inline std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

}  // namespace cli_detail

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Prototype-guided pseudo-label refinement on a synthetic shift benchmark"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out_path, config_path, data_path, model_path, target_path, run_path;
  std::string seeds_arg, format = "csv";
  bool timings = false, fig6 = false;
  long long meta_iter = -1;

  auto* gen = app.add_subcommand("gen-data", "Write the default shift benchmark as CSV");
  gen->add_option("--seed", seed, "Benchmark seed")->required();
  gen->add_option("--out", out_path, "Output CSV")->required();

  auto* train = app.add_subcommand("train-source", "Train the detector head on the source rows");
  train->add_option("--config", config_path)->required();
  train->add_option("--data", data_path, "CSV from gen-data")->required();
  train->add_option("--out", out_path, "Checkpoint JSON")->required();

  auto* adapt_cmd = app.add_subcommand("adapt", "Adapt a source checkpoint to the target rows");
  adapt_cmd->add_option("--config", config_path)->required();
  adapt_cmd->add_option("--source-model", model_path)->required();
  adapt_cmd->add_option("--target", target_path, "CSV with target rows")->required();
  adapt_cmd->add_option("--out", out_path, "RunRecord JSON")->required();
  adapt_cmd->add_option("--seeds", seeds_arg, "Comma-separated seeds to sweep");
  adapt_cmd->add_flag("--timings", timings, "Include wall-clock timings");

  auto* ablate = app.add_subcommand("ablate", "Run every prototype mode under one seed");
  ablate->add_option("--config", config_path)->required();
  ablate->add_option("--source-model", model_path)->required();
  ablate->add_option("--target", target_path)->required();
  ablate->add_option("--out", out_path, "Table JSON")->required();

  auto* report = app.add_subcommand("report", "Export metric series from a RunRecord");
  report->add_option("--run", run_path)->required();
  report->add_option("--format", format)->check(CLI::IsMember({"csv", "json"}));
  report->add_flag("--fig6", fig6, "Confidence/correctness table instead of the series");
  report->add_option("--meta-iter", meta_iter, "Meta-iteration for --fig6 (default: last)");
  report->add_option("--out", out_path, "Write here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      const Benchmark b = default_shift_benchmark(seed);
      std::ostringstream csv;
      write_csv(csv, {&b.source, &b.target});
      write_file(out_path, csv.str());
      out << "wrote " << b.source.size() << " source + " << b.target.size() << " target rows to "
          << out_path << '\n';
      return 0;
    }

    if (*train) {
      const AdaptConfig config = read_config(config_path);
      const auto data = read_data(data_path);
      const Dataset& source = require_rows(data[0], "source", data_path);
      const DetectorCheckpoint ckpt = train_source(config, source);
      write_file(out_path, dump(to_json(ckpt)));
      const auto src = evaluate(ckpt.mlp, source);
      out << "source F1 " << detail::csv_cell(src.target_f1);
      if (data[1].size() > 0) {
        out << ", direct-transfer target F1 " << detail::csv_cell(evaluate(ckpt.mlp, data[1]).target_f1);
      }
      out << '\n';
      return 0;
    }

    if (*adapt_cmd || *ablate) {
      const AdaptConfig config = read_config(config_path);
      const DetectorCheckpoint ckpt = read_checkpoint(model_path);
      const auto data = read_data(target_path);
      const Dataset& target = require_rows(data[1], "target", target_path);
      const UnlabeledView view = strip_labels(target);
      const EvaluationHook hook = labeled_evaluator(target);

      if (*ablate) {
        const AblationTable table = run_ablation(config, ckpt.mlp, view, hook);
        write_file(out_path, dump(to_json(table)));
        for (const auto& r : table.rows) {
          out << to_string(r.mode) << ": target F1 " << detail::csv_cell(r.final_metrics.target_f1)
              << '\n';
        }
        return 0;
      }

      if (seeds_arg.empty()) {
        const RunRecord rec = adapt(config, ckpt.mlp, view, hook);
        write_file(out_path, dump(to_json(rec, timings)));
        out << "direct transfer F1 " << detail::csv_cell(rec.metrics.front().target_f1)
            << ", adapted F1 " << detail::csv_cell(rec.metrics.back().target_f1) << '\n';
        return 0;
      }

      // Independent runs, one task per seed. Results are ordered by seed
      // and summarised by medians, so completion order does not matter.
      const auto seeds = parse_seeds(seeds_arg);
      std::vector<std::future<RunRecord>> jobs;
      for (std::uint64_t s : seeds) {
        AdaptConfig c = config;
        c.seed = s;
        jobs.push_back(std::async(std::launch::async, [c, &ckpt, &view, &hook] {
          return adapt(c, ckpt.mlp, view, hook);
        }));
      }
      nlohmann::ordered_json runs = nlohmann::ordered_json::array();
      std::vector<double> dt_f1, final_f1;
      for (auto& job : jobs) {
        const RunRecord rec = job.get();
        if (rec.metrics.front().target_f1) dt_f1.push_back(*rec.metrics.front().target_f1);
        if (rec.metrics.back().target_f1) final_f1.push_back(*rec.metrics.back().target_f1);
        runs.push_back(to_json(rec, timings));
      }
      nlohmann::ordered_json sweep;
      sweep["schema"] = "protoadapt.sweep/1";
      sweep["seeds"] = seeds;
      sweep["median_dt_target_f1"] = detail::optional_json(median(dt_f1));
      sweep["median_target_f1"] = detail::optional_json(median(final_f1));
      sweep["runs"] = std::move(runs);
      write_file(out_path, dump(sweep));
      out << "median direct transfer F1 " << detail::csv_cell(median(dt_f1)) << ", median adapted F1 "
          << detail::csv_cell(median(final_f1)) << " over " << seeds.size() << " seeds\n";
      return 0;
    }

    if (*report) {
      const auto j = read_json(run_path, "run file");
      RunRecord rec;
      try {
        rec = run_record_from_json(j);
      } catch (const std::exception& e) {
        throw UsageError("run file '" + run_path + "': " + e.what());
      }
      std::string text;
      if (fig6) {
        const std::size_t k =
            meta_iter < 0 ? rec.metrics.size() - 1 : static_cast<std::size_t>(meta_iter);
        if (k >= rec.metrics.size()) {
          throw UsageError("--meta-iter " + std::to_string(k) + " out of range; run has " +
                           std::to_string(rec.metrics.size() - 1) + " meta-iterations");
        }
        const MetricsReport& m = rec.metrics[k];
        if (format == "csv") {
          text = confidence_csv(m);
        } else {
          nlohmann::ordered_json f;
          f["meta_iter"] = m.meta_iter;
          f["mean_conf_correct"] = detail::optional_json(m.mean_conf_correct);
          f["mean_conf_incorrect"] = detail::optional_json(m.mean_conf_incorrect);
          f["hist_correct"] = m.hist_correct;
          f["hist_incorrect"] = m.hist_incorrect;
          text = dump(f);
        }
      } else {
        text = format == "csv" ? metrics_series_csv(rec) : dump(metrics_series_json(rec));
      }
      if (out_path.empty()) out << text;
      else write_file(out_path, text);
      return 0;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace protoadapt
