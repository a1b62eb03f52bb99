// rela: train, analyze, gradcheck, flops, ablate, dataset.
//
// Exit status: 0 success, 1 usage or configuration error, 2 invariant failure
// (for example a failing gradient check).

#include <malloc.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rela/analysis.hpp"
#include "rela/config.hpp"
#include "rela/gradcheck.hpp"
#include "rela/transformer.hpp"

namespace fs = std::filesystem;
using namespace rela;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvariantFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Output directory built under a temporary sibling and renamed into place on
// commit, so a run directory is either complete or absent.
class RunDir {
 public:
  explicit RunDir(const fs::path& target) : target_(target) {
    if (target.empty()) throw UsageError("an output directory is required (--out)");
    if (fs::exists(target)) throw UsageError("output directory " + target.string() + " already exists");
    const fs::path parent = target.has_parent_path() ? target.parent_path() : fs::path(".");
    if (!fs::is_directory(parent)) throw UsageError("parent directory " + parent.string() + " does not exist");
    staging_ = parent / ("." + target.filename().string() + ".partial." + std::to_string(::getpid()));
    fs::remove_all(staging_);
    fs::create_directory(staging_);
  }
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;
  ~RunDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

  fs::path path(const std::string& name) const { return staging_ / name; }

  void write(const std::string& name, const std::string& content) const {
    const fs::path p = path(name);
    fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    os << content;
    if (!os) throw std::runtime_error("cannot write " + p.string());
  }

  void commit() {
    fs::rename(staging_, target_);
    committed_ = true;
  }

 private:
  fs::path target_, staging_;
  bool committed_ = false;
};

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw UsageError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// --config, then --set overrides, then the dedicated flags.
struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
  std::string mechanism, activation, norm, gain_init, task;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "flat key = value configuration file");
    app->add_option("--set", sets, "override one setting, key=value (repeatable)");
    app->add_option("--mechanism", mechanism, "attention mechanism preset for every attention type");
    app->add_option("--activation", activation, "attention activation for every attention type");
    app->add_option("--norm", norm, "post-attention norm for every attention type");
    app->add_option("--gain-init", gain_init, "norm gain initialization (ones, xavier_uniform_gain)");
    app->add_option("--task", task, "toy task");
    app->add_option("--steps", steps, "training steps");
    app->add_option("--seed", seed, "random seed");
  }

  RunConfig resolve() const {
    std::string text = file.empty() ? std::string() : read_file(file);
    text += '\n';
    for (const auto& s : sets) {
      if (s.find('=') == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      text += s + '\n';
    }
    auto line = [&text](const std::string& key, const std::string& value) {
      if (!value.empty()) text += key + " = " + value + '\n';
    };
    line("mechanism", mechanism);
    for (auto t : kAttentionTypes) {
      const std::string p(to_string(t));
      line(p + ".activation", activation);
      line(p + ".norm", norm);
      line(p + ".gain_init", gain_init);
    }
    line("task", task);
    if (steps) line("steps", std::to_string(*steps));
    if (seed) line("seed", std::to_string(*seed));
    return parse_config(text);
  }
};

std::string jsonl(const Dataset& d) {
  std::ostringstream os;
  write_jsonl(os, d);
  return os.str();
}

// Trains one configuration into `dir`. Returns the summary.
nlohmann::json run_training(const RunConfig& rc, RunDir& dir, const std::string& prefix, bool verbose) {
  dir.write(prefix + "config.txt", echo_config(rc));
  if (rc.steps == 0) {
    Model model(rc.train.model);
    dir.write(prefix + "checkpoint.json", checkpoint_json(model, 0).dump());
    return {{"steps", 0}};
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result = train(rc.train, rc.task, rc.steps, [&](const TelemetryRow& r) {
    if (verbose && r.step % (rc.train.log_every * 10) == 0)
      std::fprintf(stderr, "step %zu loss %.4f acc %.4f\n", r.step, r.loss, r.accuracy);
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  dir.write(prefix + "telemetry.csv", telemetry_csv(result.telemetry));
  dir.write(prefix + "checkpoint.json", checkpoint_json(result.model, result.state.step).dump());
  for (const auto& c : result.checkpoints) {
    dir.write(prefix + "checkpoints/step_" + std::to_string(c.step) + ".json",
              checkpoint_json(rc.train.model, c.step, c.parameters).dump());
    std::string records;
    for (const auto& r : c.attention) records += to_json(r).dump() + '\n';
    dir.write(prefix + "checkpoints/step_" + std::to_string(c.step) + ".attention.jsonl", records);
  }
  Dataset heldout = held_out(rc, 256);
  dir.write(prefix + "heldout.jsonl", jsonl(heldout));
  const Evaluation ev = evaluate(result.model, heldout);
  nlohmann::json summary{{"steps", result.state.step},
                         {"final_loss", result.state.loss_history.empty() ? 0.0 : result.state.loss_history.back()},
                         {"divergence_flag", result.state.diverged},
                         {"nan_seen", result.state.nan_seen},
                         {"heldout_loss", ev.loss},
                         {"heldout_accuracy", ev.tokens.accuracy()}};
  dir.write(prefix + "summary.json", summary.dump(2) + '\n');
  if (verbose) std::fprintf(stderr, "trained %zu steps in %.1f s\n", result.state.step, seconds);
  return summary;
}

int cmd_train(const ConfigArgs& args, const std::string& out) {
  const RunConfig rc = args.resolve();
  RunDir dir(out);
  nlohmann::json summary = run_training(rc, dir, "", true);
  dir.commit();
  std::cout << summary.dump() << '\n';
  return 0;
}

struct AnalyzeArgs {
  std::string checkpoint, dataset, out;
  bool records = false, hallucinate = false;
  double temperature = 1.0;
  std::uint64_t seed = 1;
};

int cmd_analyze(const AnalyzeArgs& a) {
  nlohmann::json ckpt;
  try {
    ckpt = nlohmann::json::parse(read_file(a.checkpoint));
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("checkpoint " + a.checkpoint + ": " + e.what());
  }
  Model model = [&] {
    try {
      return model_from_checkpoint(ckpt);
    } catch (const std::exception& e) {
      throw UsageError("checkpoint " + a.checkpoint + ": " + e.what());
    }
  }();
  std::istringstream ds(read_file(a.dataset));
  Dataset data;
  try {
    data = read_jsonl(ds);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (data.empty()) throw UsageError("dataset " + a.dataset + " is empty");
  std::vector<AttentionRecord> records;
  try {
    records = capture_attention(model, data);
  } catch (const std::invalid_argument& e) {
    throw UsageError("dataset does not fit the checkpoint: " + std::string(e.what()));
  }
  RunDir dir(a.out);
  ReportOptions options;
  options.temperature = a.temperature;
  if (a.hallucinate) {
    Rng rng = make_rng(a.seed, kShuffleStream);
    options.shuffled_records = capture_attention(model, shuffle_targets(data, rng));
  }
  MetricsReport report = build_report(records, data, options);
  report.config_hash = fingerprint(ckpt.at("config").dump());
  report.seed = model.config().seed;
  report.dataset_id = fingerprint(read_file(a.dataset));
  dir.write("metrics.json", to_json(report).dump(2) + '\n');
  std::ostringstream csv;
  write_csv(csv, report);
  dir.write("metrics.csv", csv.str());
  if (a.records) {
    std::string lines;
    for (const auto& r : records) lines += to_json(r).dump() + '\n';
    dir.write("attention.jsonl", lines);
  }
  dir.commit();
  std::cout << "wrote " << report.entries.size() << " metric rows to " << a.out << '\n';
  return 0;
}

int cmd_gradcheck(const std::vector<std::string>& scope, const GradSuiteOptions& options) {
  const auto results = run_gradcheck(scope, options);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-14s worst_rel_error %.3e  %s\n", r.component.c_str(), r.worst, r.passed ? "ok" : "FAIL");
    ok = ok && r.passed;
  }
  if (!ok) throw InvariantFailure("gradient check exceeded tolerance " + format_double(options.tolerance));
  return 0;
}

int cmd_flops(std::uint64_t heads, std::uint64_t length, std::uint64_t dim, std::uint64_t scan_max) {
  const auto s = flops(FlopsModel::softmax_att, heads, length, dim);
  const auto r = flops(FlopsModel::rela_g, heads, length, dim);
  std::printf("H=%llu T=%llu d=%llu\n", static_cast<unsigned long long>(heads), static_cast<unsigned long long>(length),
              static_cast<unsigned long long>(dim));
  std::printf("softmax_att %llu\n", static_cast<unsigned long long>(s));
  std::printf("rela_g      %llu\n", static_cast<unsigned long long>(r));
  std::printf("smaller     %s\n", s < r ? "softmax_att" : (r < s ? "rela_g" : "equal"));
  std::printf("closest_T   %llu (scan 1..%llu)\n",
              static_cast<unsigned long long>(closest_length(heads, dim, scan_max)),
              static_cast<unsigned long long>(scan_max));
  return 0;
}

int cmd_ablate(const ConfigArgs& args, const std::vector<int>& rows, const std::string& out) {
  const RunConfig base = args.resolve();
  RunDir dir(out);
  std::string table = "id,label,steps,final_loss,heldout_accuracy,divergence_flag\n";
  for (const auto& row : ablation_grid()) {
    if (!rows.empty() && std::find(rows.begin(), rows.end(), row.id) == rows.end()) continue;
    RunConfig rc = base;
    rc.train.model.attention = row.attention;
    rc.finalize();
    std::fprintf(stderr, "row %d: %s\n", row.id, row.label.c_str());
    char prefix[32];
    std::snprintf(prefix, sizeof prefix, "row_%02d/", row.id);
    const auto s = run_training(rc, dir, prefix, false);
    table += std::to_string(row.id) + ',' + row.label + ',' + s.at("steps").dump() + ',' +
             (s.contains("final_loss") ? format_double(s.at("final_loss")) : "NA") + ',' +
             (s.contains("heldout_accuracy") ? format_double(s.at("heldout_accuracy")) : "NA") + ',' +
             (s.value("divergence_flag", false) ? "1" : "0") + '\n';
  }
  dir.write("ablation.csv", table);
  dir.commit();
  std::cout << table;
  return 0;
}

int cmd_dataset(const ConfigArgs& args, std::size_t count, std::uint64_t stream, const std::string& out) {
  const RunConfig rc = args.resolve();
  if (fs::exists(out)) throw UsageError(out + " already exists");
  Rng rng = make_rng(rc.train.model.seed, stream);
  const std::string tmp = out + ".partial";
  {
    std::ofstream os(tmp, std::ios::binary);
    write_jsonl(os, generate(rc.task, rng, count));
    if (!os) throw UsageError("cannot write " + out);
  }
  fs::rename(tmp, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep freed activation buffers in the heap instead of returning them to
  // the kernel after every step.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);

  CLI::App app{"Rectified linear attention laboratory"};
  app.require_subcommand(1);

  ConfigArgs train_args;
  std::string train_out;
  auto* train_cmd = app.add_subcommand("train", "train one configuration");
  train_args.attach(train_cmd);
  train_cmd->add_option("--out", train_out, "run directory to create")->required();

  AnalyzeArgs analyze_args;
  auto* analyze_cmd = app.add_subcommand("analyze", "attention statistics of a checkpoint on a dataset");
  analyze_cmd->add_option("--checkpoint", analyze_args.checkpoint, "checkpoint JSON")->required();
  analyze_cmd->add_option("--dataset", analyze_args.dataset, "dataset JSONL")->required();
  analyze_cmd->add_option("--out", analyze_args.out, "report directory to create")->required();
  analyze_cmd->add_flag("--records", analyze_args.records, "also write the captured attention records");
  analyze_cmd->add_flag("--hallucinate", analyze_args.hallucinate, "add the shuffled-target null rate series");
  analyze_cmd->add_option("--temperature", analyze_args.temperature, "head diversity temperature")
      ->check(CLI::PositiveNumber);
  analyze_cmd->add_option("--seed", analyze_args.seed, "seed for the target shuffle");

  std::vector<std::string> scope;
  GradSuiteOptions grad_options;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad_cmd->add_option("--scope", scope, "components to check (default: all)")
      ->delimiter(',')
      ->check(CLI::IsMember(gradcheck_components()));
  grad_cmd->add_option("--points", grad_options.points, "probe points per component");
  grad_cmd->add_option("--seed", grad_options.seed, "probe seed");
  grad_cmd->add_flag("--inject-bug", grad_options.inject_bug, "corrupt one adjoint to check the detector");

  std::uint64_t heads = 8, length = 100, dim = 512, scan_max = 4096;
  auto* flops_cmd = app.add_subcommand("flops", "analytic FLOPs of softmax attention and ReLA-g");
  flops_cmd->add_option("-H,--heads", heads, "attention heads")->check(CLI::PositiveNumber);
  flops_cmd->add_option("-T,--length", length, "sequence length")->check(CLI::PositiveNumber);
  flops_cmd->add_option("-d,--dim", dim, "model dimension")->check(CLI::PositiveNumber);
  flops_cmd->add_option("--scan-max", scan_max, "largest T in the crossover scan")->check(CLI::PositiveNumber);

  ConfigArgs ablate_args;
  std::vector<int> ablate_rows;
  std::string ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "train the mechanism ablation grid");
  ablate_args.attach(ablate_cmd);
  ablate_cmd->add_option("--rows", ablate_rows, "grid rows to run (default: all)")->delimiter(',');
  ablate_cmd->add_option("--out", ablate_out, "run directory to create")->required();

  ConfigArgs dataset_args;
  std::size_t count = 256;
  std::uint64_t stream = kHeldOutStream;
  std::string dataset_out;
  auto* dataset_cmd = app.add_subcommand("dataset", "write a toy dataset as JSON lines");
  dataset_args.attach(dataset_cmd);
  dataset_cmd->add_option("--count", count, "number of examples");
  dataset_cmd->add_option("--stream", stream, "random stream under the seed");
  dataset_cmd->add_option("--out", dataset_out, "JSONL file to create")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, train_out);
    if (*analyze_cmd) return cmd_analyze(analyze_args);
    if (*grad_cmd) return cmd_gradcheck(scope, grad_options);
    if (*flops_cmd) return cmd_flops(heads, length, dim, scan_max);
    if (*ablate_cmd) return cmd_ablate(ablate_args, ablate_rows, ablate_out);
    if (*dataset_cmd) return cmd_dataset(dataset_args, count, stream, dataset_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const InvariantFailure& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
