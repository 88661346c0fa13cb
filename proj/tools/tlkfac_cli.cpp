// Copyright 2026 The tlkfac Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end: gen-data, train, compare, validate-config.
//
// Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
// 3 numerical failure, 4 I/O or input-data error.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "tlkfac/data.hpp"
#include "tlkfac/errors.hpp"
#include "tlkfac/experiment.hpp"

namespace {

using namespace tlkfac;
using nlohmann::json;

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kNumerical = 3, kIo = 4 };

struct TrainFlags {
  std::string config;
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<long> batch_size;
  std::optional<std::string> optimizer;
  std::optional<double> lr;
  std::optional<double> momentum;
  std::optional<double> weight_decay;
  std::optional<double> damping;
  std::optional<double> kappa;
  std::optional<std::string> damping_mode;
  std::optional<std::string> resume;
  std::optional<int> checkpoint_every;
  bool quiet = false;
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
}

// Flags override values from the config file.
RunConfig resolve_train_config(const TrainFlags& f) {
  json j = f.config.empty() ? json::object() : read_json(f.config);
  if (f.seed) j["seed"] = *f.seed;
  if (f.output_dir) j["output_dir"] = *f.output_dir;
  if (f.epochs) j["epochs"] = *f.epochs;
  if (f.batch_size) j["batch_size"] = *f.batch_size;
  if (f.resume) j["resume"] = *f.resume;
  if (f.checkpoint_every) j["checkpoint_every"] = *f.checkpoint_every;
  auto& opt = j["optimizer"];
  if (opt.is_null()) opt = json::object();
  if (f.optimizer) opt["kind"] = *f.optimizer;
  if (f.lr) opt["lr"] = *f.lr;
  if (f.momentum) opt["momentum"] = *f.momentum;
  if (f.weight_decay) opt["weight_decay"] = *f.weight_decay;
  if (f.damping) opt["damping"] = *f.damping;
  if (f.kappa) opt["kappa"] = *f.kappa;
  if (f.damping_mode) opt["damping_mode"] = *f.damping_mode;
  RunConfig cfg = parse_run_config(j);
  if (cfg.output_dir.empty()) cfg.output_dir = "run";
  return cfg;
}

int cmd_gen_data(long d_in, long n_train, long n_test, std::uint64_t seed,
                 const std::string& out) {
  if (d_in < 1) throw ConfigError("--d-in: must be >= 1");
  if (n_train < 1) throw ConfigError("--train: must be >= 1");
  if (n_test < 1) throw ConfigError("--test: must be >= 1");
  const PlantedData data = gen_planted(d_in, n_train, n_test, seed);
  save_planted(data, out);
  std::cout << "wrote " << out << "/{train.csv,test.csv,teacher.json}\n"
            << "d_in " << d_in << ", train " << n_train << ", test " << n_test
            << ", seed " << seed << "\n"
            << "positive fraction: train " << positive_fraction(data.train)
            << ", test " << positive_fraction(data.test) << "\n";
  return kOk;
}

int cmd_train(const TrainFlags& flags) {
  const RunConfig cfg = resolve_train_config(flags);
  RunOptions opts;
  opts.log = flags.quiet ? nullptr : &std::cerr;
  const RunResult result = run_training(cfg, opts);
  const auto& last = result.rows.back();
  std::cout << "wrote " << (cfg.output_dir / "run.csv").string() << " ("
            << result.rows.size() << " epochs, final train loss " << last.train_loss
            << ", test acc " << last.test_acc << ")\n";
  return kOk;
}

int cmd_compare(const std::string& config, const std::optional<std::string>& out,
                std::optional<int> jobs, bool quiet) {
  CompareConfig cfg = parse_compare_config(read_json(config));
  if (jobs) cfg.jobs = *jobs;
  const std::filesystem::path out_dir =
      out ? std::filesystem::path(*out)
          : (cfg.base.output_dir.empty() ? std::filesystem::path("compare")
                                         : cfg.base.output_dir);
  validate_run_config(cfg.base);
  RunOptions opts;
  opts.log = quiet ? nullptr : &std::cerr;
  const CompareResult result = run_compare(cfg, out_dir, opts);
  std::size_t failed = 0;
  for (const auto& row : result.summary) failed += row.failures.size();
  std::cout << "wrote " << (out_dir / "summary.csv").string() << " ("
            << result.summary.size() << " grid points, " << failed
            << " failed runs)\n";
  return kOk;
}

int cmd_validate(const std::string& config, bool compare) {
  if (compare) {
    const CompareConfig cfg = parse_compare_config(read_json(config));
    validate_run_config(cfg.base);
    std::cout << "ok: " << expand_grid(cfg).size() << " grid points x "
              << cfg.seeds.size() << " seeds\n";
  } else {
    const RunConfig cfg = parse_run_config(read_json(config));
    validate_run_config(cfg);
    std::cout << "ok\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-level K-FAC training and experiment tool"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(tlkfac::kVersion));

  long d_in = 10, n_train = 25000, n_test = 2500;
  std::uint64_t data_seed = 0;
  std::string data_out = "data";
  auto* gen = app.add_subcommand("gen-data", "Generate a planted-target dataset");
  gen->add_option("--d-in", d_in, "Input dimension")->capture_default_str();
  gen->add_option("--train", n_train, "Training samples")->capture_default_str();
  gen->add_option("--test", n_test, "Test samples")->capture_default_str();
  gen->add_option("--seed", data_seed, "Random seed")->required();
  gen->add_option("--out", data_out, "Output directory")->capture_default_str();

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Train one model and write run.csv");
  train->add_option("-c,--config", tf.config, "JSON run configuration");
  train->add_option("-o,--output-dir", tf.output_dir, "Output directory");
  train->add_option("--seed", tf.seed, "Random seed");
  train->add_option("--epochs", tf.epochs, "Number of epochs");
  train->add_option("--batch-size", tf.batch_size, "Minibatch size");
  train->add_option("--optimizer", tf.optimizer, "sgd, adam, kfac1 or kfac2");
  train->add_option("--lr", tf.lr, "Learning rate");
  train->add_option("--momentum", tf.momentum, "Momentum");
  train->add_option("--weight-decay", tf.weight_decay, "Weight decay");
  train->add_option("--damping", tf.damping, "K-FAC damping lambda");
  train->add_option("--kappa", tf.kappa, "KL-clipping kappa");
  train->add_option("--damping-mode", tf.damping_mode, "eig or tikhonov");
  train->add_option("--resume", tf.resume, "Checkpoint to resume from");
  train->add_option("--checkpoint-every", tf.checkpoint_every,
                    "Write checkpoint.bin every N epochs");
  train->add_flag("-q,--quiet", tf.quiet, "No per-epoch progress on stderr");

  std::string cmp_config;
  std::optional<std::string> cmp_out;
  std::optional<int> cmp_jobs;
  bool cmp_quiet = false;
  auto* compare = app.add_subcommand("compare", "Grid search over optimizers and seeds");
  compare->add_option("-c,--config", cmp_config, "JSON compare configuration")->required();
  compare->add_option("-o,--output-dir", cmp_out, "Output directory");
  compare->add_option("-j,--jobs", cmp_jobs, "Parallel runs");
  compare->add_flag("-q,--quiet", cmp_quiet, "No progress on stderr");

  std::string val_config;
  bool val_compare = false;
  auto* validate = app.add_subcommand("validate-config", "Check a configuration file");
  validate->add_option("-c,--config", val_config, "JSON configuration")->required();
  validate->add_flag("--compare", val_compare, "Treat the file as a compare configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(d_in, n_train, n_test, data_seed, data_out);
    if (*train) return cmd_train(tf);
    if (*compare) return cmd_compare(cmp_config, cmp_out, cmp_jobs, cmp_quiet);
    if (*validate) return cmd_validate(val_config, val_compare);
  } catch (const tlkfac::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const tlkfac::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const tlkfac::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const tlkfac::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kIo;
  } catch (const tlkfac::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "unexpected failure: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
