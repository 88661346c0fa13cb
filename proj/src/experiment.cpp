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

#include "tlkfac/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "tlkfac/errors.hpp"

namespace tlkfac {

using nlohmann::json;

namespace {

constexpr std::uint64_t kInitStream = 1;

std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

void reject_unknown(const json& j, const std::string& where,
                    const std::set<std::string>& allowed) {
  if (!j.is_object()) {
    throw ConfigError((where.empty() ? std::string("config") : where) +
                      ": expected an object");
  }
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError(join(where, key) + ": unknown field");
    }
  }
}

template <typename T>
T field(const json& j, const std::string& where, const std::string& key) {
  const std::string name = join(where, key);
  try {
    return j.at(key).get<T>();
  } catch (const json::out_of_range&) {
    throw ConfigError(name + ": missing required field");
  } catch (const json::exception& e) {
    throw ConfigError(name + ": wrong type (" + e.what() + ")");
  }
}

template <typename T>
void optional_field(const json& j, const std::string& where,
                    const std::string& key, T& target) {
  if (j.contains(key)) target = field<T>(j, where, key);
}

double number(const json& j, const std::string& where, const std::string& key) {
  if (!j.at(key).is_number()) {
    throw ConfigError(join(where, key) + ": expected a number");
  }
  return j.at(key).get<double>();
}

void optional_number(const json& j, const std::string& where,
                     const std::string& key, double& target) {
  if (j.contains(key)) target = number(j, where, key);
}

std::uint64_t nonnegative_int(const json& j, const std::string& where,
                              const std::string& key) {
  const auto& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0 &&
                                 !v.is_number_unsigned())) {
    throw ConfigError(join(where, key) + ": expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

ArchitectureSpec parse_architecture(const json& j) {
  const std::string w = "architecture";
  reject_unknown(j, w, {"layer_dims", "layers", "width", "activation",
                        "batchnorm", "loss", "classes"});
  ArchitectureSpec a;
  if (j.contains("layer_dims")) {
    for (auto d : field<std::vector<std::int64_t>>(j, w, "layer_dims")) {
      a.layer_dims.push_back(static_cast<Eigen::Index>(d));
    }
  }
  if (j.contains("layers")) a.layers = nonnegative_int(j, w, "layers");
  if (j.contains("width")) {
    a.width = static_cast<Eigen::Index>(nonnegative_int(j, w, "width"));
  }
  if (j.contains("activation")) {
    try {
      a.activation = parse_activation(field<std::string>(j, w, "activation"));
    } catch (const ConfigError& e) {
      throw ConfigError("architecture.activation: " + std::string(e.what()));
    }
  }
  optional_field(j, w, "batchnorm", a.batchnorm);
  if (j.contains("loss")) {
    try {
      a.loss = parse_loss(field<std::string>(j, w, "loss"));
    } catch (const ConfigError& e) {
      throw ConfigError("architecture.loss: " + std::string(e.what()));
    }
  }
  if (j.contains("classes")) {
    a.classes = static_cast<Eigen::Index>(nonnegative_int(j, w, "classes"));
  }
  return a;
}

DatasetSpec parse_dataset(const json& j) {
  const std::string w = "dataset";
  reject_unknown(j, w, {"kind", "d_in", "n_train", "n_test", "seed", "train",
                        "test", "dir"});
  DatasetSpec d;
  const std::string kind = j.contains("kind") ? field<std::string>(j, w, "kind")
                                              : std::string("planted");
  if (kind == "planted") {
    d.kind = DatasetKind::planted;
  } else if (kind == "csv") {
    d.kind = DatasetKind::csv;
  } else if (kind == "cache") {
    d.kind = DatasetKind::cache;
  } else {
    throw ConfigError("dataset.kind: unknown kind '" + kind +
                      "' (valid: planted, csv, cache)");
  }
  if (j.contains("d_in")) d.d_in = static_cast<Eigen::Index>(nonnegative_int(j, w, "d_in"));
  if (j.contains("n_train")) {
    d.n_train = static_cast<Eigen::Index>(nonnegative_int(j, w, "n_train"));
  }
  if (j.contains("n_test")) {
    d.n_test = static_cast<Eigen::Index>(nonnegative_int(j, w, "n_test"));
  }
  if (j.contains("seed")) d.seed = nonnegative_int(j, w, "seed");
  if (j.contains("train")) d.train_path = field<std::string>(j, w, "train");
  if (j.contains("test")) d.test_path = field<std::string>(j, w, "test");
  if (j.contains("dir")) d.dir = field<std::string>(j, w, "dir");
  return d;
}

OptimizerConfig parse_optimizer_config(const json& j) {
  const std::string w = "optimizer";
  reject_unknown(j, w, {"kind", "lr", "momentum", "weight_decay", "damping",
                        "kappa", "damping_mode", "t_stats", "t_inv", "fisher",
                        "adam_beta1", "adam_beta2", "adam_eps", "lr_schedule"});
  OptimizerConfig o;
  if (j.contains("kind")) o.kind = parse_optimizer(field<std::string>(j, w, "kind"));
  optional_number(j, w, "lr", o.lr);
  optional_number(j, w, "momentum", o.momentum);
  optional_number(j, w, "weight_decay", o.weight_decay);
  optional_number(j, w, "damping", o.damping);
  optional_number(j, w, "kappa", o.kappa);
  if (j.contains("damping_mode")) {
    try {
      o.damping_mode = parse_damping_mode(field<std::string>(j, w, "damping_mode"));
    } catch (const ConfigError& e) {
      throw ConfigError("optimizer.damping_mode: " + std::string(e.what()));
    }
  }
  if (j.contains("t_stats")) o.t_stats = nonnegative_int(j, w, "t_stats");
  if (j.contains("t_inv")) o.t_inv = nonnegative_int(j, w, "t_inv");
  if (j.contains("fisher")) o.fisher = parse_fisher_labels(field<std::string>(j, w, "fisher"));
  optional_number(j, w, "adam_beta1", o.adam_beta1);
  optional_number(j, w, "adam_beta2", o.adam_beta2);
  optional_number(j, w, "adam_eps", o.adam_eps);
  if (j.contains("lr_schedule")) {
    const auto& sched = j.at("lr_schedule");
    if (!sched.is_array()) throw ConfigError("optimizer.lr_schedule: expected an array");
    for (std::size_t i = 0; i < sched.size(); ++i) {
      const auto& e = sched[i];
      if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() ||
          !e[1].is_number()) {
        throw ConfigError("optimizer.lr_schedule[" + std::to_string(i) +
                          "]: expected [epoch, multiplier]");
      }
      o.lr_schedule.emplace_back(e[0].get<int>(), e[1].get<double>());
    }
  }
  return o;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  reject_unknown(j, "", {"architecture", "dataset", "optimizer", "epochs",
                         "batch_size", "seed", "output_dir", "checkpoint_every",
                         "resume", "_meta"});
  RunConfig cfg;
  if (!j.contains("seed")) throw ConfigError("seed: missing required field");
  cfg.seed = nonnegative_int(j, "", "seed");
  if (j.contains("architecture")) cfg.architecture = parse_architecture(j.at("architecture"));
  if (j.contains("dataset")) cfg.dataset = parse_dataset(j.at("dataset"));
  if (j.contains("optimizer")) cfg.optimizer = parse_optimizer_config(j.at("optimizer"));
  if (j.contains("epochs")) cfg.epochs = static_cast<int>(nonnegative_int(j, "", "epochs"));
  if (j.contains("batch_size")) {
    cfg.batch_size = static_cast<Eigen::Index>(nonnegative_int(j, "", "batch_size"));
  }
  if (j.contains("output_dir")) cfg.output_dir = field<std::string>(j, "", "output_dir");
  if (j.contains("checkpoint_every")) {
    cfg.checkpoint_every = static_cast<int>(nonnegative_int(j, "", "checkpoint_every"));
  }
  if (j.contains("resume")) cfg.resume = field<std::string>(j, "", "resume");
  return cfg;
}

json to_json(const RunConfig& cfg) {
  json arch;
  if (!cfg.architecture.layer_dims.empty()) {
    std::vector<std::int64_t> dims(cfg.architecture.layer_dims.begin(),
                                   cfg.architecture.layer_dims.end());
    arch["layer_dims"] = dims;
  }
  arch["layers"] = cfg.architecture.layers;
  arch["width"] = cfg.architecture.width;
  arch["activation"] = std::string(to_string(cfg.architecture.activation));
  arch["batchnorm"] = cfg.architecture.batchnorm;
  arch["loss"] = std::string(to_string(cfg.architecture.loss));
  arch["classes"] = cfg.architecture.classes;

  json data;
  switch (cfg.dataset.kind) {
    case DatasetKind::planted:
      data["kind"] = "planted";
      data["d_in"] = cfg.dataset.d_in;
      data["n_train"] = cfg.dataset.n_train;
      data["n_test"] = cfg.dataset.n_test;
      data["seed"] = cfg.dataset.seed.value_or(cfg.seed);
      break;
    case DatasetKind::csv:
      data["kind"] = "csv";
      data["train"] = cfg.dataset.train_path.string();
      data["test"] = cfg.dataset.test_path.string();
      break;
    case DatasetKind::cache:
      data["kind"] = "cache";
      data["dir"] = cfg.dataset.dir.string();
      break;
  }

  const auto& o = cfg.optimizer;
  json opt;
  opt["kind"] = std::string(to_string(o.kind));
  opt["lr"] = o.lr;
  opt["momentum"] = o.momentum;
  opt["weight_decay"] = o.weight_decay;
  opt["damping"] = o.damping;
  opt["kappa"] = o.kappa;
  opt["damping_mode"] = std::string(to_string(o.damping_mode));
  opt["t_stats"] = o.t_stats;
  opt["t_inv"] = o.t_inv;
  opt["fisher"] = std::string(to_string(o.fisher));
  opt["adam_beta1"] = o.adam_beta1;
  opt["adam_beta2"] = o.adam_beta2;
  opt["adam_eps"] = o.adam_eps;
  json sched = json::array();
  for (const auto& [e, m] : o.lr_schedule) sched.push_back(json::array({e, m}));
  opt["lr_schedule"] = sched;

  json j;
  j["seed"] = cfg.seed;
  j["architecture"] = arch;
  j["dataset"] = data;
  j["optimizer"] = opt;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["output_dir"] = cfg.output_dir.string();
  j["checkpoint_every"] = cfg.checkpoint_every;
  return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

void validate_run_config(const RunConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("epochs: must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (cfg.checkpoint_every < 0) throw ConfigError("checkpoint_every: must be >= 0");
  cfg.optimizer.validate();
  const auto& a = cfg.architecture;
  if (a.layer_dims.empty()) {
    if (a.layers < 1) throw ConfigError("architecture.layers: must be >= 1");
    if (a.width < 1) throw ConfigError("architecture.width: must be >= 1");
  }
  const auto& d = cfg.dataset;
  switch (d.kind) {
    case DatasetKind::planted:
      if (d.d_in < 1) throw ConfigError("dataset.d_in: must be >= 1");
      if (d.n_train < 1) throw ConfigError("dataset.n_train: must be >= 1");
      if (d.n_test < 1) throw ConfigError("dataset.n_test: must be >= 1");
      break;
    case DatasetKind::csv:
      if (!std::filesystem::exists(d.train_path)) {
        throw ConfigError("dataset.train: file does not exist: " + d.train_path.string());
      }
      if (!std::filesystem::exists(d.test_path)) {
        throw ConfigError("dataset.test: file does not exist: " + d.test_path.string());
      }
      break;
    case DatasetKind::cache:
      if (!std::filesystem::exists(d.dir / "teacher.json")) {
        throw ConfigError("dataset.dir: no dataset cache in " + d.dir.string());
      }
      break;
  }
  if (cfg.resume && !std::filesystem::exists(*cfg.resume)) {
    throw ConfigError("resume: file does not exist: " + cfg.resume->string());
  }
  const Eigen::Index d_in = d.kind == DatasetKind::planted ? d.d_in : -1;
  if (d_in > 0) build_architecture(a, d_in).validate();
}

TrainTest load_datasets(const RunConfig& cfg) {
  const auto& d = cfg.dataset;
  switch (d.kind) {
    case DatasetKind::planted: {
      auto planted = gen_planted(d.d_in, d.n_train, d.n_test, d.seed.value_or(cfg.seed));
      return {std::move(planted.train), std::move(planted.test)};
    }
    case DatasetKind::csv: {
      TrainTest tt{load_csv(d.train_path), load_csv(d.test_path)};
      tt.test.split = Split::test;
      if (tt.train.dim() != tt.test.dim()) {
        throw InputError("train and test CSV files have different feature counts");
      }
      return tt;
    }
    case DatasetKind::cache: {
      auto planted = load_planted(d.dir);
      return {std::move(planted.train), std::move(planted.test)};
    }
  }
  throw ConfigError("dataset.kind: unsupported");
}

Architecture build_architecture(const ArchitectureSpec& spec, Eigen::Index d_in) {
  std::vector<Eigen::Index> dims = spec.layer_dims;
  if (dims.empty()) {
    dims.push_back(d_in);
    for (std::size_t i = 0; i + 1 < spec.layers; ++i) dims.push_back(spec.width);
    dims.push_back(spec.loss == LossKind::softmax_ce ? spec.classes : 1);
  } else if (dims.front() != d_in) {
    throw ConfigError("architecture.layer_dims[0]: " + std::to_string(dims.front()) +
                      " does not match the data dimension " + std::to_string(d_in));
  }
  Architecture arch = Architecture::mlp(std::move(dims), spec.activation,
                                        spec.batchnorm, spec.loss);
  arch.validate();
  return arch;
}

std::string format_row(const EpochRow& r) {
  std::ostringstream out;
  out << r.epoch << ',' << r.iteration << ',' << fmt(r.train_loss) << ','
      << fmt(r.test_loss) << ',' << fmt(r.train_acc) << ',' << fmt(r.test_acc)
      << ',' << fmt(r.wall_seconds) << ',' << fmt(r.lr) << ',' << fmt(r.nu_mean);
  return out.str();
}

Evaluation evaluate(const Architecture& arch, const Params& params,
                    const Dataset& data, Eigen::Index batch_size, Mode mode) {
  Evaluation ev;
  const Eigen::Index n = data.size();
  for (Eigen::Index start = 0; start < n; start += batch_size) {
    const Eigen::Index count = std::min(batch_size, n - start);
    const BatchCache cache =
        forward(arch, params, data.x.middleCols(start, count), mode);
    const Matrix y = data.y.middleCols(start, count);
    const double w = static_cast<double>(count) / static_cast<double>(n);
    ev.loss += w * loss(arch, cache.output, y);
    ev.accuracy += w * accuracy(arch, cache.output, y);
  }
  return ev;
}

RunResult run_training(const RunConfig& cfg, const RunOptions& opts) {
  validate_run_config(cfg);
  return run_training(cfg, load_datasets(cfg), opts);
}

RunResult run_training(const RunConfig& cfg, const TrainTest& data,
                       const RunOptions& opts) {
  validate_run_config(cfg);
  const Architecture arch = build_architecture(cfg.architecture, data.train.dim());
  if (data.test.dim() != data.train.dim()) {
    throw InputError("train and test data have different feature counts");
  }

  Rng rng(derive_seed(cfg.seed, kInitStream));
  Params params = init_params(arch, rng);
  Optimizer optimizer(arch, cfg.optimizer);
  int first_epoch = 1;
  if (cfg.resume) {
    Checkpoint ckpt = load_checkpoint(arch, *cfg.resume);
    params = std::move(ckpt.params);
    optimizer.state() = std::move(ckpt.state);
    rng.restore(ckpt.rng_state);
    first_epoch = ckpt.epoch + 1;
  }

  RunResult result;
  result.initial_train_loss =
      evaluate(arch, params, data.train, cfg.batch_size, Mode::training).loss;

  std::ofstream csv;
  if (opts.write_files) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.output_dir, ec);
    if (ec) {
      throw IoError("cannot create output directory " + cfg.output_dir.string() +
                    ": " + ec.message());
    }
    json echo = to_json(cfg);
    echo["_meta"] = {{"version", kVersion},
                     {"seed", cfg.seed},
                     {"init", "gaussian std sqrt(1/fan_in), zero bias"},
                     {"parameters", arch.num_params()}};
    std::ofstream echo_out(cfg.output_dir / "config.echo.json");
    if (!echo_out) throw IoError("cannot write " + (cfg.output_dir / "config.echo.json").string());
    echo_out << echo.dump(2) << "\n";

    const auto csv_path = cfg.output_dir / "run.csv";
    const bool append = cfg.resume && std::filesystem::exists(csv_path);
    csv.open(csv_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write " + csv_path.string());
    if (!append) csv << kRunCsvHeader << "\n" << std::flush;
  }

  const auto start = std::chrono::steady_clock::now();
  for (int epoch = first_epoch; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg.optimizer);
    double loss_sum = 0.0;
    double acc_sum = 0.0;
    double nu_sum = 0.0;
    std::size_t steps = 0;
    for (const auto& indices : minibatches(data.train.size(), cfg.batch_size, rng)) {
      const Batch batch = gather(data.train, indices);
      const StepMetrics m = optimizer.step(params, batch, rng, lr);
      const auto count = static_cast<double>(indices.size());
      loss_sum += m.loss * count;
      acc_sum += m.accuracy * count;
      nu_sum += m.nu;
      ++steps;
    }
    const double n = static_cast<double>(data.train.size());
    const Evaluation test =
        evaluate(arch, params, data.test, data.test.size(), Mode::evaluation);
    EpochRow row;
    row.epoch = epoch;
    row.iteration = optimizer.state().iteration;
    row.train_loss = loss_sum / n;
    row.train_acc = acc_sum / n;
    row.test_loss = test.loss;
    row.test_acc = test.accuracy;
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    row.lr = lr;
    row.nu_mean = nu_sum / static_cast<double>(steps);
    if (!std::isfinite(row.train_loss) || !std::isfinite(row.test_loss)) {
      throw NumericalError("non-finite loss at epoch " + std::to_string(epoch));
    }
    result.rows.push_back(row);
    if (opts.write_files) {
      csv << format_row(row) << "\n" << std::flush;
      if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
        save_checkpoint(Checkpoint{params, optimizer.state(), rng.save(), epoch},
                        arch, cfg.output_dir / "checkpoint.bin");
      }
    }
    if (opts.log) {
      *opts.log << to_string(cfg.optimizer.kind) << " epoch " << epoch
                << " train_loss " << row.train_loss << " test_acc " << row.test_acc
                << " nu " << row.nu_mean << " (" << row.wall_seconds << " s)\n";
    }
  }
  result.params = std::move(params);
  return result;
}

CompareConfig parse_compare_config(const json& j) {
  reject_unknown(j, "", {"base", "optimizers", "grid", "seeds", "jobs"});
  CompareConfig cfg;
  if (!j.contains("base")) throw ConfigError("base: missing required field");
  cfg.base = parse_run_config(j.at("base"));
  for (const auto& name : field<std::vector<std::string>>(j, "", "optimizers")) {
    cfg.optimizers.push_back(parse_optimizer(name));
  }
  if (cfg.optimizers.empty()) throw ConfigError("optimizers: must not be empty");
  const auto& g = j.contains("grid") ? j.at("grid") : json::object();
  reject_unknown(g, "grid", {"lr", "momentum", "damping", "kappa"});
  auto list = [&](const char* key, double fallback) {
    std::vector<double> values;
    if (g.contains(key)) values = field<std::vector<double>>(g, "grid", key);
    if (values.empty()) values.push_back(fallback);
    return values;
  };
  cfg.grid.lr = list("lr", cfg.base.optimizer.lr);
  cfg.grid.momentum = list("momentum", cfg.base.optimizer.momentum);
  cfg.grid.damping = list("damping", cfg.base.optimizer.damping);
  cfg.grid.kappa = list("kappa", cfg.base.optimizer.kappa);
  if (j.contains("seeds")) {
    cfg.seeds = field<std::vector<std::uint64_t>>(j, "", "seeds");
  }
  if (cfg.seeds.empty()) cfg.seeds.push_back(cfg.base.seed);
  if (j.contains("jobs")) cfg.jobs = static_cast<int>(nonnegative_int(j, "", "jobs"));
  if (cfg.jobs < 1) throw ConfigError("jobs: must be >= 1");
  return cfg;
}

std::vector<GridPoint> expand_grid(const CompareConfig& cfg) {
  std::vector<GridPoint> points;
  for (auto kind : cfg.optimizers) {
    const bool kfac = kind == OptimizerKind::kfac1 || kind == OptimizerKind::kfac2;
    const std::vector<double> dampings =
        kfac ? cfg.grid.damping : std::vector<double>{cfg.base.optimizer.damping};
    const std::vector<double> kappas =
        kfac ? cfg.grid.kappa : std::vector<double>{cfg.base.optimizer.kappa};
    for (double lr : cfg.grid.lr) {
      for (double mu : cfg.grid.momentum) {
        for (double lam : dampings) {
          for (double kap : kappas) {
            std::string name = std::string(to_string(kind)) + "_lr" + short_fmt(lr) +
                               "_mu" + short_fmt(mu);
            if (kfac) name += "_lam" + short_fmt(lam) + "_kap" + short_fmt(kap);
            points.push_back(GridPoint{kind, lr, mu, lam, kap, name});
          }
        }
      }
    }
  }
  return points;
}

double ci95_halfwidth(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) return std::nan("");
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  boost::math::students_t dist(static_cast<double>(n - 1));
  const double t = boost::math::quantile(boost::math::complement(dist, 0.025));
  return t * sd / std::sqrt(static_cast<double>(n));
}

CompareResult run_compare(const CompareConfig& cfg,
                          const std::filesystem::path& out_dir,
                          const RunOptions& opts) {
  const auto points = expand_grid(cfg);
  if (points.empty() || cfg.seeds.empty()) throw ConfigError("grid: no runs to perform");

  struct Task {
    std::size_t point;
    std::size_t seed;
  };
  std::vector<Task> tasks;
  for (std::size_t p = 0; p < points.size(); ++p) {
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) tasks.push_back({p, s});
  }
  std::vector<std::optional<std::vector<EpochRow>>> outcomes(tasks.size());
  std::vector<std::string> errors(tasks.size());

  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < tasks.size(); k = next++) {
      const auto& task = tasks[k];
      const auto& point = points[task.point];
      RunConfig run = cfg.base;
      run.optimizer.kind = point.kind;
      run.optimizer.lr = point.lr;
      run.optimizer.momentum = point.momentum;
      run.optimizer.damping = point.damping;
      run.optimizer.kappa = point.kappa;
      run.seed = cfg.seeds[task.seed];
      if (cfg.base.dataset.kind == DatasetKind::planted) run.dataset.seed.reset();
      run.resume.reset();
      run.output_dir = out_dir / point.name / ("seed" + std::to_string(run.seed));
      try {
        RunOptions quiet = opts;
        quiet.log = nullptr;
        outcomes[k] = run_training(run, quiet).rows;
        if (opts.log) {
          std::lock_guard lock(log_mutex);
          *opts.log << point.name << " seed " << run.seed << ": final train loss "
                    << outcomes[k]->back().train_loss << "\n";
        }
      } catch (const std::exception& e) {
        errors[k] = e.what();
        if (opts.log) {
          std::lock_guard lock(log_mutex);
          *opts.log << point.name << " seed " << run.seed << ": FAILED: " << e.what() << "\n";
        }
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(tasks.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
  }

  CompareResult result;
  result.runs.resize(points.size());
  for (std::size_t p = 0; p < points.size(); ++p) {
    SummaryRow row;
    row.point = points[p];
    row.seeds = cfg.seeds.size();
    std::vector<double> train, test_loss, test_acc;
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      if (tasks[k].point != p) continue;
      if (outcomes[k] && !outcomes[k]->empty()) {
        train.push_back(outcomes[k]->back().train_loss);
        test_loss.push_back(outcomes[k]->back().test_loss);
        test_acc.push_back(outcomes[k]->back().test_acc);
        result.runs[p].push_back(*outcomes[k]);
      } else {
        row.failures.push_back("seed " + std::to_string(cfg.seeds[tasks[k].seed]) +
                               ": " + errors[k]);
      }
    }
    row.completed = train.size();
    auto mean = [](const std::vector<double>& v) {
      return v.empty() ? std::nan("")
                       : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    row.final_train_loss_mean = mean(train);
    row.final_test_loss_mean = mean(test_loss);
    row.final_test_acc_mean = mean(test_acc);
    if (train.size() >= 2) {
      double ss = 0.0;
      for (double v : train) ss += (v - row.final_train_loss_mean) * (v - row.final_train_loss_mean);
      row.final_train_loss_std = std::sqrt(ss / static_cast<double>(train.size() - 1));
    } else {
      row.final_train_loss_std = std::nan("");
    }
    row.final_train_loss_ci95 = ci95_halfwidth(train);
    result.summary.push_back(std::move(row));
  }

  std::vector<std::size_t> order;
  for (std::size_t p = 0; p < result.summary.size(); ++p) {
    if (result.summary[p].completed > 0) order.push_back(p);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return result.summary[a].final_train_loss_mean < result.summary[b].final_train_loss_mean;
  });
  for (std::size_t r = 0; r < order.size(); ++r) {
    result.summary[order[r]].rank = static_cast<int>(r + 1);
  }

  if (opts.write_files) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    std::ofstream summary(out_dir / "summary.csv");
    if (!summary) throw IoError("cannot write " + (out_dir / "summary.csv").string());
    summary << "name,optimizer,lr,momentum,damping,kappa,seeds,completed,"
               "final_train_loss_mean,final_train_loss_std,final_train_loss_ci95,"
               "final_test_loss_mean,final_test_acc_mean,rank,failures\n";
    for (const auto& row : result.summary) {
      std::string failures;
      for (const auto& f : row.failures) {
        if (!failures.empty()) failures += "; ";
        for (char c : f) failures += (c == ',' || c == '\n' || c == '"') ? ' ' : c;
      }
      summary << row.point.name << ',' << to_string(row.point.kind) << ','
              << fmt(row.point.lr) << ',' << fmt(row.point.momentum) << ','
              << fmt(row.point.damping) << ',' << fmt(row.point.kappa) << ','
              << row.seeds << ',' << row.completed << ','
              << fmt(row.final_train_loss_mean) << ',' << fmt(row.final_train_loss_std)
              << ',' << fmt(row.final_train_loss_ci95) << ','
              << fmt(row.final_test_loss_mean) << ',' << fmt(row.final_test_acc_mean)
              << ',' << row.rank << ',' << failures << "\n";
    }

    std::ofstream curves(out_dir / "curves.csv");
    if (!curves) throw IoError("cannot write " + (out_dir / "curves.csv").string());
    curves << "name,epoch,runs,train_loss_mean,train_loss_ci95,test_loss_mean,"
              "train_acc_mean,test_acc_mean\n";
    for (std::size_t p = 0; p < points.size(); ++p) {
      const auto& runs = result.runs[p];
      if (runs.empty()) continue;
      std::size_t epochs = runs.front().size();
      for (const auto& r : runs) epochs = std::min(epochs, r.size());
      for (std::size_t e = 0; e < epochs; ++e) {
        std::vector<double> tl;
        double test_l = 0.0, train_a = 0.0, test_a = 0.0;
        for (const auto& r : runs) {
          tl.push_back(r[e].train_loss);
          test_l += r[e].test_loss;
          train_a += r[e].train_acc;
          test_a += r[e].test_acc;
        }
        const double k = static_cast<double>(runs.size());
        curves << points[p].name << ',' << runs.front()[e].epoch << ',' << runs.size()
               << ',' << fmt(std::accumulate(tl.begin(), tl.end(), 0.0) / k) << ','
               << fmt(ci95_halfwidth(tl)) << ',' << fmt(test_l / k) << ','
               << fmt(train_a / k) << ',' << fmt(test_a / k) << "\n";
      }
    }
  }
  return result;
}

}  // namespace tlkfac
