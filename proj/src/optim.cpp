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

#include "tlkfac/optim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tlkfac/errors.hpp"

namespace tlkfac {

std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::kfac1: return "kfac1";
    case OptimizerKind::kfac2: return "kfac2";
  }
  return "?";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  if (name == "kfac1") return OptimizerKind::kfac1;
  if (name == "kfac2") return OptimizerKind::kfac2;
  throw ConfigError("optimizer.kind: unknown optimizer '" + std::string(name) +
                    "' (valid: sgd, adam, kfac1, kfac2)");
}

std::string_view to_string(FisherLabels f) {
  return f == FisherLabels::sampled ? "sampled" : "empirical";
}

FisherLabels parse_fisher_labels(std::string_view name) {
  if (name == "sampled") return FisherLabels::sampled;
  if (name == "empirical") return FisherLabels::empirical;
  throw ConfigError("optimizer.fisher: unknown label source '" +
                    std::string(name) + "' (valid: sampled, empirical)");
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optimizer.lr: must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("optimizer.momentum: must be in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) {
    throw ConfigError("optimizer.weight_decay: must be >= 0");
  }
  if (kind == OptimizerKind::adam) {
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) ||
        !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
      throw ConfigError("optimizer.adam_beta1/adam_beta2: must be in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("optimizer.adam_eps: must be > 0");
  }
  if (is_kfac()) {
    if (!(damping > 0.0)) throw ConfigError("optimizer.damping: must be > 0");
    if (!(kappa > 0.0)) throw ConfigError("optimizer.kappa: must be > 0");
    if (t_stats < 1) throw ConfigError("optimizer.t_stats: must be >= 1");
    if (t_inv < 1 || t_inv % t_stats != 0) {
      throw ConfigError("optimizer.t_inv: must be a positive multiple of t_stats");
    }
  }
  for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
    if (!(lr_schedule[i].second > 0.0)) {
      throw ConfigError("optimizer.lr_schedule[" + std::to_string(i) +
                        "]: multiplier must be > 0");
    }
    if (i > 0 && lr_schedule[i].first < lr_schedule[i - 1].first) {
      throw ConfigError("optimizer.lr_schedule: epochs must be sorted");
    }
  }
}

double lr_at(int epoch, const OptimizerConfig& cfg) {
  double lr = cfg.lr;
  for (const auto& [milestone, factor] : cfg.lr_schedule) {
    if (milestone <= epoch) lr *= factor;
  }
  return lr;
}

void sgd_update(Vector& theta, Vector& velocity, const Vector& grad, double lr,
                double momentum, double weight_decay) {
  velocity = momentum * velocity + (grad + weight_decay * theta);
  theta -= lr * velocity;
}

void adam_update(Vector& theta, Vector& m, Vector& v, const Vector& grad,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, std::size_t step) {
  const Vector g = grad + weight_decay * theta;
  m = beta1 * m + (1.0 - beta1) * g;
  v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

KfacDirection kfac_direction(const BlockInverse& blocks, const CoarseState* coarse,
                             const GradVec& reg_grad, double lr, double kappa) {
  KfacDirection out;
  out.direction = apply_two_level(blocks, coarse, reg_grad);
  out.nu = kl_clip(out.direction, reg_grad, lr, kappa);
  return out;
}

Vector flatten_bn(const Params& params) {
  Eigen::Index n = 0;
  for (const auto& bn : params.bn) {
    if (bn) n += bn->scale.size() + bn->shift.size();
  }
  Vector v(n);
  Eigen::Index at = 0;
  for (const auto& bn : params.bn) {
    if (!bn) continue;
    v.segment(at, bn->scale.size()) = bn->scale;
    at += bn->scale.size();
    v.segment(at, bn->shift.size()) = bn->shift;
    at += bn->shift.size();
  }
  return v;
}

void unflatten_bn(const Vector& v, Params& params) {
  Eigen::Index at = 0;
  for (auto& bn : params.bn) {
    if (!bn) continue;
    bn->scale = v.segment(at, bn->scale.size());
    at += bn->scale.size();
    bn->shift = v.segment(at, bn->shift.size());
    at += bn->shift.size();
  }
  if (at != v.size()) throw DimensionError("unflatten_bn: length mismatch");
}

namespace {

Vector flatten_bn_grads(const Gradients& grads) {
  Eigen::Index n = 0;
  for (const auto& bn : grads.bn) {
    if (bn) n += bn->scale.size() + bn->shift.size();
  }
  Vector v(n);
  Eigen::Index at = 0;
  for (const auto& bn : grads.bn) {
    if (!bn) continue;
    v.segment(at, bn->scale.size()) = bn->scale;
    at += bn->scale.size();
    v.segment(at, bn->shift.size()) = bn->shift;
    at += bn->shift.size();
  }
  return v;
}

bool due(std::size_t t, std::size_t interval) {
  return t == 1 || t % interval == 0;
}

void require_finite_vector(const Vector& v, std::string_view what) {
  if (!v.allFinite()) {
    throw NumericalError(std::string(what) + " became non-finite");
  }
}

}  // namespace

Optimizer::Optimizer(const Architecture& arch, OptimizerConfig cfg)
    : arch_(arch), cfg_(std::move(cfg)) {
  arch_.validate();
  cfg_.validate();
  const Eigen::Index n = arch_.num_params();
  state_.velocity = Vector::Zero(n);
  if (cfg_.kind == OptimizerKind::adam) {
    state_.adam_m = Vector::Zero(n);
    state_.adam_v = Vector::Zero(n);
  }
  if (cfg_.is_kfac()) {
    state_.cov = CovState(arch_, cfg_.kind == OptimizerKind::kfac2
                                     ? CovMode::full
                                     : CovMode::diagonal);
  }
}

void Optimizer::rebuild_preconditioner() {
  state_.blocks = build_block_inverses(
      state_.cov, DampingConfig{cfg_.damping, cfg_.damping_mode});
  if (cfg_.kind == OptimizerKind::kfac2) {
    state_.coarse = assemble_coarse(state_.cov);
    prepare_coarse(*state_.coarse, cfg_.damping);
  } else {
    state_.coarse.reset();
  }
}

StepMetrics Optimizer::step(Params& params, const Batch& batch, Rng& rng,
                            double lr) {
  StepMetrics metrics;
  BatchCache cache = forward(arch_, params, batch.x, Mode::training);
  metrics.loss = loss(arch_, cache.output, batch.y);
  metrics.accuracy = accuracy(arch_, cache.output, batch.y);
  if (!std::isfinite(metrics.loss)) {
    throw NumericalError("training loss became non-finite at iteration " +
                         std::to_string(state_.iteration + 1));
  }
  const Gradients grads = backward(arch_, params, cache, batch.y);
  update_running_stats(params, cache);

  const std::size_t t = state_.iteration + 1;
  Vector theta = flatten(params.weights);
  Vector grad = flatten(grads.weights);

  switch (cfg_.kind) {
    case OptimizerKind::sgd:
      sgd_update(theta, state_.velocity, grad, lr, cfg_.momentum,
                 cfg_.weight_decay);
      break;
    case OptimizerKind::adam:
      adam_update(theta, state_.adam_m, state_.adam_v, grad, lr,
                  cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps,
                  cfg_.weight_decay, t);
      break;
    case OptimizerKind::kfac1:
    case OptimizerKind::kfac2: {
      if (due(t, cfg_.t_stats)) {
        const Matrix labels = cfg_.fisher == FisherLabels::sampled
                                  ? sample_labels(arch_, cache.output, rng)
                                  : batch.y;
        backward(arch_, params, cache, labels);
        state_.cov.update(cache);
        metrics.stats_updated = true;
      }
      if (due(t, cfg_.t_inv) || !state_.blocks) {
        rebuild_preconditioner();
        metrics.preconditioner_rebuilt = true;
      }
      const Vector reg = grad + cfg_.weight_decay * theta;
      const GradVec reg_grad = unflatten(reg, arch_);
      const KfacDirection dir = kfac_direction(
          *state_.blocks,
          state_.coarse ? &*state_.coarse : nullptr, reg_grad, lr, cfg_.kappa);
      metrics.nu = dir.nu;
      state_.velocity =
          cfg_.momentum * state_.velocity + dir.nu * flatten(dir.direction);
      theta -= lr * state_.velocity;
      break;
    }
  }
  require_finite_vector(theta, "parameters");
  params.weights = unflatten_layers(theta, arch_);

  // Batch-norm scale/shift: Adam for the Adam baseline, heavy-ball SGD
  // otherwise.
  Vector bn = flatten_bn(params);
  if (bn.size() > 0) {
    const Vector bn_grad = flatten_bn_grads(grads);
    if (cfg_.kind == OptimizerKind::adam) {
      if (state_.bn_adam_m.size() != bn.size()) {
        state_.bn_adam_m = Vector::Zero(bn.size());
        state_.bn_adam_v = Vector::Zero(bn.size());
      }
      adam_update(bn, state_.bn_adam_m, state_.bn_adam_v, bn_grad, lr,
                  cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps,
                  cfg_.weight_decay, t);
    } else {
      if (state_.bn_velocity.size() != bn.size()) {
        state_.bn_velocity = Vector::Zero(bn.size());
      }
      sgd_update(bn, state_.bn_velocity, bn_grad, lr, cfg_.momentum,
                 cfg_.weight_decay);
    }
    require_finite_vector(bn, "batch-norm parameters");
    unflatten_bn(bn, params);
  }
  state_.iteration = t;
  return metrics;
}

// Checkpoint format (little-endian host order):
//   magic "TLKFCKPT", u32 version, u64 layer count, u64 dims...
//   then tagged sections written below in a fixed order.
namespace {

constexpr char kMagic[8] = {'T', 'L', 'K', 'F', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot write checkpoint " + path.string());
  }
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void mat(const Matrix& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  void vec(const Vector& v) { mat(v); }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw IoError("failed writing checkpoint " + path.string());
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot open checkpoint " + path.string());
  }
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw InputError("checkpoint " + path_.string() + " is truncated");
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    raw(&v, sizeof v);
    return v;
  }
  double f64() {
    double v = 0;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    std::string s(u64(), '\0');
    raw(s.data(), s.size());
    return s;
  }
  Matrix mat() {
    const auto rows = static_cast<Eigen::Index>(u64());
    const auto cols = static_cast<Eigen::Index>(u64());
    if (rows < 0 || cols < 0 || rows * cols > (Eigen::Index{1} << 32)) {
      throw InputError("checkpoint " + path_.string() + ": bad matrix header");
    }
    Matrix m(rows, cols);
    raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    return m;
  }
  Vector vec() {
    Matrix m = mat();
    if (m.cols() != 1 && m.size() != 0) {
      throw InputError("checkpoint " + path_.string() + ": expected a vector");
    }
    return Eigen::Map<Vector>(m.data(), m.size());
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const Architecture& arch,
                     const std::filesystem::path& path) {
  Writer w(path);
  w.raw(kMagic, sizeof kMagic);
  const std::uint32_t version = kCheckpointVersion;
  w.raw(&version, sizeof version);
  w.u64(arch.layer_dims.size());
  for (auto d : arch.layer_dims) w.u64(static_cast<std::uint64_t>(d));

  w.u64(static_cast<std::uint64_t>(ckpt.epoch));
  w.str(ckpt.rng_state);
  for (const auto& m : ckpt.params.weights) w.mat(m);
  for (const auto& bn : ckpt.params.bn) {
    w.u64(bn ? 1 : 0);
    if (bn) {
      w.vec(bn->scale);
      w.vec(bn->shift);
      w.vec(bn->running_mean);
      w.vec(bn->running_var);
    }
  }

  const auto& s = ckpt.state;
  w.u64(s.iteration);
  for (const Vector* v : {&s.velocity, &s.adam_m, &s.adam_v, &s.bn_velocity,
                          &s.bn_adam_m, &s.bn_adam_v}) {
    w.vec(*v);
  }

  const std::size_t layers = s.cov.num_layers();
  w.u64(layers);
  if (layers > 0) {
    w.u64(s.cov.mode() == CovMode::full ? 1 : 0);
    w.u64(s.cov.t());
    for (std::size_t p = 0; p < layers; ++p) {
      for (std::size_t q = 0; q <= p; ++q) {
        if (!s.cov.has_pair(p, q)) continue;
        w.mat(s.cov.act_cov(p, q));
        w.mat(s.cov.grad_cov(p, q));
      }
    }
  }

  w.u64(s.blocks ? 1 : 0);
  if (s.blocks) {
    w.f64(s.blocks->damping.lambda);
    w.u64(s.blocks->damping.mode == DampingMode::eigendecomposition ? 0 : 1);
    w.u64(s.blocks->layers.size());
    for (const auto& layer : s.blocks->layers) {
      if (const auto* eig = std::get_if<EigFactors>(&layer)) {
        w.u64(0);
        w.vec(eig->act.values);
        w.mat(eig->act.vectors);
        w.vec(eig->grad.values);
        w.mat(eig->grad.vectors);
      } else {
        const auto& tik = std::get<TikhonovFactors>(layer);
        w.u64(1);
        w.f64(tik.pi);
        w.mat(tik.act.lower());
        w.mat(tik.grad.lower());
      }
    }
  }

  w.u64(s.coarse ? 1 : 0);
  if (s.coarse) {
    w.mat(s.coarse->fisher);
    w.u64(s.coarse->disabled ? 1 : 0);
    w.f64(s.coarse->factor_damping);
    w.u64(s.coarse->factor ? 1 : 0);
    if (s.coarse->factor) w.mat(s.coarse->factor->lower());
  }
  w.finish(path);
}

Checkpoint load_checkpoint(const Architecture& arch,
                           const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw InputError(path.string() + " is not a checkpoint file");
  }
  std::uint32_t version = 0;
  r.raw(&version, sizeof version);
  if (version != kCheckpointVersion) {
    throw InputError(path.string() + ": unsupported checkpoint version " +
                     std::to_string(version));
  }
  const auto n_dims = r.u64();
  if (n_dims != arch.layer_dims.size()) {
    throw InputError(path.string() + ": architecture mismatch");
  }
  for (auto d : arch.layer_dims) {
    if (r.u64() != static_cast<std::uint64_t>(d)) {
      throw InputError(path.string() + ": architecture mismatch");
    }
  }

  Checkpoint ckpt;
  ckpt.epoch = static_cast<int>(r.u64());
  ckpt.rng_state = r.str();
  for (std::size_t i = 0; i < arch.num_layers(); ++i) {
    ckpt.params.weights.push_back(r.mat());
  }
  for (std::size_t i = 0; i < arch.num_layers(); ++i) {
    if (r.u64() != 0) {
      BatchNormParams bn;
      bn.scale = r.vec();
      bn.shift = r.vec();
      bn.running_mean = r.vec();
      bn.running_var = r.vec();
      ckpt.params.bn.emplace_back(std::move(bn));
    } else {
      ckpt.params.bn.emplace_back();
    }
  }

  auto& s = ckpt.state;
  s.iteration = r.u64();
  for (Vector* v : {&s.velocity, &s.adam_m, &s.adam_v, &s.bn_velocity,
                    &s.bn_adam_m, &s.bn_adam_v}) {
    *v = r.vec();
  }

  const auto layers = r.u64();
  if (layers > 0) {
    if (layers != arch.num_layers()) {
      throw InputError(path.string() + ": statistics layer count mismatch");
    }
    const CovMode mode = r.u64() != 0 ? CovMode::full : CovMode::diagonal;
    s.cov = CovState(arch, mode);
    s.cov.set_t(r.u64());
    for (std::size_t p = 0; p < layers; ++p) {
      for (std::size_t q = 0; q <= p; ++q) {
        if (!s.cov.has_pair(p, q)) continue;
        s.cov.set_act_cov(p, q, r.mat());
        s.cov.set_grad_cov(p, q, r.mat());
      }
    }
  }

  if (r.u64() != 0) {
    BlockInverse blocks;
    blocks.damping.lambda = r.f64();
    blocks.damping.mode = r.u64() == 0 ? DampingMode::eigendecomposition
                                       : DampingMode::factored_tikhonov;
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      if (r.u64() == 0) {
        EigFactors eig;
        eig.act.values = r.vec();
        eig.act.vectors = r.mat();
        eig.grad.values = r.vec();
        eig.grad.vectors = r.mat();
        blocks.layers.emplace_back(std::move(eig));
      } else {
        const double pi = r.f64();
        Cholesky act = Cholesky::from_lower(r.mat());
        Cholesky grad = Cholesky::from_lower(r.mat());
        blocks.layers.emplace_back(TikhonovFactors{pi, std::move(act), std::move(grad)});
      }
    }
    s.blocks = std::move(blocks);
  }

  if (r.u64() != 0) {
    CoarseState coarse;
    coarse.fisher = r.mat();
    coarse.disabled = r.u64() != 0;
    coarse.factor_damping = r.f64();
    if (r.u64() != 0) coarse.factor = Cholesky::from_lower(r.mat());
    s.coarse = std::move(coarse);
  }
  return ckpt;
}

}  // namespace tlkfac
