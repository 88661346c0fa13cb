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

#include "tlkfac/network.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tlkfac/errors.hpp"

namespace tlkfac {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::bernoulli_logit: return "bernoulli_logit";
    case LossKind::softmax_ce: return "softmax_ce";
    case LossKind::mse: return "mse";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity" || name == "linear") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + std::string(name) +
                    "' (valid: identity, relu, tanh)");
}

LossKind parse_loss(std::string_view name) {
  if (name == "bernoulli_logit") return LossKind::bernoulli_logit;
  if (name == "softmax_ce") return LossKind::softmax_ce;
  if (name == "mse") return LossKind::mse;
  throw ConfigError("unknown loss '" + std::string(name) +
                    "' (valid: bernoulli_logit, softmax_ce, mse)");
}

Architecture Architecture::mlp(std::vector<Eigen::Index> dims,
                               Activation hidden, bool hidden_batchnorm,
                               LossKind loss) {
  Architecture arch;
  arch.layer_dims = std::move(dims);
  const std::size_t n = arch.layer_dims.empty() ? 0 : arch.layer_dims.size() - 1;
  arch.activations.assign(n, hidden);
  arch.batchnorm.assign(n, hidden_batchnorm);
  if (n > 0) {
    arch.activations.back() = Activation::identity;
    arch.batchnorm.back() = false;
  }
  arch.loss = loss;
  return arch;
}

std::vector<Eigen::Index> Architecture::layer_offsets() const {
  std::vector<Eigen::Index> offsets(num_layers() + 1, 0);
  for (std::size_t i = 0; i < num_layers(); ++i) {
    offsets[i + 1] = offsets[i] + layer_size(i);
  }
  return offsets;
}

void Architecture::validate() const {
  if (layer_dims.size() < 2) {
    throw ConfigError("architecture.layer_dims: need at least 2 entries (one layer)");
  }
  for (std::size_t i = 0; i < layer_dims.size(); ++i) {
    if (layer_dims[i] < 1) {
      throw ConfigError("architecture.layer_dims[" + std::to_string(i) +
                        "]: must be >= 1");
    }
  }
  if (activations.size() != num_layers() || batchnorm.size() != num_layers()) {
    throw ConfigError("architecture: need one activation and batchnorm flag per layer");
  }
  if (activations.back() != Activation::identity) {
    throw ConfigError("architecture: output layer activation must be identity");
  }
  if (loss == LossKind::bernoulli_logit && output_dim() != 1) {
    throw ConfigError("architecture: bernoulli_logit needs output dimension 1");
  }
  if (loss == LossKind::softmax_ce && output_dim() < 2) {
    throw ConfigError("architecture: softmax_ce needs output dimension >= 2");
  }
}

Params init_params(const Architecture& arch, Rng& rng) {
  arch.validate();
  Params p;
  for (std::size_t i = 0; i < arch.num_layers(); ++i) {
    const Eigen::Index rows = arch.weight_rows(i);
    const Eigen::Index fan_in = arch.layer_dims[i];
    const double stddev = std::sqrt(1.0 / static_cast<double>(fan_in));
    Matrix w = Matrix::Zero(rows, fan_in + 1);
    for (Eigen::Index c = 0; c < fan_in; ++c) {
      for (Eigen::Index r = 0; r < rows; ++r) w(r, c) = stddev * rng.normal();
    }
    p.weights.push_back(std::move(w));
    if (arch.batchnorm[i]) {
      p.bn.push_back(BatchNormParams{Vector::Ones(rows), Vector::Zero(rows),
                                     Vector::Zero(rows), Vector::Ones(rows)});
    } else {
      p.bn.emplace_back();
    }
  }
  return p;
}

Vector flatten(const std::vector<Matrix>& layers) {
  Eigen::Index n = 0;
  for (const auto& m : layers) n += m.size();
  Vector v(n);
  Eigen::Index at = 0;
  for (const auto& m : layers) {
    v.segment(at, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
    at += m.size();
  }
  return v;
}

Vector flatten(const GradVec& g) { return flatten(g.layers); }

std::vector<Matrix> unflatten_layers(const Vector& v, const Architecture& arch) {
  const auto offsets = arch.layer_offsets();
  if (v.size() != offsets.back()) {
    throw DimensionError("unflatten: length " + std::to_string(v.size()) +
                         ", expected " + std::to_string(offsets.back()));
  }
  std::vector<Matrix> layers;
  layers.reserve(arch.num_layers());
  for (std::size_t i = 0; i < arch.num_layers(); ++i) {
    layers.push_back(unvec(v.segment(offsets[i], arch.layer_size(i)),
                           arch.weight_rows(i), arch.weight_cols(i)));
  }
  return layers;
}

GradVec unflatten(const Vector& v, const Architecture& arch) {
  return GradVec{unflatten_layers(v, arch)};
}

namespace {

Matrix activate(Activation a, const Matrix& z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::relu: return z.cwiseMax(0.0);
    case Activation::tanh: return z.array().tanh().matrix();
  }
  return z;
}

// Multiplies upstream derivatives by the activation's derivative at z.
Matrix activation_backward(Activation a, const Matrix& z, const Matrix& upstream) {
  switch (a) {
    case Activation::identity: return upstream;
    case Activation::relu:
      return (z.array() > 0.0).select(upstream, 0.0);
    case Activation::tanh: {
      const auto t = z.array().tanh();
      return (upstream.array() * (1.0 - t * t)).matrix();
    }
  }
  return upstream;
}

Matrix with_ones_row(const Matrix& a) {
  Matrix out(a.rows() + 1, a.cols());
  out.topRows(a.rows()) = a;
  out.row(a.rows()).setOnes();
  return out;
}

void check_params(const Architecture& arch, const Params& params) {
  if (params.weights.size() != arch.num_layers() ||
      params.bn.size() != arch.num_layers()) {
    throw StateError("params: layer count does not match architecture");
  }
  for (std::size_t i = 0; i < arch.num_layers(); ++i) {
    const auto& w = params.weights[i];
    if (w.rows() != arch.weight_rows(i) || w.cols() != arch.weight_cols(i)) {
      std::ostringstream out;
      out << "params: weight " << i << " is " << w.rows() << "x" << w.cols()
          << ", expected " << arch.weight_rows(i) << "x" << arch.weight_cols(i);
      throw DimensionError(out.str());
    }
    if (arch.batchnorm[i] != params.bn[i].has_value()) {
      throw StateError("params: batch-norm parameters missing or unexpected at layer " +
                       std::to_string(i));
    }
  }
}

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Eigen::Index class_index(double label, Eigen::Index classes, Eigen::Index col) {
  const double rounded = std::round(label);
  if (rounded != label || rounded < 0 ||
      rounded >= static_cast<double>(classes)) {
    std::ostringstream out;
    out << "label " << label << " in column " << col
        << " is not a class index in [0, " << classes << ")";
    throw InputError(out.str());
  }
  return static_cast<Eigen::Index>(rounded);
}

void check_labels(const Architecture& arch, const Matrix& output, const Matrix& y) {
  const Eigen::Index rows = arch.loss == LossKind::mse ? output.rows() : 1;
  if (y.rows() != rows || y.cols() != output.cols()) {
    std::ostringstream out;
    out << "labels are " << y.rows() << "x" << y.cols() << ", expected " << rows
        << "x" << output.cols();
    throw DimensionError(out.str());
  }
  if (arch.loss == LossKind::bernoulli_logit) {
    for (Eigen::Index b = 0; b < y.cols(); ++b) {
      if (y(0, b) != 0.0 && y(0, b) != 1.0) {
        std::ostringstream out;
        out << "binary label " << y(0, b) << " in column " << b << " is not 0 or 1";
        throw InputError(out.str());
      }
    }
  }
}

// Per-sample derivative of the negative log-likelihood w.r.t. the output.
Matrix output_derivative(const Architecture& arch, const Matrix& output,
                         const Matrix& y) {
  check_labels(arch, output, y);
  Matrix d(output.rows(), output.cols());
  switch (arch.loss) {
    case LossKind::bernoulli_logit:
      for (Eigen::Index b = 0; b < output.cols(); ++b) {
        d(0, b) = sigmoid(output(0, b)) - y(0, b);
      }
      break;
    case LossKind::softmax_ce:
      for (Eigen::Index b = 0; b < output.cols(); ++b) {
        const double shift = output.col(b).maxCoeff();
        Vector e = (output.col(b).array() - shift).exp().matrix();
        d.col(b) = e / e.sum();
        d(class_index(y(0, b), output.rows(), b), b) -= 1.0;
      }
      break;
    case LossKind::mse:
      d = output - y;
      break;
  }
  return d;
}

}  // namespace

BatchCache forward(const Architecture& arch, const Params& params,
                   const Matrix& x, Mode mode) {
  check_params(arch, params);
  if (x.rows() != arch.input_dim()) {
    throw DimensionError("forward: input has " + std::to_string(x.rows()) +
                         " rows, expected " + std::to_string(arch.input_dim()));
  }
  if (x.cols() < 1) throw DimensionError("forward: empty batch");
  require_finite(x, "forward input");

  const std::size_t n_layers = arch.num_layers();
  const double batch = static_cast<double>(x.cols());
  BatchCache cache;
  cache.training = mode == Mode::training;
  cache.a_bar.reserve(n_layers);
  cache.s.reserve(n_layers);
  cache.z.reserve(n_layers);
  cache.bn.resize(n_layers);

  Matrix a = x;
  for (std::size_t i = 0; i < n_layers; ++i) {
    cache.a_bar.push_back(with_ones_row(a));
    cache.s.push_back(params.weights[i] * cache.a_bar.back());
    const Matrix& s = cache.s.back();
    if (arch.batchnorm[i]) {
      const auto& bn = *params.bn[i];
      BatchNormCache bc;
      if (cache.training) {
        bc.mean = s.rowwise().mean();
        bc.var = (s.colwise() - bc.mean).array().square().rowwise().sum() / batch;
      } else {
        bc.mean = bn.running_mean;
        bc.var = bn.running_var;
      }
      bc.inv_std = (bc.var.array() + kBatchNormEps).rsqrt();
      bc.normalized =
          ((s.colwise() - bc.mean).array().colwise() * bc.inv_std.array()).matrix();
      cache.z.push_back(
          ((bc.normalized.array().colwise() * bn.scale.array()).colwise() +
           bn.shift.array())
              .matrix());
      cache.bn[i] = std::move(bc);
    } else {
      cache.z.push_back(s);
    }
    a = activate(arch.activations[i], cache.z.back());
  }
  cache.output = std::move(a);
  return cache;
}

Gradients backward(const Architecture& arch, const Params& params,
                   BatchCache& cache, const Matrix& y) {
  check_params(arch, params);
  const std::size_t n_layers = arch.num_layers();
  if (cache.a_bar.size() != n_layers || cache.s.size() != n_layers ||
      cache.z.size() != n_layers) {
    throw StateError("backward: cache does not come from a forward pass of this architecture");
  }
  for (std::size_t i = 0; i < n_layers; ++i) {
    if (cache.a_bar[i].rows() != arch.weight_cols(i) ||
        cache.s[i].rows() != arch.weight_rows(i)) {
      throw StateError("backward: cache shapes do not match params at layer " +
                       std::to_string(i));
    }
  }

  const Eigen::Index batch = cache.batch_size();
  const double inv_batch = 1.0 / static_cast<double>(batch);
  Gradients grads;
  grads.weights.layers.resize(n_layers);
  grads.bn.resize(n_layers);
  cache.g.assign(n_layers, Matrix());

  // Derivatives here are of the per-sample loss (B times the batch-mean
  // loss derivative), so that every layer's g has per-sample scale.
  Matrix upstream = output_derivative(arch, cache.output, y);
  for (std::size_t k = n_layers; k-- > 0;) {
    Matrix dz = activation_backward(arch.activations[k], cache.z[k], upstream);
    Matrix g;
    if (arch.batchnorm[k]) {
      if (!cache.training) {
        throw StateError("backward: evaluation-mode cache cannot be differentiated through batch norm");
      }
      const auto& bn = *params.bn[k];
      const auto& bc = *cache.bn[k];
      grads.bn[k] = BatchNormGrad{
          (dz.cwiseProduct(bc.normalized)).rowwise().sum() * inv_batch,
          dz.rowwise().sum() * inv_batch};
      const Matrix dxhat = (dz.array().colwise() * bn.scale.array()).matrix();
      const Vector mean_dxhat = dxhat.rowwise().mean();
      const Vector mean_dxhat_xhat = dxhat.cwiseProduct(bc.normalized).rowwise().mean();
      g = (((dxhat.colwise() - mean_dxhat).array() -
            bc.normalized.array().colwise() * mean_dxhat_xhat.array())
               .colwise() *
           bc.inv_std.array())
              .matrix();
    } else {
      g = std::move(dz);
    }
    grads.weights.layers[k] = g * cache.a_bar[k].transpose() * inv_batch;
    if (k > 0) {
      upstream = params.weights[k].leftCols(arch.layer_dims[k]).transpose() * g;
    }
    cache.g[k] = std::move(g);
  }
  return grads;
}

double loss(const Architecture& arch, const Matrix& output, const Matrix& y) {
  check_labels(arch, output, y);
  double total = 0.0;
  switch (arch.loss) {
    case LossKind::bernoulli_logit:
      for (Eigen::Index b = 0; b < output.cols(); ++b) {
        const double z = output(0, b);
        total += softplus(z) - y(0, b) * z;
      }
      break;
    case LossKind::softmax_ce:
      for (Eigen::Index b = 0; b < output.cols(); ++b) {
        const double shift = output.col(b).maxCoeff();
        const double lse =
            shift + std::log((output.col(b).array() - shift).exp().sum());
        total += lse - output(class_index(y(0, b), output.rows(), b), b);
      }
      break;
    case LossKind::mse:
      total = 0.5 * (output - y).squaredNorm();
      break;
  }
  return total / static_cast<double>(output.cols());
}

double accuracy(const Architecture& arch, const Matrix& output, const Matrix& y) {
  check_labels(arch, output, y);
  if (arch.loss == LossKind::mse) return std::nan("");
  Eigen::Index correct = 0;
  for (Eigen::Index b = 0; b < output.cols(); ++b) {
    if (arch.loss == LossKind::bernoulli_logit) {
      const double predicted = output(0, b) > 0.0 ? 1.0 : 0.0;
      correct += predicted == y(0, b) ? 1 : 0;
    } else {
      Eigen::Index best = 0;
      output.col(b).maxCoeff(&best);
      correct += best == class_index(y(0, b), output.rows(), b) ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(output.cols());
}

Matrix sample_labels(const Architecture& arch, const Matrix& output, Rng& rng) {
  switch (arch.loss) {
    case LossKind::bernoulli_logit: {
      Matrix y(1, output.cols());
      for (Eigen::Index b = 0; b < output.cols(); ++b) {
        y(0, b) = rng.uniform() < sigmoid(output(0, b)) ? 1.0 : 0.0;
      }
      return y;
    }
    case LossKind::softmax_ce: {
      Matrix y(1, output.cols());
      for (Eigen::Index b = 0; b < output.cols(); ++b) {
        const double shift = output.col(b).maxCoeff();
        const Vector e = (output.col(b).array() - shift).exp().matrix();
        const double u = rng.uniform() * e.sum();
        double acc = 0.0;
        Eigen::Index k = 0;
        for (; k + 1 < e.size(); ++k) {
          acc += e(k);
          if (u < acc) break;
        }
        y(0, b) = static_cast<double>(k);
      }
      return y;
    }
    case LossKind::mse: {
      Matrix y = output;
      for (Eigen::Index b = 0; b < y.cols(); ++b) {
        for (Eigen::Index r = 0; r < y.rows(); ++r) y(r, b) += rng.normal();
      }
      return y;
    }
  }
  return {};
}

void update_running_stats(Params& params, const BatchCache& cache) {
  if (!cache.training) return;
  const double batch = static_cast<double>(cache.batch_size());
  const double unbias = batch > 1.0 ? batch / (batch - 1.0) : 1.0;
  for (std::size_t i = 0; i < params.bn.size() && i < cache.bn.size(); ++i) {
    if (!params.bn[i] || !cache.bn[i]) continue;
    auto& bn = *params.bn[i];
    const auto& bc = *cache.bn[i];
    bn.running_mean = (1.0 - kBatchNormMomentum) * bn.running_mean +
                      kBatchNormMomentum * bc.mean;
    bn.running_var = (1.0 - kBatchNormMomentum) * bn.running_var +
                     kBatchNormMomentum * unbias * bc.var;
  }
}

}  // namespace tlkfac
