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

// Python bindings for the core numerics and the training driver.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tlkfac/data.hpp"
#include "tlkfac/errors.hpp"
#include "tlkfac/experiment.hpp"
#include "tlkfac/linalg.hpp"
#include "tlkfac/network.hpp"
#include "tlkfac/precond.hpp"
#include "tlkfac/rng.hpp"
#include "tlkfac/stats.hpp"

namespace py = pybind11;

namespace tlkfac {
namespace {

// Small network handle: architecture plus parameters drawn from a seed.
struct Network {
  Architecture arch;
  Params params;

  Network(std::vector<Eigen::Index> dims, const std::string& activation,
          bool batchnorm, const std::string& loss_name, std::uint64_t seed)
      : arch(Architecture::mlp(std::move(dims), parse_activation(activation),
                               batchnorm, parse_loss(loss_name))) {
    arch.validate();
    Rng rng(seed);
    params = init_params(arch, rng);
  }

  Matrix forward(const Matrix& x, bool training) const {
    return tlkfac::forward(arch, params, x,
                           training ? Mode::training : Mode::evaluation)
        .output;
  }

  double loss(const Matrix& x, const Matrix& y, bool training) const {
    return tlkfac::loss(arch, forward(x, training), y);
  }

  std::vector<Matrix> gradient(const Matrix& x, const Matrix& y) const {
    BatchCache cache = tlkfac::forward(arch, params, x, Mode::training);
    return backward(arch, params, cache, y).weights.layers;
  }

  void set_weights(std::vector<Matrix> w) {
    if (w.size() != arch.num_layers()) {
      throw DimensionError("weights: expected one matrix per layer");
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i].rows() != arch.weight_rows(i) || w[i].cols() != arch.weight_cols(i)) {
        throw DimensionError("weights: layer " + std::to_string(i) +
                             " has the wrong shape");
      }
    }
    params.weights = std::move(w);
  }
};

// act[p][q] and grad[p][q] for q <= p, as in the lower-triangular store.
Matrix coarse_fisher(const std::vector<std::vector<Matrix>>& act,
                     const std::vector<std::vector<Matrix>>& grad) {
  const std::size_t n = act.size();
  if (grad.size() != n || n == 0) {
    throw DimensionError("coarse_fisher: act and grad need the same non-zero layer count");
  }
  Architecture arch;
  arch.loss = LossKind::mse;
  arch.layer_dims.push_back(act[0][0].rows() - 1);
  for (std::size_t p = 0; p < n; ++p) {
    if (act[p].size() != p + 1 || grad[p].size() != p + 1) {
      throw DimensionError("coarse_fisher: row " + std::to_string(p) +
                           " must hold " + std::to_string(p + 1) + " blocks");
    }
    arch.layer_dims.push_back(grad[p][p].rows());
    arch.activations.push_back(Activation::identity);
    arch.batchnorm.push_back(false);
  }
  CovState cov(arch, CovMode::full);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q <= p; ++q) {
      cov.set_act_cov(p, q, act[p][q]);
      cov.set_grad_cov(p, q, grad[p][q]);
    }
  }
  return assemble_coarse(cov).fisher;
}

py::dict row_to_dict(const EpochRow& r) {
  py::dict d;
  d["epoch"] = r.epoch;
  d["iteration"] = r.iteration;
  d["train_loss"] = r.train_loss;
  d["test_loss"] = r.test_loss;
  d["train_acc"] = r.train_acc;
  d["test_acc"] = r.test_acc;
  d["wall_seconds"] = r.wall_seconds;
  d["lr"] = r.lr;
  d["nu_mean"] = r.nu_mean;
  return d;
}

// Runs a training config given as JSON text. Files are written only when
// write_files is true.
py::dict train(const std::string& config_json, bool write_files) {
  const RunConfig cfg = parse_run_config(nlohmann::json::parse(config_json));
  RunResult result;
  {
    py::gil_scoped_release release;
    RunOptions opts;
    opts.write_files = write_files;
    result = run_training(cfg, opts);
  }
  py::list rows;
  for (const auto& r : result.rows) rows.append(row_to_dict(r));
  py::dict out;
  out["rows"] = rows;
  out["initial_train_loss"] = result.initial_train_loss;
  out["weights"] = result.params.weights;
  return out;
}

}  // namespace
}  // namespace tlkfac

PYBIND11_MODULE(_core, m) {
  using namespace tlkfac;
  m.doc() = "Two-level Kronecker-factored curvature optimizer";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
  py::register_exception<StateError>(m, "StateError", base.ptr());
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<SizeError>(m, "SizeError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  m.def("kron_apply",
        py::overload_cast<const Matrix&, const Matrix&, const Matrix&>(&kron_apply),
        py::arg("a"), py::arg("b"), py::arg("x"),
        "(A kron B) vec(X), returned in matrix form B X A^T");
  m.def("kron_elem_sum", &kron_elem_sum, py::arg("a"), py::arg("b"),
        "Sum of all entries of A kron B");
  m.def("dense_kron", &dense_kron, py::arg("a"), py::arg("b"),
        py::arg("cap") = kDenseKronCap, "Dense A kron B (size capped)");
  m.def(
      "sym_eig",
      [](const Matrix& a) {
        SymEig e = sym_eig(a);
        return py::make_tuple(e.values, e.vectors);
      },
      py::arg("a"), "Eigenvalues (ascending) and eigenvectors of a symmetric matrix");
  m.def("spd_solve", &spd_solve, py::arg("a"), py::arg("b"),
        "Solve A x = b by Cholesky; raises NumericalError naming the pivot");
  m.def("tikhonov_pi", &tikhonov_pi, py::arg("act"), py::arg("grad"));
  m.def("coarse_fisher", &coarse_fisher, py::arg("act"), py::arg("grad"),
        "Coarse Fisher from lower-triangular factor blocks act[p][q], grad[p][q]");
  m.def(
      "gen_planted",
      [](Eigen::Index d_in, Eigen::Index n_train, Eigen::Index n_test,
         std::uint64_t seed) {
        PlantedData d = gen_planted(d_in, n_train, n_test, seed);
        py::dict out;
        out["train_x"] = d.train.x;
        out["train_y"] = d.train.y;
        out["test_x"] = d.test.x;
        out["test_y"] = d.test.y;
        out["teacher"] = d.teacher;
        return out;
      },
      py::arg("d_in"), py::arg("n_train"), py::arg("n_test"), py::arg("seed"),
      "Planted linear-teacher dataset; inputs are features x samples");
  m.def("train", &train, py::arg("config_json"), py::arg("write_files") = false,
        "Train from a JSON run config; returns per-epoch rows and final weights");

  py::class_<Network>(m, "Network")
      .def(py::init<std::vector<Eigen::Index>, const std::string&, bool,
                    const std::string&, std::uint64_t>(),
           py::arg("dims"), py::arg("activation") = "tanh",
           py::arg("batchnorm") = false, py::arg("loss") = "bernoulli_logit",
           py::arg("seed") = 0)
      .def_property("weights",
                    [](const Network& n) { return n.params.weights; },
                    &Network::set_weights)
      .def_property_readonly("num_params",
                             [](const Network& n) { return n.arch.num_params(); })
      .def("forward", &Network::forward, py::arg("x"), py::arg("training") = true)
      .def("loss", &Network::loss, py::arg("x"), py::arg("y"),
           py::arg("training") = true)
      .def("gradient", &Network::gradient, py::arg("x"), py::arg("y"),
           "Batch-mean weight gradients, one matrix per layer");
}
