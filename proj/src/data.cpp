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

#include "tlkfac/data.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "tlkfac/errors.hpp"

namespace tlkfac {

namespace {

Dataset draw_inputs(const Vector& teacher, Eigen::Index n, Rng& rng,
                    Split split, std::uint64_t seed) {
  const Eigen::Index d = teacher.size();
  Dataset ds;
  ds.x.resize(d, n);
  ds.y.resize(1, n);
  ds.split = split;
  ds.seed = seed;
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < d; ++i) ds.x(i, j) = rng.normal();
    ds.y(0, j) = teacher.dot(ds.x.col(j)) > 0.0 ? 1.0 : 0.0;
  }
  return ds;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

PlantedData gen_planted(Eigen::Index d_in, Eigen::Index n_train,
                        Eigen::Index n_test, std::uint64_t seed) {
  if (d_in < 1 || n_train < 1 || n_test < 1) {
    throw ConfigError("gen_planted: d_in, n_train and n_test must be >= 1");
  }
  Rng rng(seed);
  PlantedData out;
  out.seed = seed;
  out.teacher.resize(d_in);
  for (Eigen::Index i = 0; i < d_in; ++i) out.teacher(i) = rng.normal();
  out.train = draw_inputs(out.teacher, n_train, rng, Split::train, seed);
  out.test = draw_inputs(out.teacher, n_test, rng, Split::test, seed);
  return out;
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) {
    throw InputError(path.string() + ": missing header line");
  }
  const std::size_t columns = split_line(line).size();
  if (columns < 2) {
    throw InputError(path.string() + ": line 1: need at least one feature and a label column");
  }

  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != columns) {
      throw InputError(path.string() + ": line " + std::to_string(line_no) +
                       ": expected " + std::to_string(columns) + " cells, got " +
                       std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < columns; ++c) {
      const std::string cell = trim(cells[c]);
      double v = 0.0;
      const auto [ptr, ec] =
          std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size() ||
          !std::isfinite(v)) {
        throw InputError(path.string() + ": line " + std::to_string(line_no) +
                         ", column " + std::to_string(c + 1) +
                         ": not a finite number: '" + cell + "'");
      }
      values.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw InputError(path.string() + ": no data rows");

  Dataset ds;
  const auto n = static_cast<Eigen::Index>(rows);
  const auto d = static_cast<Eigen::Index>(columns - 1);
  ds.x.resize(d, n);
  ds.y.resize(1, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const std::size_t base = static_cast<std::size_t>(j) * columns;
    for (Eigen::Index i = 0; i < d; ++i) {
      ds.x(i, j) = values[base + static_cast<std::size_t>(i)];
    }
    ds.y(0, j) = values[base + columns - 1];
  }
  return ds;
}

void save_csv(const Dataset& data, const std::filesystem::path& path) {
  if (data.y.rows() != 1) {
    throw DimensionError("save_csv: only single-column labels are supported");
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (Eigen::Index i = 0; i < data.dim(); ++i) out << "x" << i << ",";
  out << "y\n";
  for (Eigen::Index j = 0; j < data.size(); ++j) {
    for (Eigen::Index i = 0; i < data.dim(); ++i) {
      out << format_double(data.x(i, j)) << ",";
    }
    out << format_double(data.y(0, j)) << "\n";
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void save_planted(const PlantedData& data, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  save_csv(data.train, dir / "train.csv");
  save_csv(data.test, dir / "test.csv");
  nlohmann::json meta;
  meta["seed"] = data.seed;
  meta["d_in"] = data.teacher.size();
  meta["n_train"] = data.train.size();
  meta["n_test"] = data.test.size();
  std::vector<std::string> w;
  for (Eigen::Index i = 0; i < data.teacher.size(); ++i) {
    w.push_back(format_double(data.teacher(i)));
  }
  meta["teacher"] = w;
  std::ofstream out(dir / "teacher.json");
  if (!out) throw IoError("cannot write " + (dir / "teacher.json").string());
  out << meta.dump(2) << "\n";
}

PlantedData load_planted(const std::filesystem::path& dir) {
  PlantedData data;
  std::ifstream in(dir / "teacher.json");
  if (!in) throw IoError("cannot open " + (dir / "teacher.json").string());
  nlohmann::json meta;
  try {
    in >> meta;
    data.seed = meta.at("seed").get<std::uint64_t>();
    const auto w = meta.at("teacher").get<std::vector<std::string>>();
    data.teacher.resize(static_cast<Eigen::Index>(w.size()));
    for (std::size_t i = 0; i < w.size(); ++i) {
      data.teacher(static_cast<Eigen::Index>(i)) = std::stod(w[i]);
    }
  } catch (const std::exception& e) {
    throw InputError((dir / "teacher.json").string() + ": " + e.what());
  }
  data.train = load_csv(dir / "train.csv");
  data.test = load_csv(dir / "test.csv");
  data.train.split = Split::train;
  data.test.split = Split::test;
  data.train.seed = data.test.seed = data.seed;
  return data;
}

std::vector<std::vector<Eigen::Index>> minibatches(Eigen::Index n,
                                                   Eigen::Index batch_size,
                                                   Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  const auto order = rng.permutation(static_cast<std::size_t>(n));
  std::vector<std::vector<Eigen::Index>> batches;
  for (Eigen::Index start = 0; start < n; start += batch_size) {
    const Eigen::Index end = std::min(n, start + batch_size);
    std::vector<Eigen::Index> batch;
    batch.reserve(static_cast<std::size_t>(end - start));
    for (Eigen::Index k = start; k < end; ++k) {
      batch.push_back(static_cast<Eigen::Index>(order[static_cast<std::size_t>(k)]));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

Batch gather(const Dataset& data, const std::vector<Eigen::Index>& indices) {
  Batch b;
  b.x.resize(data.x.rows(), static_cast<Eigen::Index>(indices.size()));
  b.y.resize(data.y.rows(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto col = static_cast<Eigen::Index>(k);
    b.x.col(col) = data.x.col(indices[k]);
    b.y.col(col) = data.y.col(indices[k]);
  }
  return b;
}

double positive_fraction(const Dataset& data) {
  if (data.y.size() == 0) return 0.0;
  return static_cast<double>((data.y.array() == 1.0).count()) /
         static_cast<double>(data.y.size());
}

}  // namespace tlkfac
