/*
 * Copyright (c) 2026, the usfan authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "usfan/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <Eigen/Cholesky>

#include "usfan/errors.hpp"
#include "usfan/rng.hpp"

namespace usfan {

int LabeledSet::label_of(int i) const {
  int best = 0;
  labels.row(i).maxCoeff(&best);
  return best;
}

void LabeledSet::validate() const {
  if (inputs.rows() < 1) throw DataError("dataset must hold at least one row");
  if (inputs.rows() != labels.rows()) {
    throw DataError("inputs and labels row counts differ");
  }
  for (Eigen::Index r = 0; r < labels.rows(); ++r) {
    int ones = 0;
    double sum = 0.0;
    for (Eigen::Index c = 0; c < labels.cols(); ++c) {
      const double v = labels(r, c);
      if (v == 1.0) ++ones;
      else if (v != 0.0) throw DataError("label rows must be one-hot");
      sum += v;
    }
    if (ones != 1 || sum != 1.0) throw DataError("label rows must be one-hot");
  }
}

void BlobSpec::validate() const {
  const std::size_t k = class_means.size();
  if (k < 2) throw DataError("need at least two classes");
  if (class_cov.size() != k || shift.size() != k) {
    throw DataError("means, covariances and shifts must have one entry per class");
  }
  if (n_per_class < 1) throw DataError("n_per_class must be positive");
  for (const auto& cov : class_cov) {
    Eigen::LLT<Eigen::Matrix2d> llt(cov);
    if (llt.info() != Eigen::Success) {
      throw DataError("class covariance is not symmetric positive definite");
    }
  }
}

namespace {

Matrix one_hot(const std::vector<int>& labels, int num_classes) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) m(i, labels[i]) = 1.0;
  return m;
}

// Draw order is pinned: class-major, point-major, two normals per point.
Matrix draw_blobs(const BlobSpec& spec, bool shifted, Rng& rng) {
  const int k = spec.num_classes();
  Matrix points(static_cast<Eigen::Index>(k) * spec.n_per_class, 2);
  Eigen::Index row = 0;
  for (int c = 0; c < k; ++c) {
    Eigen::Vector2d mean = spec.class_means[c];
    if (shifted) mean += spec.shift[c];
    const Eigen::Matrix2d chol =
        Eigen::LLT<Eigen::Matrix2d>(spec.class_cov[c]).matrixL();
    for (int i = 0; i < spec.n_per_class; ++i, ++row) {
      Eigen::Vector2d eps(rng.normal(), rng.normal());
      points.row(row) = (mean + chol * eps).transpose();
    }
  }
  return points;
}

}  // namespace

std::pair<LabeledSet, LabeledSet> gen_toy(const BlobSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, 0xDA7Aull));
  const int k = spec.num_classes();
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(k) * spec.n_per_class);
  for (int c = 0; c < k; ++c) {
    labels.insert(labels.end(), spec.n_per_class, c);
  }
  LabeledSet source{draw_blobs(spec, false, rng), one_hot(labels, k)};
  LabeledSet target{draw_blobs(spec, true, rng), one_hot(labels, k)};
  return {std::move(source), std::move(target)};
}

std::pair<LabeledSet, LabeledSet> gen_open_set(const OpenSetSpec& spec) {
  auto [source, target] = gen_toy(spec.base);
  if (spec.n_private == 0) return {std::move(source), std::move(target)};
  if (spec.n_private < 0) throw DataError("n_private must be non-negative");
  Eigen::LLT<Eigen::Matrix2d> llt(spec.private_cov);
  if (llt.info() != Eigen::Success) {
    throw DataError("private covariance is not symmetric positive definite");
  }

  const int k = spec.base.num_classes();
  Rng rng(mix_seed(spec.base.seed, 0x09E2ull));
  const Eigen::Matrix2d chol = llt.matrixL();
  Matrix private_points(spec.n_private, 2);
  for (int i = 0; i < spec.n_private; ++i) {
    Eigen::Vector2d eps(rng.normal(), rng.normal());
    private_points.row(i) = (spec.private_mean + chol * eps).transpose();
  }

  const Eigen::Index n_shared = target.inputs.rows();
  Matrix inputs(n_shared + spec.n_private, 2);
  inputs.topRows(n_shared) = target.inputs;
  inputs.bottomRows(spec.n_private) = private_points;
  Matrix labels = Matrix::Zero(n_shared + spec.n_private, k + 1);
  labels.topLeftCorner(n_shared, k) = target.labels;
  labels.bottomRightCorner(spec.n_private, 1).setOnes();
  return {std::move(source), LabeledSet{std::move(inputs), std::move(labels)}};
}

namespace {

// Committed geometry of the 3-class toy study. Class 0 is the cluster that
// crosses under the strong shift; class 1 is wide along x so its decision
// region extends past its data; class 2 is elongated towards the three-way
// junction so its lower tail is genuinely ambiguous.
BlobSpec preset_base(std::uint64_t seed) {
  BlobSpec spec;
  spec.class_means = {{-6.0, 0.0}, {6.0, 0.0}, {0.0, 9.5}};
  spec.class_cov = {
      (Eigen::Matrix2d() << 0.81, 0.0, 0.0, 0.81).finished(),
      (Eigen::Matrix2d() << 6.76, 0.0, 0.0, 1.21).finished(),
      (Eigen::Matrix2d() << 1.21, 0.0, 0.0, 9.00).finished()};
  spec.shift.assign(3, Eigen::Vector2d::Zero());
  spec.n_per_class = 150;
  spec.seed = seed;
  return spec;
}

// Mild: a common small translation. Strong: class 0 crosses the class-1
// region and lands beyond its data, class 1 slides towards the shared
// boundary, class 2 sinks deeper into the junction.
const Eigen::Vector2d kMildShift[3] = {{0.9, 0.55}, {0.9, 0.55}, {0.9, 0.55}};
const Eigen::Vector2d kStrongShift[3] = {{11.0, -4.9}, {-3.3, 0.25}, {0.4, -2.0}};

}  // namespace

BlobSpec mild_preset(std::uint64_t seed) {
  BlobSpec spec = preset_base(seed);
  for (int c = 0; c < 3; ++c) spec.shift[c] = kMildShift[c];
  return spec;
}

BlobSpec strong_preset(std::uint64_t seed) {
  BlobSpec spec = preset_base(seed);
  for (int c = 0; c < 3; ++c) spec.shift[c] = kStrongShift[c];
  return spec;
}

BlobSpec preset_with_scale(double shift_scale, std::uint64_t seed) {
  if (shift_scale == 0.0) return mild_preset(seed);
  if (shift_scale == 1.0) return strong_preset(seed);
  BlobSpec spec = preset_base(seed);
  for (int c = 0; c < 3; ++c) {
    spec.shift[c] = kMildShift[c] + shift_scale * (kStrongShift[c] - kMildShift[c]);
  }
  return spec;
}

OpenSetSpec open_set_preset(std::uint64_t seed) {
  OpenSetSpec spec;
  spec.base = strong_preset(seed);
  spec.n_private = 100;
  spec.private_mean = {-10.0, 12.0};
  spec.private_cov = Eigen::Matrix2d::Identity() * 0.81;
  return spec;
}


bool certify_mild_shift(const BlobSpec& spec) {
  double min_sep = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < spec.class_means.size(); ++i) {
    for (std::size_t j = i + 1; j < spec.class_means.size(); ++j) {
      min_sep = std::min(min_sep,
                         (spec.class_means[i] - spec.class_means[j]).norm());
    }
  }
  for (const auto& s : spec.shift) {
    if (s.norm() > 0.25 * min_sep) return false;
  }
  return true;
}

bool certify_strong_shift(const BlobSpec& spec) {
  // Pooled source scale: centroid scatter plus mean within-class variance.
  Eigen::Vector2d grand = Eigen::Vector2d::Zero();
  for (const auto& m : spec.class_means) grand += m;
  grand /= static_cast<double>(spec.class_means.size());
  Eigen::Matrix2d scatter = Eigen::Matrix2d::Zero();
  for (std::size_t c = 0; c < spec.class_means.size(); ++c) {
    const Eigen::Vector2d d = spec.class_means[c] - grand;
    scatter += d * d.transpose() + spec.class_cov[c];
  }
  scatter /= static_cast<double>(spec.class_means.size());
  const double pooled_sigma =
      std::sqrt(Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d>(scatter)
                    .eigenvalues()
                    .maxCoeff());

  for (std::size_t c = 0; c < spec.class_means.size(); ++c) {
    const Eigen::Vector2d target_centroid = spec.class_means[c] + spec.shift[c];
    std::size_t nearest = c;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < spec.class_means.size(); ++j) {
      const double d = (target_centroid - spec.class_means[j]).norm();
      if (d < best) {
        best = d;
        nearest = j;
      }
    }
    if (nearest != c && best <= pooled_sigma) return true;
  }
  return false;
}

namespace {

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& cell, const std::string& path, int line) {
  double v = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  const auto res = std::from_chars(begin, end, v);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw DataError(path + ":" + std::to_string(line) +
                    ": non-numeric cell '" + cell + "'");
  }
  return v;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

std::variant<LabeledSet, UnlabeledSet> load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  const std::vector<std::string> header = split_line(line);
  bool has_label = !header.empty() && header.back() == "label";
  const int dim = static_cast<int>(header.size()) - (has_label ? 1 : 0);
  if (dim < 1) throw DataError(path + ": no feature columns");
  for (int i = 0; i < dim; ++i) {
    if (header[i] != "f" + std::to_string(i)) {
      throw DataError(path + ": unexpected header column '" + header[i] + "'");
    }
  }

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_line(line);
    if (static_cast<int>(cells.size()) != dim + (has_label ? 1 : 0)) {
      throw DataError(path + ":" + std::to_string(line_no) + ": ragged row");
    }
    std::vector<double> row(dim);
    for (int i = 0; i < dim; ++i) row[i] = parse_double(cells[i], path, line_no);
    rows.push_back(std::move(row));
    if (has_label) {
      const double lv = parse_double(cells.back(), path, line_no);
      const int li = static_cast<int>(lv);
      if (lv != static_cast<double>(li) || li < 0) {
        throw DataError(path + ":" + std::to_string(line_no) +
                        ": label must be a non-negative integer");
      }
      labels.push_back(li);
    }
  }
  if (rows.empty()) throw DataError(path + ": no data rows");

  Matrix inputs(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (int c = 0; c < dim; ++c) inputs(static_cast<Eigen::Index>(r), c) = rows[r][c];
  }
  if (!has_label) return UnlabeledSet{std::move(inputs)};

  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  return LabeledSet{std::move(inputs), one_hot(labels, k)};
}

namespace {

void write_csv(const Matrix& inputs, const LabeledSet* labeled,
               const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  for (Eigen::Index c = 0; c < inputs.cols(); ++c) {
    if (c) out << ',';
    out << 'f' << c;
  }
  if (labeled) out << ",label";
  out << '\n';
  for (Eigen::Index r = 0; r < inputs.rows(); ++r) {
    for (Eigen::Index c = 0; c < inputs.cols(); ++c) {
      if (c) out << ',';
      out << format_double(inputs(r, c));
    }
    if (labeled) out << ',' << labeled->label_of(static_cast<int>(r));
    out << '\n';
  }
}

}  // namespace

void save_csv(const LabeledSet& data, const std::string& path) {
  write_csv(data.inputs, &data, path);
}

void save_csv(const UnlabeledSet& data, const std::string& path) {
  write_csv(data.inputs, nullptr, path);
}

}  // namespace usfan
