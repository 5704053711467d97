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

#include "usfan/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "usfan/errors.hpp"

namespace usfan {

namespace {

Matrix class_probabilities(const DenseNet& net,
                           const LaplacePosterior* posterior,
                           const Matrix& inputs, EvalMode mode,
                           const LaplaceConfig& cfg, Rng& rng) {
  const ForwardPass pass = forward(net, inputs);
  if (mode == EvalMode::kMap) return softmax(pass.logits);
  if (posterior == nullptr) {
    throw UsageError("predictive evaluation needs a fitted posterior");
  }
  return posterior->predictive_mean(augment_ones(pass.latents), cfg, rng);
}

int argmax_lowest(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  int best = 0;
  for (int c = 1; c < row.size(); ++c) {
    if (row(c) > row(best)) best = c;
  }
  return best;
}

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

MetricsReport evaluate(const DenseNet& net, const LaplacePosterior* posterior,
                       const LabeledSet& data, EvalMode mode,
                       const LaplaceConfig& cfg,
                       std::optional<double> unknown_entropy_threshold,
                       Rng& rng) {
  data.validate();
  const int label_classes = data.num_classes();
  const int model_classes = net.num_classes();
  const bool open_set = label_classes == model_classes + 1;
  if (!open_set && label_classes != model_classes) {
    throw DataError("label width must be K or K+1 for a K-class model");
  }

  const Matrix probs =
      class_probabilities(net, posterior, data.inputs, mode, cfg, rng);

  MetricsReport report;
  report.confusion = Eigen::MatrixXi::Zero(label_classes, label_classes);
  for (int i = 0; i < data.size(); ++i) {
    int pred = argmax_lowest(probs.row(i));
    if (open_set && unknown_entropy_threshold &&
        row_entropy(probs.row(i)) > *unknown_entropy_threshold) {
      pred = model_classes;  // the target-private class
    }
    report.confusion(data.label_of(i), pred) += 1;
  }

  report.per_class_acc = Vector::Zero(label_classes);
  int correct = 0;
  for (int c = 0; c < label_classes; ++c) {
    const int row_total = report.confusion.row(c).sum();
    if (row_total > 0) {
      report.per_class_acc(c) =
          static_cast<double>(report.confusion(c, c)) / row_total;
    }
    correct += report.confusion(c, c);
  }
  report.accuracy = static_cast<double>(correct) / data.size();
  report.os = report.per_class_acc.mean();
  const int shared = open_set ? model_classes : label_classes;
  report.os_star = report.per_class_acc.head(shared).mean();
  return report;
}

double entropy_quantile(const DenseNet& net, const LaplacePosterior* posterior,
                        const Matrix& inputs, EvalMode mode,
                        const LaplaceConfig& cfg, double quantile, Rng& rng) {
  if (quantile < 0.0 || quantile > 1.0) {
    throw UsageError("quantile must lie in [0, 1]");
  }
  if (inputs.rows() < 1) throw DataError("need at least one reference row");
  const Matrix probs =
      class_probabilities(net, posterior, inputs, mode, cfg, rng);
  std::vector<double> entropies(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    entropies[i] = row_entropy(probs.row(i));
  }
  std::sort(entropies.begin(), entropies.end());
  const auto idx = static_cast<std::size_t>(
      quantile * static_cast<double>(entropies.size() - 1) + 0.5);
  return entropies[std::min(idx, entropies.size() - 1)];
}

EntropyHistogram entropy_histogram(const DenseNet& net,
                                   const LaplacePosterior* posterior,
                                   const LabeledSet& data, int bins,
                                   EvalMode mode, const LaplaceConfig& cfg,
                                   Rng& rng) {
  if (bins < 1) throw UsageError("need at least one histogram bin");
  data.validate();
  const Matrix probs =
      class_probabilities(net, posterior, data.inputs, mode, cfg, rng);
  const double hmax = std::log(static_cast<double>(net.num_classes()));

  EntropyHistogram hist;
  hist.bin_edges = Vector::LinSpaced(bins + 1, 0.0, hmax);
  hist.correct.assign(bins, 0);
  hist.incorrect.assign(bins, 0);
  double sum_correct = 0.0, sum_incorrect = 0.0;
  int n_correct = 0, n_incorrect = 0;
  for (int i = 0; i < data.size(); ++i) {
    const double h = row_entropy(probs.row(i));
    int bin = static_cast<int>(h / hmax * bins);
    bin = std::clamp(bin, 0, bins - 1);  // h == log K lands in the last bin
    const bool is_correct = argmax_lowest(probs.row(i)) == data.label_of(i);
    if (is_correct) {
      ++hist.correct[bin];
      sum_correct += h;
      ++n_correct;
    } else {
      ++hist.incorrect[bin];
      sum_incorrect += h;
      ++n_incorrect;
    }
  }
  hist.mean_entropy_correct = n_correct ? sum_correct / n_correct : 0.0;
  hist.mean_entropy_incorrect = n_incorrect ? sum_incorrect / n_incorrect : 0.0;
  return hist;
}

std::vector<GridCell> decision_grid(const DenseNet& net,
                                    const LaplacePosterior* posterior,
                                    const GridBounds& bounds, int nx, int ny,
                                    const LaplaceConfig& cfg,
                                    std::uint64_t seed) {
  if (net.input_dim() != 2) {
    throw UsageError("decision grids are defined for 2-D input models only");
  }
  if (nx < 1 || ny < 1) throw UsageError("grid resolution must be positive");

  Matrix points(static_cast<Eigen::Index>(nx) * ny, 2);
  Eigen::Index row = 0;
  for (int iy = 0; iy < ny; ++iy) {
    for (int ix = 0; ix < nx; ++ix, ++row) {
      points(row, 0) =
          bounds.xmin + (ix + 0.5) * (bounds.xmax - bounds.xmin) / nx;
      points(row, 1) =
          bounds.ymin + (iy + 0.5) * (bounds.ymax - bounds.ymin) / ny;
    }
  }

  Rng rng(mix_seed(seed, 0x621Dull));
  const Matrix probs = class_probabilities(
      net, posterior, points, posterior ? EvalMode::kPredictive : EvalMode::kMap,
      cfg, rng);

  std::vector<GridCell> cells(static_cast<std::size_t>(nx) * ny);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    cells[i].x = points(r, 0);
    cells[i].y = points(r, 1);
    cells[i].cls = argmax_lowest(probs.row(r));
    cells[i].confidence = probs.row(r).maxCoeff();
    cells[i].weight = std::exp(-row_entropy(probs.row(r)));
  }
  return cells;
}

void write_grid_csv(const std::vector<GridCell>& cells,
                    const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << "x,y,class,confidence,weight\n";
  for (const GridCell& c : cells) {
    out << format_double(c.x) << ',' << format_double(c.y) << ',' << c.cls
        << ',' << format_double(c.confidence) << ',' << format_double(c.weight)
        << '\n';
  }
}

void write_histogram_csv(const EntropyHistogram& hist,
                         const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << "bin_lo,bin_hi,count_correct,count_incorrect\n";
  for (std::size_t b = 0; b + 1 < static_cast<std::size_t>(hist.bin_edges.size());
       ++b) {
    out << format_double(hist.bin_edges(static_cast<Eigen::Index>(b))) << ','
        << format_double(hist.bin_edges(static_cast<Eigen::Index>(b) + 1))
        << ',' << hist.correct[b] << ',' << hist.incorrect[b] << '\n';
  }
}

void write_metrics_csv(const MetricsReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << "metric,value\n";
  out << "accuracy," << format_double(report.accuracy) << '\n';
  out << "os," << format_double(report.os) << '\n';
  out << "os_star," << format_double(report.os_star) << '\n';
  for (Eigen::Index c = 0; c < report.per_class_acc.size(); ++c) {
    out << "acc_class_" << c << ','
        << format_double(report.per_class_acc(c)) << '\n';
  }
  for (Eigen::Index r = 0; r < report.confusion.rows(); ++r) {
    for (Eigen::Index c = 0; c < report.confusion.cols(); ++c) {
      out << "confusion_" << r << '_' << c << ',' << report.confusion(r, c)
          << '\n';
    }
  }
}

}  // namespace usfan
