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

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "usfan/datasets.hpp"
#include "usfan/laplace.hpp"
#include "usfan/net.hpp"

namespace usfan {

enum class EvalMode { kMap, kPredictive };

struct MetricsReport {
  double accuracy = 0.0;
  Vector per_class_acc;      ///< one entry per label column
  double os = 0.0;           ///< mean per-class accuracy over all classes
  double os_star = 0.0;      ///< mean over the shared classes only
  Eigen::MatrixXi confusion; ///< rows true class, columns predicted
};

/// Classification metrics. In kPredictive mode the posterior is required
/// and class probabilities are the Monte Carlo predictive mean. When the
/// data carries K+1 label columns (open set) the optional entropy rule
/// assigns class K to rows whose prediction entropy exceeds the threshold;
/// os is then the (K+1)-class mean accuracy and os_star the K-class mean.
/// Argmax ties break to the lowest class index.
MetricsReport evaluate(const DenseNet& net, const LaplacePosterior* posterior,
                       const LabeledSet& data, EvalMode mode,
                       const LaplaceConfig& cfg,
                       std::optional<double> unknown_entropy_threshold,
                       Rng& rng);

/// Quantile of prediction entropies over a reference set; used to pick the
/// open-set rejection threshold from source data.
double entropy_quantile(const DenseNet& net, const LaplacePosterior* posterior,
                        const Matrix& inputs, EvalMode mode,
                        const LaplaceConfig& cfg, double quantile, Rng& rng);

struct EntropyHistogram {
  Vector bin_edges;            ///< bins + 1 edges, uniform on [0, log K]
  std::vector<int> correct;    ///< counts per bin, correct predictions
  std::vector<int> incorrect;
  double mean_entropy_correct = 0.0;
  double mean_entropy_incorrect = 0.0;
};

/// Per-correctness histograms of prediction entropy.
EntropyHistogram entropy_histogram(const DenseNet& net,
                                   const LaplacePosterior* posterior,
                                   const LabeledSet& data, int bins,
                                   EvalMode mode, const LaplaceConfig& cfg,
                                   Rng& rng);

struct GridBounds {
  double xmin = -10.0, xmax = 10.0, ymin = -10.0, ymax = 10.0;
};

struct GridCell {
  double x = 0.0, y = 0.0;
  int cls = 0;
  double confidence = 0.0;  ///< max class probability
  double weight = 0.0;      ///< exp(-entropy) of the same probabilities
};

/// Decision surface sampled at cell centres, row-major (y outer, x inner).
/// 2-D input models only. Sampling is seeded internally so identical
/// arguments give identical output.
std::vector<GridCell> decision_grid(const DenseNet& net,
                                    const LaplacePosterior* posterior,
                                    const GridBounds& bounds, int nx, int ny,
                                    const LaplaceConfig& cfg,
                                    std::uint64_t seed);

// CSV exports; numeric cells are shortest-round-trip so identical inputs
// produce byte-identical files.
void write_grid_csv(const std::vector<GridCell>& cells,
                    const std::string& path);
void write_histogram_csv(const EntropyHistogram& hist, const std::string& path);
void write_metrics_csv(const MetricsReport& report, const std::string& path);

}  // namespace usfan
