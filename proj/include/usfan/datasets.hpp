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

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "usfan/net.hpp"

namespace usfan {

/// Inputs with one-hot labels. Label rows sum to 1 with a single unit entry.
struct LabeledSet {
  Matrix inputs;  ///< n x D
  Matrix labels;  ///< n x K (or K+1 in the open-set target)

  int size() const { return static_cast<int>(inputs.rows()); }
  int num_classes() const { return static_cast<int>(labels.cols()); }
  /// Class index of row i (position of the 1).
  int label_of(int i) const;
  void validate() const;  ///< throws DataError on malformed labels
};

struct UnlabeledSet {
  Matrix inputs;
  int size() const { return static_cast<int>(inputs.rows()); }
};

/// Seeded Gaussian-blob generator for the synthetic shift study.
/// Source class c is N(mean_c, cov_c); the target domain draws fresh points
/// from N(mean_c + shift_c, cov_c).
struct BlobSpec {
  std::vector<Eigen::Vector2d> class_means;
  std::vector<Eigen::Matrix2d> class_cov;
  std::vector<Eigen::Vector2d> shift;
  int n_per_class = 150;
  std::uint64_t seed = 1;

  int num_classes() const { return static_cast<int>(class_means.size()); }
  void validate() const;  ///< shapes consistent, covariances SPD
};

/// Blob spec plus a target-private class that never appears in the source.
/// Its rows carry label index K (the (K+1)-th class), for evaluation only.
struct OpenSetSpec {
  BlobSpec base;
  int n_private = 0;
  Eigen::Vector2d private_mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d private_cov = Eigen::Matrix2d::Identity();
};

/// Draws (source, target). Deterministic under the spec seed; target labels
/// are returned for evaluation only and must not reach the adaptation loop.
std::pair<LabeledSet, LabeledSet> gen_toy(const BlobSpec& spec);

/// As gen_toy, with n_private extra target rows labelled K. With
/// n_private = 0 the output is identical to gen_toy.
std::pair<LabeledSet, LabeledSet> gen_open_set(const OpenSetSpec& spec);

/// Committed shift presets for the 3-class toy study. Both share means and
/// covariances and differ only in the per-class shift vectors, so a scale
/// knob can interpolate between them.
BlobSpec mild_preset(std::uint64_t seed);
BlobSpec strong_preset(std::uint64_t seed);

/// shift(t) = mild + t * (strong - mild); t = 0 is the mild preset and
/// t = 1 the strong preset.
BlobSpec preset_with_scale(double shift_scale, std::uint64_t seed);

/// Open-set preset: strong base plus a private cluster away from all class
/// means.
OpenSetSpec open_set_preset(std::uint64_t seed);

/// True when ties between presets hold: every shift is small against the
/// inter-class distances.
bool certify_mild_shift(const BlobSpec& spec);

/// True when at least one target class centroid has crossed: its nearest
/// source centroid belongs to a different class, and it lies within one
/// pooled-source standard deviation of that centroid.
bool certify_strong_shift(const BlobSpec& spec);

/// CSV ingestion. Header `f0,...,f{D-1}[,label]`; the label column is an
/// integer class index in [0, K). Returns a LabeledSet when the label
/// column is present, otherwise an UnlabeledSet.
std::variant<LabeledSet, UnlabeledSet> load_csv(const std::string& path);

/// Writers matching load_csv; doubles are printed shortest-round-trip so a
/// save/load cycle is bit-identical.
void save_csv(const LabeledSet& data, const std::string& path);
void save_csv(const UnlabeledSet& data, const std::string& path);

}  // namespace usfan
