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

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "usfan/rng.hpp"

namespace usfan {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { kRelu, kIdentity };

/// One affine map y = x W + b followed by an elementwise activation.
/// Rows of x are samples, so `weight` is in_dim x out_dim.
struct AffineLayer {
  Matrix weight;
  Vector bias;
  Activation activation = Activation::kIdentity;

  int in_dim() const { return static_cast<int>(weight.rows()); }
  int out_dim() const { return static_cast<int>(weight.cols()); }
};

/// The two trainable parts: the feature extractor (all layers before the
/// split) and the classifier head (the final affine layer).
enum class Part { kExtractor, kHead };

/// Dense feed-forward classifier split into feature extractor and head.
///
/// The head is always the last layer, is affine with identity activation,
/// and maps the latent dimension to one logit per class. Each part carries
/// a frozen flag; applying a gradient step to a frozen part is a checked
/// error.
class DenseNet {
 public:
  DenseNet(std::vector<AffineLayer> layers, std::size_t split_index);

  /// Seeded He-style initialization. `dims` = {input, hidden..., classes};
  /// hidden layers are ReLU, the head is identity.
  static DenseNet random(const std::vector<int>& dims, Rng& rng);

  int input_dim() const { return layers_.front().in_dim(); }
  int latent_dim() const { return layers_.back().in_dim(); }
  int num_classes() const { return layers_.back().out_dim(); }

  std::size_t layer_count() const { return layers_.size(); }
  std::size_t split_index() const { return split_index_; }
  const AffineLayer& layer(std::size_t i) const { return layers_[i]; }
  AffineLayer& layer(std::size_t i) { return layers_[i]; }

  Part part_of(std::size_t layer_index) const {
    return layer_index < split_index_ ? Part::kExtractor : Part::kHead;
  }
  bool frozen(Part part) const {
    return part == Part::kExtractor ? extractor_frozen_ : head_frozen_;
  }
  void set_frozen(Part part, bool value) {
    (part == Part::kExtractor ? extractor_frozen_ : head_frozen_) = value;
  }

  /// Head parameters with the bias folded in: rows [W; b^T], shape
  /// (latent_dim + 1) x classes. This is the parameter block the Laplace
  /// posterior lives over.
  Matrix head_matrix() const;
  void set_head_matrix(const Matrix& theta);

 private:
  std::vector<AffineLayer> layers_;
  std::size_t split_index_;
  bool extractor_frozen_ = false;
  bool head_frozen_ = false;
};

/// Activations recorded by a forward pass, enough to run backward().
struct ForwardPass {
  std::vector<Matrix> layer_inputs;  ///< input matrix seen by each layer
  Matrix latents;                    ///< batch x latent_dim, head input
  Matrix logits;                     ///< batch x classes
};

/// Full forward pass; throws DataError on input-width mismatch.
ForwardPass forward(const DenseNet& net, const Matrix& batch);

struct LayerGrads {
  Matrix weight;
  Vector bias;
};

/// Per-layer gradients; entries for frozen parts are left empty.
using Gradients = std::vector<std::optional<LayerGrads>>;

/// Exact reverse-mode pass. `logit_grad` is dLoss/dlogits (batch x classes)
/// supplied by a loss function. Gradients are produced only for unfrozen
/// parts.
Gradients backward(const DenseNet& net, const ForwardPass& pass,
                   const Matrix& logit_grad);

/// Row-wise softmax with max subtraction; throws NumericalError on
/// non-finite input.
Matrix softmax(const Matrix& logits);

struct LossValue {
  double value = 0.0;
  Matrix logit_grad;  ///< batch x classes, gradient of the mean loss
};

/// Label-smoothed cross entropy, mean over the batch. alpha in [0, 1).
LossValue label_smoothed_ce(const Matrix& logits, const Matrix& labels,
                            double alpha);

/// SGD learning-rate schedule eta(p) = eta0 * (1 + a p)^(-b) over training
/// progress p in [0, 1], with momentum and decoupled-into-gradient weight
/// decay.
struct SgdSchedule {
  double eta0 = 1e-2;
  double decay_a = 10.0;
  double decay_b = 0.75;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  double rate(double progress) const;
};

/// Momentum buffers, one per layer, zero-initialized to the net's shapes.
struct SgdState {
  std::vector<LayerGrads> velocity;
  static SgdState zeros_like(const DenseNet& net);
};

/// One SGD step: v <- m v + (g + wd * w); w <- w - eta(p) v.
/// Frozen parts are untouched; a gradient supplied for a frozen part
/// throws UsageError.
void sgd_step(DenseNet& net, SgdState& state, const Gradients& grads,
              const SgdSchedule& schedule, double progress);

/// Versioned textual checkpoint (JSON): layer shapes, activation tags,
/// split index and row-major parameter arrays. See README for the layout.
void save_checkpoint(const DenseNet& net, const std::string& path);
DenseNet load_checkpoint(const std::string& path);

}  // namespace usfan
