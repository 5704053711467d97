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
#include <utility>
#include <variant>

#include "usfan/datasets.hpp"
#include "usfan/net.hpp"
#include "usfan/rng.hpp"

namespace usfan {

enum class LaplaceVariant { kFull, kKronecker };

struct LaplaceConfig {
  double prior_precision = 5e-4;  ///< lambda, matches the weight decay
  double temperature = 0.4;       ///< tau in (0, 1], logits scaled by 1/tau
  int mc_samples = 10;            ///< M, Monte Carlo draws per prediction
  LaplaceVariant variant = LaplaceVariant::kKronecker;
};

/// Appends a constant-1 column so the head bias is part of the parameter
/// block the posterior covers.
Matrix augment_ones(const Matrix& latents);

/// Shannon entropy in nats of one probability row (0 log 0 := 0).
double row_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& probs);

/// Generalized Gauss-Newton curvature of the softmax cross-entropy at the
/// head, H = sum_i Lambda_i (x) z_i z_i^T + lambda I, with
/// Lambda_i = diag(p_i) - p_i p_i^T and column-major vec of the
/// (latent_dim + 1) x classes head matrix. `latents` must carry the bias
/// column already.
Matrix ggn_hessian_full(const Matrix& latents, const Matrix& probs,
                        double prior_precision);

/// Kronecker factors U (input side) and V (output side), scaled so V (x) U
/// approximates the full GGN sum: U = sum z z^T / sqrt(n) + sqrt(lambda) I,
/// V = sum Lambda / sqrt(n) + sqrt(lambda) I. Exact at n = 1, lambda = 0.
std::pair<Matrix, Matrix> ggn_hessian_kfac(const Matrix& latents,
                                           const Matrix& probs,
                                           double prior_precision);

/// kron(a, b) under the column-major vec convention used throughout.
Matrix kronecker(const Matrix& a, const Matrix& b);

struct FullPosterior {
  Matrix theta_map;  ///< (latent_dim + 1) x classes
  Matrix precision;  ///< H
  Matrix chol_cov;   ///< lower L with L L^T = H^{-1}
};

struct KroneckerPosterior {
  Matrix theta_map;
  Matrix factor_u;    ///< (latent_dim + 1) square
  Matrix factor_v;    ///< classes square
  Matrix chol_u_inv;  ///< lower Cholesky of U^{-1}
  Matrix chol_v_inv;  ///< lower Cholesky of V^{-1}
};

/// Gaussian posterior over the head parameters centred at the trained head.
///
/// Sampling consumes exactly (latent_dim + 1) * classes normal draws per
/// parameter sample, filled column-major, for both variants. With matched
/// seeds the two variants therefore produce identical draws whenever their
/// covariances coincide.
class LaplacePosterior {
 public:
  /// One pass over the source data at the trained parameters: accumulate
  /// the chosen curvature form, cache the Cholesky factors, copy theta_MAP
  /// from the head. Throws NumericalError if a factorization fails.
  static LaplacePosterior fit(const DenseNet& net, const LabeledSet& source,
                              const LaplaceConfig& cfg);

  LaplaceVariant variant() const;
  const Matrix& theta_map() const;
  int latent_dim() const { return static_cast<int>(theta_map().rows()) - 1; }
  int num_classes() const { return static_cast<int>(theta_map().cols()); }

  /// One draw theta_j ~ N(theta_MAP, H^{-1}), returned as the head matrix.
  Matrix sample_params(Rng& rng) const;

  /// Monte Carlo predictive mean (1/M) sum_j softmax(z theta_j / tau) over
  /// bias-augmented latents. Rows sum to 1. Throws UsageError if M < 1.
  Matrix predictive_mean(const Matrix& latents_aug, const LaplaceConfig& cfg,
                         Rng& rng) const;

  const FullPosterior& full() const { return std::get<FullPosterior>(impl_); }
  const KroneckerPosterior& kronecker() const {
    return std::get<KroneckerPosterior>(impl_);
  }

  /// Entropy threshold for open-set rejection, when one was calibrated at
  /// fit time (CLI stores the source-entropy quantile here).
  std::optional<double> unknown_threshold;

  void save(const std::string& path) const;
  static LaplacePosterior load(const std::string& path);

  explicit LaplacePosterior(FullPosterior p) : impl_(std::move(p)) {}
  explicit LaplacePosterior(KroneckerPosterior p) : impl_(std::move(p)) {}

 private:
  std::variant<FullPosterior, KroneckerPosterior> impl_;
};

/// w_i = exp(-H(p_i)) per probability row; bounds 1/K <= w <= 1.
/// Throws DataError if a row is not a probability vector.
Vector entropy_weights(const Matrix& probs);

}  // namespace usfan
