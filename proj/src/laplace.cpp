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

#include "usfan/laplace.hpp"

#include <cmath>

#include <Eigen/Cholesky>

#include "jsonio.hpp"
#include "usfan/errors.hpp"

namespace usfan {

Matrix augment_ones(const Matrix& latents) {
  Matrix out(latents.rows(), latents.cols() + 1);
  out.leftCols(latents.cols()) = latents;
  out.rightCols(1).setOnes();
  return out;
}

double row_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& probs) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = probs(i);
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

namespace {

void check_curvature_inputs(const Matrix& latents, const Matrix& probs,
                            double prior_precision) {
  // lambda = 0 is legal here (the factors are never inverted); fitting a
  // posterior requires lambda > 0.
  if (prior_precision < 0.0) {
    throw UsageError("prior precision must be non-negative");
  }
  if (latents.rows() != probs.rows()) {
    throw DataError("latents and probs row counts differ");
  }
}

Matrix lower_cholesky(const Matrix& spd, const char* what) {
  Eigen::LLT<Matrix> llt(spd);
  if (llt.info() != Eigen::Success) {
    throw NumericalError(std::string("Cholesky factorization failed for ") +
                         what);
  }
  return llt.matrixL();
}

Matrix spd_inverse(const Matrix& spd, const char* what) {
  Eigen::LLT<Matrix> llt(spd);
  if (llt.info() != Eigen::Success) {
    throw NumericalError(std::string("Cholesky factorization failed for ") +
                         what);
  }
  return llt.solve(Matrix::Identity(spd.rows(), spd.cols()));
}

}  // namespace

Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      out.block(r * b.rows(), c * b.cols(), b.rows(), b.cols()) = a(r, c) * b;
    }
  }
  return out;
}

Matrix ggn_hessian_full(const Matrix& latents, const Matrix& probs,
                        double prior_precision) {
  check_curvature_inputs(latents, probs, prior_precision);
  const Eigen::Index d = latents.cols();
  const Eigen::Index k = probs.cols();
  Matrix h = prior_precision * Matrix::Identity(d * k, d * k);
  for (Eigen::Index i = 0; i < latents.rows(); ++i) {
    const Eigen::RowVectorXd p = probs.row(i);
    const Matrix lambda =
        Matrix(p.asDiagonal()) - p.transpose() * p;
    const Matrix zz = latents.row(i).transpose() * latents.row(i);
    h += kronecker(lambda, zz);
  }
  return h;
}

std::pair<Matrix, Matrix> ggn_hessian_kfac(const Matrix& latents,
                                           const Matrix& probs,
                                           double prior_precision) {
  check_curvature_inputs(latents, probs, prior_precision);
  const Eigen::Index d = latents.cols();
  const Eigen::Index k = probs.cols();
  const Eigen::Index n = latents.rows();
  const double sqrt_prior = std::sqrt(prior_precision);
  Matrix u = sqrt_prior * Matrix::Identity(d, d);
  Matrix v = sqrt_prior * Matrix::Identity(k, k);
  if (n > 0) {
    const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
    u += inv_sqrt_n * (latents.transpose() * latents);
    Matrix lambda_sum = Matrix::Zero(k, k);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::RowVectorXd p = probs.row(i);
      lambda_sum += Matrix(p.asDiagonal()) - p.transpose() * p;
    }
    v += inv_sqrt_n * lambda_sum;
  }
  return {std::move(u), std::move(v)};
}

LaplacePosterior LaplacePosterior::fit(const DenseNet& net,
                                       const LabeledSet& source,
                                       const LaplaceConfig& cfg) {
  if (cfg.prior_precision <= 0.0) {
    throw UsageError("prior precision must be positive");
  }
  source.validate();
  const ForwardPass pass = forward(net, source.inputs);
  const Matrix latents = augment_ones(pass.latents);
  const Matrix probs = softmax(pass.logits);
  const Matrix theta_map = net.head_matrix();

  if (cfg.variant == LaplaceVariant::kFull) {
    FullPosterior p;
    p.theta_map = theta_map;
    p.precision = ggn_hessian_full(latents, probs, cfg.prior_precision);
    p.chol_cov = lower_cholesky(spd_inverse(p.precision, "H"), "H^{-1}");
    return LaplacePosterior(std::move(p));
  }
  KroneckerPosterior p;
  p.theta_map = theta_map;
  std::tie(p.factor_u, p.factor_v) =
      ggn_hessian_kfac(latents, probs, cfg.prior_precision);
  p.chol_u_inv = lower_cholesky(spd_inverse(p.factor_u, "U"), "U^{-1}");
  p.chol_v_inv = lower_cholesky(spd_inverse(p.factor_v, "V"), "V^{-1}");
  return LaplacePosterior(std::move(p));
}

LaplaceVariant LaplacePosterior::variant() const {
  return std::holds_alternative<FullPosterior>(impl_) ? LaplaceVariant::kFull
                                                      : LaplaceVariant::kKronecker;
}

const Matrix& LaplacePosterior::theta_map() const {
  if (const auto* f = std::get_if<FullPosterior>(&impl_)) return f->theta_map;
  return std::get<KroneckerPosterior>(impl_).theta_map;
}

Matrix LaplacePosterior::sample_params(Rng& rng) const {
  const Eigen::Index d = theta_map().rows();
  const Eigen::Index k = theta_map().cols();
  // Column-major fill, d*k normal draws, identical for both variants.
  Matrix eps(d, k);
  for (Eigen::Index c = 0; c < k; ++c) {
    for (Eigen::Index r = 0; r < d; ++r) eps(r, c) = rng.normal();
  }
  if (const auto* f = std::get_if<FullPosterior>(&impl_)) {
    const Eigen::Map<const Vector> eps_flat(eps.data(), d * k);
    Vector delta = f->chol_cov * eps_flat;
    return f->theta_map + Eigen::Map<Matrix>(delta.data(), d, k);
  }
  const auto& p = std::get<KroneckerPosterior>(impl_);
  return p.theta_map + p.chol_u_inv * eps * p.chol_v_inv.transpose();
}

Matrix LaplacePosterior::predictive_mean(const Matrix& latents_aug,
                                         const LaplaceConfig& cfg,
                                         Rng& rng) const {
  if (cfg.mc_samples < 1) throw UsageError("mc_samples must be at least 1");
  if (cfg.temperature <= 0.0 || cfg.temperature > 1.0) {
    throw UsageError("temperature must lie in (0, 1]");
  }
  if (latents_aug.cols() != theta_map().rows()) {
    throw DataError("latents are not bias-augmented to the head width");
  }
  Matrix mean = Matrix::Zero(latents_aug.rows(), theta_map().cols());
  for (int j = 0; j < cfg.mc_samples; ++j) {
    const Matrix theta = sample_params(rng);
    mean += softmax(latents_aug * theta / cfg.temperature);
  }
  return mean / static_cast<double>(cfg.mc_samples);
}

Vector entropy_weights(const Matrix& probs) {
  Vector w(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double sum = 0.0;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      const double p = probs(i, c);
      if (p < -1e-12) throw DataError("probability rows must be non-negative");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw DataError("probability rows must sum to 1");
    }
    w(i) = std::exp(-row_entropy(probs.row(i)));
  }
  return w;
}

void LaplacePosterior::save(const std::string& path) const {
  nlohmann::json j;
  j["format"] = "usfan-posterior";
  j["version"] = 1;
  j["latent_dim"] = latent_dim();
  j["classes"] = num_classes();
  if (unknown_threshold) j["unknown_threshold"] = *unknown_threshold;
  if (const auto* f = std::get_if<FullPosterior>(&impl_)) {
    j["variant"] = "full";
    j["theta_map"] = detail::matrix_to_json(f->theta_map);
    j["precision"] = detail::matrix_to_json(f->precision);
    j["chol_cov"] = detail::matrix_to_json(f->chol_cov);
  } else {
    const auto& p = std::get<KroneckerPosterior>(impl_);
    j["variant"] = "kronecker";
    j["theta_map"] = detail::matrix_to_json(p.theta_map);
    j["factor_u"] = detail::matrix_to_json(p.factor_u);
    j["factor_v"] = detail::matrix_to_json(p.factor_v);
    j["chol_u_inv"] = detail::matrix_to_json(p.chol_u_inv);
    j["chol_v_inv"] = detail::matrix_to_json(p.chol_v_inv);
  }
  detail::save_json_file(j, path);
}

LaplacePosterior LaplacePosterior::load(const std::string& path) {
  const nlohmann::json j = detail::load_json_file(path, "usfan-posterior");
  const Eigen::Index d = j.at("latent_dim").get<Eigen::Index>() + 1;
  const Eigen::Index k = j.at("classes").get<Eigen::Index>();
  const std::string variant = j.at("variant").get<std::string>();
  std::optional<double> threshold;
  if (j.contains("unknown_threshold")) {
    threshold = j.at("unknown_threshold").get<double>();
  }
  if (variant == "full") {
    FullPosterior p;
    p.theta_map = detail::matrix_from_json(j.at("theta_map"), d, k);
    p.precision = detail::matrix_from_json(j.at("precision"), d * k, d * k);
    p.chol_cov = detail::matrix_from_json(j.at("chol_cov"), d * k, d * k);
    LaplacePosterior out(std::move(p));
    out.unknown_threshold = threshold;
    return out;
  }
  if (variant != "kronecker") {
    throw DataError(path + ": unknown posterior variant '" + variant + "'");
  }
  KroneckerPosterior p;
  p.theta_map = detail::matrix_from_json(j.at("theta_map"), d, k);
  p.factor_u = detail::matrix_from_json(j.at("factor_u"), d, d);
  p.factor_v = detail::matrix_from_json(j.at("factor_v"), k, k);
  p.chol_u_inv = detail::matrix_from_json(j.at("chol_u_inv"), d, d);
  p.chol_v_inv = detail::matrix_from_json(j.at("chol_v_inv"), k, k);
  LaplacePosterior out(std::move(p));
  out.unknown_threshold = threshold;
  return out;
}

}  // namespace usfan
