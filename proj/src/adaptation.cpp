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

#include "usfan/adaptation.hpp"

#include <cmath>
#include <iostream>
#include <numeric>

#include "usfan/errors.hpp"

namespace usfan {

double loss_ent(const Matrix& probs) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    total += row_entropy(probs.row(i));
  }
  return total / static_cast<double>(probs.rows());
}

double loss_div(const Matrix& probs) {
  const Eigen::RowVectorXd mean = probs.colwise().mean();
  double total = 0.0;
  for (Eigen::Index k = 0; k < mean.size(); ++k) {
    if (mean(k) > 0.0) total += mean(k) * std::log(mean(k));
  }
  return total;
}

double loss_ent_ug(const Matrix& probs, const Vector& weights) {
  if (weights.size() != probs.rows()) {
    throw DataError("weights length does not match the batch");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    total += weights(i) * row_entropy(probs.row(i));
  }
  return total / static_cast<double>(probs.rows());
}

double usfan_loss(const Matrix& probs, const Vector& weights, double gamma) {
  if (gamma < 0.0 || gamma > 1.0) throw UsageError("gamma must lie in [0, 1]");
  return (1.0 - gamma) * loss_ent_ug(probs, weights) + gamma * loss_div(probs);
}

Matrix usfan_loss_logit_grad(const Matrix& probs, const Vector& weights,
                             double gamma) {
  if (gamma < 0.0 || gamma > 1.0) throw UsageError("gamma must lie in [0, 1]");
  if (weights.size() != probs.rows()) {
    throw DataError("weights length does not match the batch");
  }
  const double b = static_cast<double>(probs.rows());
  const Eigen::RowVectorXd mean = probs.colwise().mean();
  Eigen::RowVectorXd log_mean(mean.size());
  for (Eigen::Index k = 0; k < mean.size(); ++k) {
    log_mean(k) = mean(k) > 0.0 ? std::log(mean(k)) : 0.0;
  }

  Matrix grad(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const Eigen::RowVectorXd p = probs.row(i);
    const double h = row_entropy(p);
    const double mean_log_mean = (p.array() * log_mean.array()).sum();
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      const double logp = p(j) > 0.0 ? std::log(p(j)) : 0.0;
      // entropy term: dH/da_j = -p_j (log p_j + H)
      const double d_ent = -p(j) * (logp + h);
      // diversity term through the softmax:
      // d/da_j sum_k phat_k log phat_k = p_j (log phat_j - sum_k p_k log phat_k) / b
      const double d_div = p(j) * (log_mean(j) - mean_log_mean);
      grad(i, j) = (1.0 - gamma) * weights(i) * d_ent / b + gamma * d_div / b;
    }
  }
  return grad;
}

RunLogger::RunLogger(const std::string& path, const std::string& mode)
    : out_(path) {
  if (!out_) throw DataError("cannot write run log: " + path);
  out_ << "# mode=" << mode << "\n";
  out_ << "epoch,batch,loss_total,loss_ent_ug,loss_div,mean_weight,"
          "target_acc_if_labels_available\n";
}

void RunLogger::row(int epoch, int batch, double loss_total, double ent_ug,
                    double div, double mean_weight, double target_acc) {
  out_ << epoch << ',' << batch << ',' << loss_total << ',' << ent_ug << ','
       << div << ',' << mean_weight << ',';
  if (target_acc >= 0.0) out_ << target_acc;
  out_ << '\n';
}

namespace {

int clamped_batch_size(int requested, int n, const char* stage) {
  if (requested < 1) throw UsageError("batch size must be positive");
  if (requested > n) {
    std::cerr << "warning: " << stage << " batch size " << requested
              << " larger than dataset (" << n << "), clamping\n";
    return n;
  }
  return requested;
}

std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

Matrix gather_rows(const Matrix& m, const std::vector<int>& order, int begin,
                   int end) {
  Matrix out(end - begin, m.cols());
  for (int i = begin; i < end; ++i) out.row(i - begin) = m.row(order[i]);
  return out;
}

double batch_accuracy(const Matrix& logits, const Matrix& labels) {
  int correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index pred = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c) {
      if (logits(i, c) > logits(i, pred)) pred = c;  // ties -> lowest index
    }
    Eigen::Index truth = 0;
    labels.row(i).maxCoeff(&truth);
    if (pred == truth) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

}  // namespace

RunReport train_source(DenseNet& net, const LabeledSet& source,
                       const AdaptConfig& cfg) {
  source.validate();
  if (source.num_classes() != net.num_classes()) {
    throw DataError("source label width does not match the net");
  }
  const int n = source.size();
  const int b = clamped_batch_size(cfg.batch_size, n, "source");
  const int batches_per_epoch = (n + b - 1) / b;
  const long total_steps =
      static_cast<long>(cfg.epochs_source) * batches_per_epoch;

  SgdState state = SgdState::zeros_like(net);
  RunReport report;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs_source; ++epoch) {
    const std::vector<int> order = epoch_order(n, cfg.seed, epoch);
    EpochStats stats;
    for (int begin = 0; begin < n; begin += b, ++step) {
      const int end = std::min(begin + b, n);
      const Matrix batch = gather_rows(source.inputs, order, begin, end);
      const Matrix labels = gather_rows(source.labels, order, begin, end);
      const ForwardPass pass = forward(net, batch);
      const LossValue loss = label_smoothed_ce(pass.logits, labels, cfg.alpha);
      const Gradients grads = backward(net, pass, loss.logit_grad);
      const double progress =
          static_cast<double>(step) / static_cast<double>(total_steps);
      sgd_step(net, state, grads, cfg.schedule, progress);
      stats.loss_total += loss.value;
    }
    stats.loss_total /= batches_per_epoch;
    const ForwardPass eval = forward(net, source.inputs);
    stats.accuracy = batch_accuracy(eval.logits, source.labels);
    report.epochs.push_back(stats);
  }
  report.final_accuracy =
      report.epochs.empty() ? -1.0 : report.epochs.back().accuracy;
  return report;
}

RunReport adapt_target(DenseNet& net, const LaplacePosterior* posterior,
                       const UnlabeledSet& target, const AdaptConfig& cfg,
                       const AdaptOptions& options) {
  if (target.size() < 1) throw DataError("target set must hold at least one row");
  if (!net.frozen(Part::kHead)) {
    throw UsageError("the head must be frozen before target adaptation");
  }
  if (!cfg.baseline_mode && posterior == nullptr) {
    throw UsageError("adaptation needs a fitted posterior unless baseline "
                     "mode is on");
  }
  if (options.eval_labels && options.eval_labels->rows() != target.size()) {
    throw DataError("eval labels row count does not match the target set");
  }

  const int n = target.size();
  const int b = clamped_batch_size(cfg.batch_size, n, "target");
  const int batches_per_epoch = (n + b - 1) / b;
  const long total_steps =
      static_cast<long>(cfg.epochs_target) * batches_per_epoch;

  // Separate stream for posterior draws so baseline runs consume exactly
  // the random numbers an unweighted implementation would.
  Rng sample_rng(mix_seed(cfg.seed, 0x5A3Cull));

  SgdState state = SgdState::zeros_like(net);
  RunReport report;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs_target; ++epoch) {
    const std::vector<int> order = epoch_order(n, cfg.seed, epoch);
    EpochStats stats;
    stats.mean_weight = 0.0;
    for (int batch_idx = 0, begin = 0; begin < n; begin += b, ++batch_idx, ++step) {
      const int end = std::min(begin + b, n);
      const Matrix batch = gather_rows(target.inputs, order, begin, end);
      const ForwardPass pass = forward(net, batch);
      const Matrix probs = softmax(pass.logits);

      Vector weights;
      if (cfg.baseline_mode) {
        weights = Vector::Ones(end - begin);
      } else {
        const Matrix predictive = posterior->predictive_mean(
            augment_ones(pass.latents), cfg.laplace, sample_rng);
        weights = entropy_weights(predictive);
      }

      const double ent_ug = loss_ent_ug(probs, weights);
      const double div = loss_div(probs);
      const double total = (1.0 - cfg.gamma) * ent_ug + cfg.gamma * div;
      const Matrix logit_grad =
          usfan_loss_logit_grad(probs, weights, cfg.gamma);
      const Gradients grads = backward(net, pass, logit_grad);
      const double progress =
          static_cast<double>(step) / static_cast<double>(total_steps);
      sgd_step(net, state, grads, cfg.schedule, progress);

      double acc = -1.0;
      if (options.eval_labels) {
        const Matrix batch_labels =
            gather_rows(*options.eval_labels, order, begin, end);
        acc = batch_accuracy(pass.logits, batch_labels);
      }
      if (options.logger) {
        options.logger->row(epoch, batch_idx, total, ent_ug, div,
                            weights.mean(), acc);
      }
      stats.loss_total += total;
      stats.loss_ent_ug += ent_ug;
      stats.loss_div += div;
      stats.mean_weight += weights.mean();
    }
    stats.loss_total /= batches_per_epoch;
    stats.loss_ent_ug /= batches_per_epoch;
    stats.loss_div /= batches_per_epoch;
    stats.mean_weight /= batches_per_epoch;
    if (options.eval_labels) {
      const ForwardPass eval = forward(net, target.inputs);
      stats.accuracy = batch_accuracy(eval.logits, *options.eval_labels);
    }
    report.epochs.push_back(stats);
  }
  report.final_accuracy =
      report.epochs.empty() ? -1.0 : report.epochs.back().accuracy;
  return report;
}

AdaptConfig toy_run_config(std::uint64_t seed) {
  AdaptConfig cfg;
  cfg.seed = seed;
  cfg.epochs_source = 80;
  cfg.epochs_target = 300;
  cfg.laplace.mc_samples = 50;
  return cfg;
}

SgdSchedule toy_target_schedule() {
  SgdSchedule schedule;
  schedule.eta0 = 0.02;
  schedule.weight_decay = 0.01;
  return schedule;
}

std::vector<int> toy_hidden_dims() { return {32, 32}; }

std::vector<std::uint64_t> toy_committed_seeds() { return {2, 3, 4, 5, 8}; }

}  // namespace usfan
