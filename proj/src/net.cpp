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

#include "usfan/net.hpp"

#include <cmath>
#include <string>

#include "jsonio.hpp"
#include "usfan/errors.hpp"

namespace usfan {

namespace {

std::string activation_name(Activation a) {
  return a == Activation::kRelu ? "relu" : "identity";
}

Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "identity") return Activation::kIdentity;
  throw DataError("unknown activation tag: " + name);
}

}  // namespace

DenseNet::DenseNet(std::vector<AffineLayer> layers, std::size_t split_index)
    : layers_(std::move(layers)), split_index_(split_index) {
  if (layers_.empty()) throw DataError("net needs at least one layer");
  if (split_index_ != layers_.size() - 1) {
    throw DataError("the head must be exactly the final affine layer");
  }
  if (layers_.back().activation != Activation::kIdentity) {
    throw DataError("the head must be a plain affine map (identity activation)");
  }
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    if (layers_[i].out_dim() != layers_[i + 1].in_dim()) {
      throw DataError("layer dimensions do not chain at layer " +
                      std::to_string(i));
    }
  }
  for (const auto& l : layers_) {
    if (l.bias.size() != l.out_dim()) {
      throw DataError("bias length does not match layer output width");
    }
  }
}

DenseNet DenseNet::random(const std::vector<int>& dims, Rng& rng) {
  if (dims.size() < 2) throw DataError("need at least input and output dims");
  std::vector<AffineLayer> layers;
  layers.reserve(dims.size() - 1);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    AffineLayer l;
    l.weight = Matrix(dims[i], dims[i + 1]);
    const double scale = std::sqrt(2.0 / static_cast<double>(dims[i]));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
        l.weight(r, c) = scale * rng.normal();
      }
    }
    l.bias = Vector::Zero(dims[i + 1]);
    const bool is_head = (i + 2 == dims.size());
    l.activation = is_head ? Activation::kIdentity : Activation::kRelu;
    layers.push_back(std::move(l));
  }
  return DenseNet(std::move(layers), dims.size() - 2);
}

Matrix DenseNet::head_matrix() const {
  const AffineLayer& head = layers_.back();
  Matrix theta(head.in_dim() + 1, head.out_dim());
  theta.topRows(head.in_dim()) = head.weight;
  theta.bottomRows(1) = head.bias.transpose();
  return theta;
}

void DenseNet::set_head_matrix(const Matrix& theta) {
  AffineLayer& head = layers_.back();
  if (theta.rows() != head.in_dim() + 1 || theta.cols() != head.out_dim()) {
    throw DataError("head parameter block has the wrong shape");
  }
  head.weight = theta.topRows(head.in_dim());
  head.bias = theta.bottomRows(1).transpose();
}

ForwardPass forward(const DenseNet& net, const Matrix& batch) {
  if (batch.cols() != net.input_dim()) {
    throw DataError("batch width " + std::to_string(batch.cols()) +
                    " does not match net input dim " +
                    std::to_string(net.input_dim()));
  }
  ForwardPass pass;
  pass.layer_inputs.reserve(net.layer_count());
  Matrix x = batch;
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const AffineLayer& l = net.layer(i);
    pass.layer_inputs.push_back(x);
    Matrix y = (x * l.weight).rowwise() + l.bias.transpose();
    if (l.activation == Activation::kRelu) {
      y = y.cwiseMax(0.0);
    }
    x = std::move(y);
  }
  pass.latents = pass.layer_inputs.back();
  pass.logits = std::move(x);
  return pass;
}

Gradients backward(const DenseNet& net, const ForwardPass& pass,
                   const Matrix& logit_grad) {
  if (logit_grad.rows() != pass.logits.rows() ||
      logit_grad.cols() != pass.logits.cols()) {
    throw DataError("logit gradient shape does not match the forward pass");
  }
  Gradients grads(net.layer_count());
  Matrix g = logit_grad;  // gradient wrt the current layer's output
  for (std::size_t idx = net.layer_count(); idx-- > 0;) {
    const AffineLayer& l = net.layer(idx);
    const Matrix& x = pass.layer_inputs[idx];
    // ReLU derivative from the stored output of this layer: positive output
    // means the unit was active. The head output is pass.logits.
    if (l.activation == Activation::kRelu) {
      const Matrix& y =
          (idx + 1 < net.layer_count()) ? pass.layer_inputs[idx + 1] : pass.logits;
      g = (y.array() > 0.0).cast<double>() * g.array();
    }
    if (!net.frozen(net.part_of(idx))) {
      LayerGrads lg;
      lg.weight = x.transpose() * g;
      lg.bias = g.colwise().sum().transpose();
      grads[idx] = std::move(lg);
    }
    if (idx > 0) {
      g = g * l.weight.transpose();
    }
  }
  return grads;
}

Matrix softmax(const Matrix& logits) {
  if (!logits.allFinite()) {
    throw NumericalError("softmax input contains non-finite entries");
  }
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(r).array() - m).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

LossValue label_smoothed_ce(const Matrix& logits, const Matrix& labels,
                            double alpha) {
  if (alpha < 0.0 || alpha >= 1.0) {
    throw UsageError("label smoothing alpha must lie in [0, 1)");
  }
  if (logits.rows() != labels.rows() || logits.cols() != labels.cols()) {
    throw DataError("logits and labels shapes differ");
  }
  const double b = static_cast<double>(logits.rows());
  const double k = static_cast<double>(logits.cols());
  const Matrix smoothed = labels * (1.0 - alpha) + Matrix::Constant(
      labels.rows(), labels.cols(), alpha / k);

  // log-softmax via the same max-subtraction path as softmax().
  LossValue lv;
  lv.logit_grad = Matrix(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    Eigen::RowVectorXd shifted = logits.row(r).array() - m;
    const double lse = std::log(shifted.array().exp().sum());
    Eigen::RowVectorXd logp = shifted.array() - lse;
    total -= (smoothed.row(r).array() * logp.array()).sum();
    lv.logit_grad.row(r) =
        (logp.array().exp() - smoothed.row(r).array()) / b;
  }
  lv.value = total / b;
  return lv;
}

double SgdSchedule::rate(double progress) const {
  return eta0 * std::pow(1.0 + decay_a * progress, -decay_b);
}

SgdState SgdState::zeros_like(const DenseNet& net) {
  SgdState state;
  state.velocity.reserve(net.layer_count());
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const AffineLayer& l = net.layer(i);
    state.velocity.push_back(
        {Matrix::Zero(l.in_dim(), l.out_dim()), Vector::Zero(l.out_dim())});
  }
  return state;
}

void sgd_step(DenseNet& net, SgdState& state, const Gradients& grads,
              const SgdSchedule& schedule, double progress) {
  if (progress < 0.0 || progress > 1.0) {
    throw UsageError("training progress must lie in [0, 1]");
  }
  if (grads.size() != net.layer_count() ||
      state.velocity.size() != net.layer_count()) {
    throw DataError("gradient/state layer count does not match the net");
  }
  const double eta = schedule.rate(progress);
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    if (!grads[i].has_value()) continue;
    if (net.frozen(net.part_of(i))) {
      throw UsageError("gradient applied to a frozen part");
    }
    AffineLayer& l = net.layer(i);
    LayerGrads& v = state.velocity[i];
    v.weight = schedule.momentum * v.weight +
               (grads[i]->weight + schedule.weight_decay * l.weight);
    v.bias = schedule.momentum * v.bias +
             (grads[i]->bias + schedule.weight_decay * l.bias);
    l.weight -= eta * v.weight;
    l.bias -= eta * v.bias;
  }
}

void save_checkpoint(const DenseNet& net, const std::string& path) {
  nlohmann::json j;
  j["format"] = "usfan-checkpoint";
  j["version"] = 1;
  j["split_index"] = net.split_index();
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const AffineLayer& l = net.layer(i);
    nlohmann::json lj;
    lj["in"] = l.in_dim();
    lj["out"] = l.out_dim();
    lj["activation"] = activation_name(l.activation);
    lj["weight"] = detail::matrix_to_json(l.weight);
    lj["bias"] = detail::vector_to_json(l.bias);
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  detail::save_json_file(j, path);
}

DenseNet load_checkpoint(const std::string& path) {
  const nlohmann::json j = detail::load_json_file(path, "usfan-checkpoint");
  std::vector<AffineLayer> layers;
  for (const auto& lj : j.at("layers")) {
    AffineLayer l;
    const Eigen::Index in = lj.at("in").get<Eigen::Index>();
    const Eigen::Index out = lj.at("out").get<Eigen::Index>();
    l.weight = detail::matrix_from_json(lj.at("weight"), in, out);
    l.bias = detail::vector_from_json(lj.at("bias"), out);
    l.activation = activation_from_name(lj.at("activation").get<std::string>());
    layers.push_back(std::move(l));
  }
  return DenseNet(std::move(layers), j.at("split_index").get<std::size_t>());
}

}  // namespace usfan
