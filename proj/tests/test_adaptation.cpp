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

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "test_support.hpp"
#include "usfan/adaptation.hpp"
#include "usfan/datasets.hpp"
#include "usfan/errors.hpp"
#include "usfan/laplace.hpp"

using namespace usfan;

namespace {

Matrix rows_from(std::initializer_list<std::initializer_list<double>> data) {
  const auto r = static_cast<Eigen::Index>(data.size());
  const auto c = static_cast<Eigen::Index>(data.begin()->size());
  Matrix m(r, c);
  Eigen::Index i = 0;
  for (const auto& row : data) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

// Two linearly separable 2-class blobs.
LabeledSet separable_blobs(std::uint64_t seed, int n_per_class) {
  Rng rng(seed);
  Matrix inputs(2 * n_per_class, 2);
  Matrix labels = Matrix::Zero(2 * n_per_class, 2);
  for (int i = 0; i < n_per_class; ++i) {
    inputs.row(i) << -3.0 + 0.5 * rng.normal(), 0.5 * rng.normal();
    labels(i, 0) = 1.0;
    inputs.row(n_per_class + i) << 3.0 + 0.5 * rng.normal(), 0.5 * rng.normal();
    labels(n_per_class + i, 1) = 1.0;
  }
  return {std::move(inputs), std::move(labels)};
}

}  // namespace

TEST_CASE("loss_ent: one-hot, uniform and analytic rows") {
  CHECK(loss_ent(rows_from({{1, 0, 0}, {0, 0, 1}})) == 0.0);
  CHECK(loss_ent(rows_from({{1.0 / 3, 1.0 / 3, 1.0 / 3}})) ==
        doctest::Approx(std::log(3.0)).epsilon(1e-12));
  const double h1 = -0.75 * std::log(0.75) - 0.25 * std::log(0.25);
  const double h2 = std::log(2.0);
  CHECK(loss_ent(rows_from({{0.75, 0.25}, {0.5, 0.5}})) ==
        doctest::Approx(0.5 * (h1 + h2)).epsilon(1e-12));
  CHECK(0.5 * (h1 + h2) == doctest::Approx(0.6277).epsilon(1e-3));
}

TEST_CASE("loss_div: minimum at the uniform mean, maximum at collapse") {
  CHECK(loss_div(rows_from({{1, 0}, {0, 1}})) ==
        doctest::Approx(-std::log(2.0)).epsilon(1e-12));
  CHECK(loss_div(rows_from({{1, 0, 0}, {1, 0, 0}})) == 0.0);
  CHECK(loss_div(rows_from({{1.0 / 3, 1.0 / 3, 1.0 / 3}})) ==
        doctest::Approx(-std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("loss_ent_ug: reductions and analytic value") {
  const Matrix probs = rows_from({{0.75, 0.25}, {0.5, 0.5}, {0.9, 0.1}});
  SUBCASE("unit weights reduce to loss_ent") {
    CHECK(std::fabs(loss_ent_ug(probs, Vector::Ones(3)) - loss_ent(probs)) <=
          1e-15);
  }
  SUBCASE("zero weights kill the loss") {
    CHECK(loss_ent_ug(probs, Vector::Zero(3)) == 0.0);
  }
  SUBCASE("single half-weighted uniform row") {
    Vector w(1);
    w << 0.5;
    CHECK(loss_ent_ug(rows_from({{0.5, 0.5}}), w) ==
          doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("length mismatch throws") {
    CHECK_THROWS_AS(loss_ent_ug(probs, Vector::Ones(2)), DataError);
  }
}

TEST_CASE("usfan_loss: mixing endpoints and arithmetic") {
  const Matrix probs = rows_from({{0.6, 0.4}, {0.2, 0.8}});
  const Vector w = Vector::Constant(2, 0.7);
  CHECK(usfan_loss(probs, w, 0.0) == loss_ent_ug(probs, w));
  CHECK(usfan_loss(probs, w, 1.0) == loss_div(probs));
  // gamma = 0.5 with component losses 0.6 and -0.2 mixes to 0.2
  CHECK(0.5 * 0.6 + 0.5 * (-0.2) == doctest::Approx(0.2));
  CHECK(usfan_loss(probs, w, 0.5) ==
        doctest::Approx(0.5 * loss_ent_ug(probs, w) + 0.5 * loss_div(probs))
            .epsilon(1e-15));
  CHECK_THROWS_AS(usfan_loss(probs, w, 1.5), UsageError);
}

TEST_CASE("usfan_loss stays inside [-gamma log K, (1-gamma) log K]") {
  Rng rng(31);
  for (int rep = 0; rep < 100; ++rep) {
    const int k = 2 + static_cast<int>(rng.index(4));
    const int b = 1 + static_cast<int>(rng.index(6));
    Matrix logits(b, k);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        logits(r, c) = 5.0 * rng.normal();
      }
    }
    const Matrix probs = softmax(logits);
    Vector w(b);
    for (int i = 0; i < b; ++i) w(i) = rng.uniform();
    const double gamma = rng.uniform();
    const double value = usfan_loss(probs, w, gamma);
    const double logk = std::log(static_cast<double>(k));
    CHECK(value >= -gamma * logk - 1e-12);
    CHECK(value <= (1.0 - gamma) * logk + 1e-12);
  }
}

TEST_CASE("usfan loss gradient matches central finite differences") {
  Rng rng(47);
  for (double gamma : {0.0, 0.5, 1.0}) {
    Matrix logits(6, 3);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        logits(r, c) = 2.0 * rng.normal();
      }
    }
    Vector w(6);
    for (int i = 0; i < 6; ++i) w(i) = rng.uniform();

    const Matrix analytic = usfan_loss_logit_grad(softmax(logits), w, gamma);
    const double step = 1e-6;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        Matrix probe = logits;
        probe(r, c) += step;
        const double up = usfan_loss(softmax(probe), w, gamma);
        probe(r, c) -= 2.0 * step;
        const double down = usfan_loss(softmax(probe), w, gamma);
        const double fd = (up - down) / (2.0 * step);
        CHECK(testing::rel_err(analytic(r, c), fd) < 1e-5);
      }
    }
  }
}

TEST_CASE("train_source separates 2-class blobs and is deterministic") {
  const LabeledSet source = separable_blobs(123, 60);
  AdaptConfig cfg;
  cfg.epochs_source = 50;
  cfg.batch_size = 32;
  cfg.seed = 7;

  Rng init1(mix_seed(cfg.seed, 0));
  DenseNet net1 = DenseNet::random({2, 8, 2}, init1);
  const RunReport report = train_source(net1, source, cfg);
  CHECK(report.final_accuracy >= 0.99);

  Rng init2(mix_seed(cfg.seed, 0));
  DenseNet net2 = DenseNet::random({2, 8, 2}, init2);
  train_source(net2, source, cfg);
  CHECK(testing::nets_identical(net1, net2));
}

TEST_CASE("alpha=0 training path equals a plain cross-entropy oracle") {
  Rng rng(90);
  Matrix logits(5, 3);
  Matrix labels = Matrix::Zero(5, 3);
  for (int i = 0; i < 5; ++i) {
    labels(i, i % 3) = 1.0;
    for (int c = 0; c < 3; ++c) logits(i, c) = rng.normal();
  }
  // plain CE oracle: mean over rows of -log softmax at the true class
  const Matrix p = softmax(logits);
  double expected = 0.0;
  for (int i = 0; i < 5; ++i) expected -= std::log(p(i, i % 3));
  expected /= 5.0;
  CHECK(std::fabs(label_smoothed_ce(logits, labels, 0.0).value - expected) <=
        1e-12);
}

TEST_CASE("train_source rejects an empty source set") {
  LabeledSet empty{Matrix(0, 2), Matrix(0, 2)};
  AdaptConfig cfg;
  Rng rng(1);
  DenseNet net = DenseNet::random({2, 4, 2}, rng);
  CHECK_THROWS_AS(train_source(net, empty, cfg), DataError);
}

namespace {

/// Shared fixture: a trained source model plus posterior on shifted blobs.
struct AdaptFixture {
  LabeledSet source;
  LabeledSet target;
  DenseNet net;
  LaplacePosterior posterior;
  AdaptConfig cfg;

  static AdaptFixture make(std::uint64_t seed, bool strong = false) {
    BlobSpec spec = strong ? strong_preset(seed) : mild_preset(seed);
    spec.n_per_class = 60;
    auto [source, target] = gen_toy(spec);
    AdaptConfig cfg;
    cfg.seed = seed;
    cfg.epochs_source = 40;
    cfg.epochs_target = 15;
    Rng init(mix_seed(seed, 0));
    DenseNet net = DenseNet::random({2, 16, 16, 3}, init);
    train_source(net, source, cfg);
    LaplacePosterior posterior = LaplacePosterior::fit(net, source, cfg.laplace);
    return {std::move(source), std::move(target), std::move(net),
            std::move(posterior), cfg};
  }
};

}  // namespace

TEST_CASE("adapt_target keeps the frozen head bit-identical") {
  AdaptFixture fx = AdaptFixture::make(5);
  fx.net.set_frozen(Part::kHead, true);
  const Matrix head_before = fx.net.head_matrix();
  const UnlabeledSet target{fx.target.inputs};
  adapt_target(fx.net, &fx.posterior, target, fx.cfg);
  CHECK(fx.net.head_matrix() == head_before);
}

TEST_CASE("adapt_target requires a frozen head and a posterior") {
  AdaptFixture fx = AdaptFixture::make(6);
  const UnlabeledSet target{fx.target.inputs};
  CHECK_THROWS_AS(adapt_target(fx.net, &fx.posterior, target, fx.cfg),
                  UsageError);
  fx.net.set_frozen(Part::kHead, true);
  CHECK_THROWS_AS(adapt_target(fx.net, nullptr, target, fx.cfg), UsageError);
  fx.cfg.baseline_mode = true;
  CHECK_NOTHROW(adapt_target(fx.net, nullptr, target, fx.cfg));
}

TEST_CASE("baseline mode reproduces a direct information-maximization loop") {
  // The oracle below implements the unweighted objective directly: mean
  // prediction entropy plus the batch diversity term, no weight machinery.
  AdaptFixture fx = AdaptFixture::make(8);
  fx.cfg.baseline_mode = true;
  fx.cfg.epochs_target = 30;  // 30 epochs x 4 batches of 48 = 120 steps
  fx.cfg.batch_size = 48;

  DenseNet lib_net = fx.net;
  lib_net.set_frozen(Part::kHead, true);
  DenseNet oracle_net = fx.net;
  oracle_net.set_frozen(Part::kHead, true);

  const UnlabeledSet target{fx.target.inputs};
  adapt_target(lib_net, nullptr, target, fx.cfg);

  // direct loop sharing the seed discipline
  const int n = target.size();
  const int b = fx.cfg.batch_size;
  const int batches = (n + b - 1) / b;
  const long total_steps = static_cast<long>(fx.cfg.epochs_target) * batches;
  SgdState state = SgdState::zeros_like(oracle_net);
  long step = 0;
  for (int epoch = 0; epoch < fx.cfg.epochs_target; ++epoch) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(fx.cfg.seed, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    for (int begin = 0; begin < n; begin += b, ++step) {
      const int end = std::min(begin + b, n);
      Matrix batch(end - begin, 2);
      for (int i = begin; i < end; ++i) batch.row(i - begin) = target.inputs.row(order[i]);
      const ForwardPass pass = forward(oracle_net, batch);
      const Matrix probs = softmax(pass.logits);

      // d/dlogits of (1-gamma) * mean-entropy + gamma * diversity
      const double gamma = fx.cfg.gamma;
      const double bsz = static_cast<double>(probs.rows());
      const Eigen::RowVectorXd mean = probs.colwise().mean();
      Matrix grad(probs.rows(), probs.cols());
      for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        double h = 0.0, cross = 0.0;
        for (Eigen::Index c = 0; c < probs.cols(); ++c) {
          if (probs(i, c) > 0.0) h -= probs(i, c) * std::log(probs(i, c));
          cross += probs(i, c) * std::log(mean(c));
        }
        for (Eigen::Index j = 0; j < probs.cols(); ++j) {
          const double logp = std::log(probs(i, j));
          grad(i, j) = (1.0 - gamma) * (-probs(i, j) * (logp + h)) / bsz +
                       gamma * probs(i, j) * (std::log(mean(j)) - cross) / bsz;
        }
      }
      const Gradients grads = backward(oracle_net, pass, grad);
      sgd_step(oracle_net, state, grads, fx.cfg.schedule,
               static_cast<double>(step) / static_cast<double>(total_steps));
    }
  }
  CHECK(step >= 100);
  for (std::size_t li = 0; li < lib_net.layer_count(); ++li) {
    const double dmax =
        (lib_net.layer(li).weight - oracle_net.layer(li).weight)
            .cwiseAbs()
            .maxCoeff();
    CHECK(dmax <= 1e-12);
  }
}

TEST_CASE("weights act as constants: cached weights give identical gradients") {
  AdaptFixture fx = AdaptFixture::make(9);
  const ForwardPass pass = forward(fx.net, fx.target.inputs.topRows(32));
  const Matrix probs = softmax(pass.logits);
  Rng rng(77);
  const Matrix predictive = fx.posterior.predictive_mean(
      augment_ones(pass.latents), fx.cfg.laplace, rng);
  const Vector live = entropy_weights(predictive);
  const Vector cached = live;  // frozen copy, no posterior attached

  const Matrix g_live = usfan_loss_logit_grad(probs, live, fx.cfg.gamma);
  const Matrix g_cached = usfan_loss_logit_grad(probs, cached, fx.cfg.gamma);
  CHECK(g_live == g_cached);

  fx.net.set_frozen(Part::kHead, true);
  const Gradients a = backward(fx.net, pass, g_live);
  const Gradients b = backward(fx.net, pass, g_cached);
  for (std::size_t li = 0; li < fx.net.layer_count(); ++li) {
    REQUIRE(a[li].has_value() == b[li].has_value());
    if (a[li]) CHECK(a[li]->weight == b[li]->weight);
  }
}

TEST_CASE("weights come from fresh posterior samples every batch") {
  AdaptFixture fx = AdaptFixture::make(12);
  const ForwardPass pass = forward(fx.net, fx.target.inputs.topRows(16));
  const Matrix latents = augment_ones(pass.latents);
  // one advancing stream, as inside the adaptation loop: consecutive
  // batches see different draws even for identical inputs
  Rng rng(42);
  const Vector w1 =
      entropy_weights(fx.posterior.predictive_mean(latents, fx.cfg.laplace, rng));
  const Vector w2 =
      entropy_weights(fx.posterior.predictive_mean(latents, fx.cfg.laplace, rng));
  CHECK(w1 != w2);
  // while the weight bounds hold for every batch
  for (const Vector* w : {&w1, &w2}) {
    CHECK(w->minCoeff() >= 1.0 / 3 - 1e-12);
    CHECK(w->maxCoeff() <= 1.0 + 1e-12);
  }
}

TEST_CASE("oversized batches are clamped, not rejected") {
  AdaptFixture fx = AdaptFixture::make(10);
  fx.net.set_frozen(Part::kHead, true);
  fx.cfg.batch_size = 100000;
  fx.cfg.epochs_target = 2;
  const UnlabeledSet target{fx.target.inputs};
  CHECK_NOTHROW(adapt_target(fx.net, &fx.posterior, target, fx.cfg));
}

TEST_CASE("adaptation logs one row per batch with the mode header") {
  AdaptFixture fx = AdaptFixture::make(11);
  fx.net.set_frozen(Part::kHead, true);
  fx.cfg.epochs_target = 2;
  const auto path =
      std::filesystem::temp_directory_path() / "usfan_adapt_log_test.csv";
  {
    RunLogger logger(path.string(), "usfan");
    AdaptOptions options;
    options.logger = &logger;
    options.eval_labels = &fx.target.labels;
    const UnlabeledSet target{fx.target.inputs};
    adapt_target(fx.net, &fx.posterior, target, fx.cfg, options);
  }
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "# mode=usfan");
  std::getline(in, line);
  CHECK(line ==
        "epoch,batch,loss_total,loss_ent_ug,loss_div,mean_weight,"
        "target_acc_if_labels_available");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  const int batches = (fx.target.size() + fx.cfg.batch_size - 1) / fx.cfg.batch_size;
  CHECK(rows == 2 * batches);
  std::filesystem::remove(path);
}
