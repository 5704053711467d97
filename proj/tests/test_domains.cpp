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

#include "test_support.hpp"
#include "usfan/adaptation.hpp"
#include "usfan/datasets.hpp"
#include "usfan/errors.hpp"
#include "usfan/evaluation.hpp"
#include "usfan/laplace.hpp"

using namespace usfan;

TEST_CASE("gen_toy: deterministic, balanced, label-valid") {
  const BlobSpec spec = mild_preset(42);
  auto [source_a, target_a] = gen_toy(spec);
  auto [source_b, target_b] = gen_toy(spec);
  CHECK(source_a.inputs == source_b.inputs);
  CHECK(target_a.inputs == target_b.inputs);
  CHECK(source_a.labels == source_b.labels);

  source_a.validate();
  target_a.validate();
  for (int c = 0; c < 3; ++c) {
    CHECK(source_a.labels.col(c).sum() == spec.n_per_class);
    CHECK(target_a.labels.col(c).sum() == spec.n_per_class);
  }
}

TEST_CASE("gen_toy: different seeds give different data") {
  auto [source_a, target_a] = gen_toy(mild_preset(1));
  auto [source_b, target_b] = gen_toy(mild_preset(2));
  CHECK(source_a.inputs != source_b.inputs);
}

TEST_CASE("gen_toy: zero shift means matched source/target accuracy") {
  BlobSpec spec = mild_preset(3);
  for (auto& s : spec.shift) s.setZero();
  spec.n_per_class = 120;
  auto [source, target] = gen_toy(spec);

  AdaptConfig cfg;
  cfg.seed = 3;
  cfg.epochs_source = 40;
  Rng init(mix_seed(cfg.seed, 0));
  DenseNet net = DenseNet::random({2, 16, 3}, init);
  train_source(net, source, cfg);

  Rng rng(1);
  LaplaceConfig lap;
  const double acc_source =
      evaluate(net, nullptr, source, EvalMode::kMap, lap, {}, rng).accuracy;
  const double acc_target =
      evaluate(net, nullptr, target, EvalMode::kMap, lap, {}, rng).accuracy;
  // identical distributions: difference within a 3-sigma binomial interval
  const int n = source.size();
  const double p = 0.5 * (acc_source + acc_target);
  const double sigma = std::sqrt(std::max(p * (1.0 - p) * 2.0 / n, 1e-12));
  CHECK(std::fabs(acc_source - acc_target) <= std::max(3.0 * sigma, 0.02));
}

TEST_CASE("gen_toy rejects a covariance that is not SPD") {
  BlobSpec spec = mild_preset(1);
  spec.class_cov[0] << 1.0, 2.0, 2.0, 1.0;  // indefinite
  CHECK_THROWS_AS(gen_toy(spec), DataError);
}

TEST_CASE("strong preset: the source model misclassifies most target points") {
  // committed seed from the shift study; deterministic end-to-end run
  const std::uint64_t seed = 5;
  auto [source, target] = gen_toy(strong_preset(seed));
  AdaptConfig cfg = toy_run_config(seed);
  std::vector<int> dims{2};
  for (int h : toy_hidden_dims()) dims.push_back(h);
  dims.push_back(3);
  Rng init(mix_seed(seed, 0));
  DenseNet net = DenseNet::random(dims, init);
  train_source(net, source, cfg);

  Rng rng(1);
  const double map_acc =
      evaluate(net, nullptr, target, EvalMode::kMap, cfg.laplace, {}, rng)
          .accuracy;
  CHECK(map_acc < 0.6);
}

TEST_CASE("preset certification") {
  CHECK(certify_mild_shift(mild_preset(1)));
  CHECK_FALSE(certify_mild_shift(strong_preset(1)));
  CHECK(certify_strong_shift(strong_preset(1)));
  CHECK_FALSE(certify_strong_shift(mild_preset(1)));
}

TEST_CASE("preset_with_scale interpolates between the presets") {
  const BlobSpec mild = mild_preset(5);
  const BlobSpec strong = strong_preset(5);
  const BlobSpec at0 = preset_with_scale(0.0, 5);
  const BlobSpec at1 = preset_with_scale(1.0, 5);
  for (int c = 0; c < 3; ++c) {
    CHECK((at0.shift[c] - mild.shift[c]).norm() == 0.0);
    CHECK((at1.shift[c] - strong.shift[c]).norm() == 0.0);
  }
  const BlobSpec mid = preset_with_scale(0.5, 5);
  for (int c = 0; c < 3; ++c) {
    const Eigen::Vector2d expected = 0.5 * (mild.shift[c] + strong.shift[c]);
    CHECK((mid.shift[c] - expected).norm() < 1e-15);
  }
}

TEST_CASE("gen_open_set: n_private=0 is gen_toy, otherwise labels widen") {
  OpenSetSpec spec = open_set_preset(7);
  SUBCASE("no private samples") {
    spec.n_private = 0;
    auto [source, target] = gen_open_set(spec);
    auto [source_ref, target_ref] = gen_toy(spec.base);
    CHECK(target.inputs == target_ref.inputs);
    CHECK(target.labels == target_ref.labels);
  }
  SUBCASE("private rows carry label index K and never touch the source") {
    auto [source, target] = gen_open_set(spec);
    CHECK(source.num_classes() == 3);
    CHECK(target.num_classes() == 4);
    CHECK(target.size() == 3 * spec.base.n_per_class + spec.n_private);
    CHECK(target.labels.col(3).sum() == spec.n_private);
    target.validate();
  }
  SUBCASE("deterministic under the seed") {
    auto [sa, ta] = gen_open_set(spec);
    auto [sb, tb] = gen_open_set(spec);
    CHECK(ta.inputs == tb.inputs);
  }
}

TEST_CASE("open-set: private samples score higher predictive entropy") {
  OpenSetSpec spec = open_set_preset(11);
  spec.base.n_per_class = 80;
  spec.n_private = 60;
  auto [source, target] = gen_open_set(spec);

  AdaptConfig cfg;
  cfg.seed = 11;
  cfg.epochs_source = 40;
  Rng init(mix_seed(cfg.seed, 0));
  DenseNet net = DenseNet::random({2, 16, 16, 3}, init);
  train_source(net, source, cfg);
  LaplaceConfig lap;
  lap.mc_samples = 100;
  const LaplacePosterior posterior = LaplacePosterior::fit(net, source, lap);

  Rng rng(2);
  const ForwardPass pass = forward(net, target.inputs);
  const Matrix predictive =
      posterior.predictive_mean(augment_ones(pass.latents), lap, rng);
  double shared_sum = 0.0, private_sum = 0.0;
  int shared_n = 0, private_n = 0;
  for (int i = 0; i < target.size(); ++i) {
    const double h = row_entropy(predictive.row(i));
    if (target.label_of(i) == 3) {
      private_sum += h;
      ++private_n;
    } else {
      shared_sum += h;
      ++shared_n;
    }
  }
  CHECK(private_sum / private_n > shared_sum / shared_n);
}

TEST_CASE("csv: labelled and unlabelled loading") {
  const auto dir = std::filesystem::temp_directory_path();
  const auto labelled = dir / "usfan_csv_labelled.csv";
  const auto unlabelled = dir / "usfan_csv_unlabelled.csv";
  {
    std::ofstream out(labelled);
    out << "f0,f1,label\n1.5,-2.25,0\n0.125,3,1\n";
  }
  {
    std::ofstream out(unlabelled);
    out << "f0,f1\n1.5,-2.25\n0.125,3\n";
  }
  const auto loaded = load_csv(labelled.string());
  REQUIRE(std::holds_alternative<LabeledSet>(loaded));
  const auto& set = std::get<LabeledSet>(loaded);
  CHECK(set.size() == 2);
  CHECK(set.num_classes() == 2);
  CHECK(set.inputs(0, 0) == 1.5);
  CHECK(set.label_of(0) == 0);
  CHECK(set.label_of(1) == 1);

  const auto loaded_u = load_csv(unlabelled.string());
  REQUIRE(std::holds_alternative<UnlabeledSet>(loaded_u));
  CHECK(std::get<UnlabeledSet>(loaded_u).size() == 2);

  std::filesystem::remove(labelled);
  std::filesystem::remove(unlabelled);
}

TEST_CASE("csv: save/load round-trip is bit-identical") {
  auto [source, target] = gen_toy(mild_preset(13));
  const auto path = std::filesystem::temp_directory_path() / "usfan_rt.csv";
  save_csv(source, path.string());
  const auto loaded = load_csv(path.string());
  REQUIRE(std::holds_alternative<LabeledSet>(loaded));
  const auto& set = std::get<LabeledSet>(loaded);
  CHECK(set.inputs == source.inputs);
  CHECK(set.labels == source.labels);

  const UnlabeledSet unl{target.inputs};
  save_csv(unl, path.string());
  const auto loaded_u = load_csv(path.string());
  REQUIRE(std::holds_alternative<UnlabeledSet>(loaded_u));
  CHECK(std::get<UnlabeledSet>(loaded_u).inputs == target.inputs);
  std::filesystem::remove(path);
}

TEST_CASE("csv: malformed inputs are rejected with location info") {
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = dir / "usfan_csv_bad.csv";
  SUBCASE("ragged row") {
    std::ofstream(path) << "f0,f1\n1,2\n3\n";
    CHECK_THROWS_AS(load_csv(path.string()), DataError);
  }
  SUBCASE("non-numeric cell") {
    std::ofstream(path) << "f0,f1\n1,x\n";
    CHECK_THROWS_AS(load_csv(path.string()), DataError);
  }
  SUBCASE("negative label") {
    std::ofstream(path) << "f0,label\n1,-1\n";
    CHECK_THROWS_AS(load_csv(path.string()), DataError);
  }
  SUBCASE("fractional label") {
    std::ofstream(path) << "f0,label\n1,0.5\n";
    CHECK_THROWS_AS(load_csv(path.string()), DataError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_csv((dir / "usfan_does_not_exist.csv").string()),
                    DataError);
  }
  std::filesystem::remove(path);
}
