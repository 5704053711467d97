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

// usfan: train a source classifier, fit a posterior over its head, adapt
// the feature extractor on unlabelled target data, and export evaluation
// artifacts. One run = one directory; every artifact is reproducible from
// the resolved config stored next to it.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "usfan/adaptation.hpp"
#include "usfan/datasets.hpp"
#include "usfan/errors.hpp"
#include "usfan/evaluation.hpp"
#include "usfan/laplace.hpp"
#include "usfan/net.hpp"

namespace {

namespace fs = std::filesystem;
using namespace usfan;

struct Options {
  // run
  std::string name = "run";
  std::string out_root;
  std::uint64_t seed = 1;
  // data
  std::string preset = "strong";
  double shift_scale = 1.0;
  int n_per_class = 150;
  std::string source_csv;
  std::string target_csv;
  bool open_set = false;
  int n_private = 100;
  // net
  std::string hidden = "32,32";
  // train (source stage)
  double alpha = 0.1;
  int batch = 64;
  int train_epochs = 80;
  double train_eta0 = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double decay_a = 10.0;
  double decay_b = 0.75;
  // adapt (target stage)
  double gamma = 0.5;
  int adapt_epochs = 60;
  double adapt_eta0 = 1e-2;
  double adapt_weight_decay = 5e-4;
  bool baseline = false;
  // laplace
  std::string variant = "kronecker";
  double prior_precision = 5e-4;
  double tau = 0.4;
  int mc_samples = 10;
  double holdout_frac = 0.1;
  // eval / artifacts
  std::string eval_on = "target";
  std::string eval_mode = "predictive";
  int grid_nx = 120;
  int grid_ny = 120;
  double grid_pad = 4.0;
  int bins = 30;
  // sweep
  double sweep_from = 0.0;
  double sweep_to = 1.0;
  int sweep_steps = 6;
};

// Key-value config with dotted sections: either `adapt.gamma = 0.5` or a
// `[adapt]` section followed by `gamma = 0.5`. Command-line flags override
// config values (the file is applied to the option set first).
void apply_config_file(const std::string& path, Options& opt) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);

  const std::map<std::string, std::function<void(const std::string&)>> keys = {
      {"run.name", [&](const std::string& v) { opt.name = v; }},
      {"run.out", [&](const std::string& v) { opt.out_root = v; }},
      {"run.seed", [&](const std::string& v) { opt.seed = std::stoull(v); }},
      {"data.preset", [&](const std::string& v) { opt.preset = v; }},
      {"data.shift-scale",
       [&](const std::string& v) { opt.shift_scale = std::stod(v); }},
      {"data.n-per-class",
       [&](const std::string& v) { opt.n_per_class = std::stoi(v); }},
      {"data.source-csv", [&](const std::string& v) { opt.source_csv = v; }},
      {"data.target-csv", [&](const std::string& v) { opt.target_csv = v; }},
      {"data.open-set",
       [&](const std::string& v) { opt.open_set = v == "true" || v == "1"; }},
      {"data.n-private",
       [&](const std::string& v) { opt.n_private = std::stoi(v); }},
      {"net.hidden", [&](const std::string& v) { opt.hidden = v; }},
      {"train.alpha", [&](const std::string& v) { opt.alpha = std::stod(v); }},
      {"train.batch", [&](const std::string& v) { opt.batch = std::stoi(v); }},
      {"train.epochs",
       [&](const std::string& v) { opt.train_epochs = std::stoi(v); }},
      {"train.eta0",
       [&](const std::string& v) { opt.train_eta0 = std::stod(v); }},
      {"train.momentum",
       [&](const std::string& v) { opt.momentum = std::stod(v); }},
      {"train.weight-decay",
       [&](const std::string& v) { opt.weight_decay = std::stod(v); }},
      {"train.decay-a",
       [&](const std::string& v) { opt.decay_a = std::stod(v); }},
      {"train.decay-b",
       [&](const std::string& v) { opt.decay_b = std::stod(v); }},
      {"adapt.gamma", [&](const std::string& v) { opt.gamma = std::stod(v); }},
      {"adapt.epochs",
       [&](const std::string& v) { opt.adapt_epochs = std::stoi(v); }},
      {"adapt.eta0",
       [&](const std::string& v) { opt.adapt_eta0 = std::stod(v); }},
      {"adapt.weight-decay",
       [&](const std::string& v) { opt.adapt_weight_decay = std::stod(v); }},
      {"adapt.baseline",
       [&](const std::string& v) { opt.baseline = v == "true" || v == "1"; }},
      {"laplace.variant", [&](const std::string& v) { opt.variant = v; }},
      {"laplace.prior-precision",
       [&](const std::string& v) { opt.prior_precision = std::stod(v); }},
      {"laplace.tau", [&](const std::string& v) { opt.tau = std::stod(v); }},
      {"laplace.samples",
       [&](const std::string& v) { opt.mc_samples = std::stoi(v); }},
      {"laplace.holdout-frac",
       [&](const std::string& v) { opt.holdout_frac = std::stod(v); }},
      {"eval.on", [&](const std::string& v) { opt.eval_on = v; }},
      {"eval.mode", [&](const std::string& v) { opt.eval_mode = v; }},
      {"grid.nx", [&](const std::string& v) { opt.grid_nx = std::stoi(v); }},
      {"grid.ny", [&](const std::string& v) { opt.grid_ny = std::stoi(v); }},
      {"grid.pad", [&](const std::string& v) { opt.grid_pad = std::stod(v); }},
      {"entropy.bins", [&](const std::string& v) { opt.bins = std::stoi(v); }},
      {"sweep.from",
       [&](const std::string& v) { opt.sweep_from = std::stod(v); }},
      {"sweep.to", [&](const std::string& v) { opt.sweep_to = std::stod(v); }},
      {"sweep.steps",
       [&](const std::string& v) { opt.sweep_steps = std::stoi(v); }},
  };

  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };

  std::string section;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto comment = line.find('#');
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (!section.empty()) key = section + "." + key;
    const auto it = keys.find(key);
    if (it == keys.end()) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": unknown key '" + key + "'");
    }
    try {
      it->second(value);
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": bad value for '" + key + "'");
    }
  }
}

std::vector<int> parse_hidden(const std::string& text) {
  std::vector<int> dims;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      dims.push_back(std::stoi(cell));
    } catch (const std::exception&) {
      throw UsageError("net.hidden must be a comma-separated list of ints");
    }
    if (dims.back() < 1) throw UsageError("hidden widths must be positive");
  }
  if (dims.empty()) throw UsageError("net.hidden must name at least one layer");
  return dims;
}

void write_resolved_config(const fs::path& path, const Options& opt) {
  std::ofstream out(path);
  out << "[run]\nname = \"" << opt.name << "\"\nout = \"" << opt.out_root
      << "\"\nseed = " << opt.seed << "\n\n";
  out << "[data]\npreset = \"" << opt.preset
      << "\"\nshift-scale = " << opt.shift_scale
      << "\nn-per-class = " << opt.n_per_class << "\nsource-csv = \""
      << opt.source_csv << "\"\ntarget-csv = \"" << opt.target_csv
      << "\"\nopen-set = " << (opt.open_set ? "true" : "false")
      << "\nn-private = " << opt.n_private << "\n\n";
  out << "[net]\nhidden = \"" << opt.hidden << "\"\n\n";
  out << "[train]\nalpha = " << opt.alpha << "\nbatch = " << opt.batch
      << "\nepochs = " << opt.train_epochs << "\neta0 = " << opt.train_eta0
      << "\nmomentum = " << opt.momentum
      << "\nweight-decay = " << opt.weight_decay
      << "\ndecay-a = " << opt.decay_a << "\ndecay-b = " << opt.decay_b
      << "\n\n";
  out << "[adapt]\ngamma = " << opt.gamma << "\nepochs = " << opt.adapt_epochs
      << "\neta0 = " << opt.adapt_eta0
      << "\nweight-decay = " << opt.adapt_weight_decay
      << "\nbaseline = " << (opt.baseline ? "true" : "false") << "\n\n";
  out << "[laplace]\nvariant = \"" << opt.variant
      << "\"\nprior-precision = " << opt.prior_precision
      << "\ntau = " << opt.tau << "\nsamples = " << opt.mc_samples
      << "\nholdout-frac = " << opt.holdout_frac << "\n\n";
  out << "[eval]\non = \"" << opt.eval_on << "\"\nmode = \"" << opt.eval_mode
      << "\"\n\n[grid]\nnx = " << opt.grid_nx << "\nny = " << opt.grid_ny
      << "\npad = " << opt.grid_pad << "\n\n[entropy]\nbins = " << opt.bins
      << "\n\n[sweep]\nfrom = " << opt.sweep_from << "\nto = " << opt.sweep_to
      << "\nsteps = " << opt.sweep_steps << "\n";
}

fs::path run_dir(const Options& opt) {
  fs::path root;
  if (!opt.out_root.empty()) {
    root = opt.out_root;
  } else if (const char* env = std::getenv("USFAN_OUT_ROOT")) {
    root = env;
  } else {
    root = "runs";
  }
  return root / opt.name;
}

AdaptConfig adapt_config(const Options& opt) {
  AdaptConfig cfg;
  cfg.alpha = opt.alpha;
  cfg.gamma = opt.gamma;
  cfg.batch_size = opt.batch;
  cfg.epochs_source = opt.train_epochs;
  cfg.epochs_target = opt.adapt_epochs;
  cfg.schedule.eta0 = opt.train_eta0;
  cfg.schedule.momentum = opt.momentum;
  cfg.schedule.weight_decay = opt.weight_decay;
  cfg.schedule.decay_a = opt.decay_a;
  cfg.schedule.decay_b = opt.decay_b;
  cfg.laplace.prior_precision = opt.prior_precision;
  cfg.laplace.temperature = opt.tau;
  cfg.laplace.mc_samples = opt.mc_samples;
  cfg.laplace.variant = opt.variant == "full" ? LaplaceVariant::kFull
                                              : LaplaceVariant::kKronecker;
  cfg.baseline_mode = opt.baseline;
  cfg.seed = opt.seed;
  return cfg;
}

SgdSchedule target_schedule(const Options& opt) {
  SgdSchedule schedule;
  schedule.eta0 = opt.adapt_eta0;
  schedule.momentum = opt.momentum;
  schedule.weight_decay = opt.adapt_weight_decay;
  schedule.decay_a = opt.decay_a;
  schedule.decay_b = opt.decay_b;
  return schedule;
}

struct Data {
  LabeledSet source;
  LabeledSet target;  ///< labels only for evaluation
};

Data load_data(const Options& opt) {
  if (opt.preset == "csv") {
    if (opt.source_csv.empty() || opt.target_csv.empty()) {
      throw UsageError("preset=csv needs data.source-csv and data.target-csv");
    }
    auto source = load_csv(opt.source_csv);
    if (!std::holds_alternative<LabeledSet>(source)) {
      throw DataError(opt.source_csv + ": source data needs a label column");
    }
    auto target = load_csv(opt.target_csv);
    LabeledSet target_set;
    if (std::holds_alternative<LabeledSet>(target)) {
      target_set = std::get<LabeledSet>(target);
    } else {
      // no labels: keep inputs, mark labels empty
      target_set.inputs = std::get<UnlabeledSet>(target).inputs;
      target_set.labels = Matrix(0, 0);
    }
    return {std::get<LabeledSet>(source), std::move(target_set)};
  }

  BlobSpec spec;
  if (opt.preset == "mild") {
    spec = mild_preset(opt.seed);
  } else if (opt.preset == "strong") {
    spec = strong_preset(opt.seed);
  } else if (opt.preset == "scale") {
    spec = preset_with_scale(opt.shift_scale, opt.seed);
  } else {
    throw UsageError("unknown data.preset '" + opt.preset + "'");
  }
  spec.n_per_class = opt.n_per_class;

  if (opt.open_set) {
    OpenSetSpec open = open_set_preset(opt.seed);
    open.base = spec;
    open.n_private = opt.n_private;
    auto [source, target] = gen_open_set(open);
    return {std::move(source), std::move(target)};
  }
  auto [source, target] = gen_toy(spec);
  return {std::move(source), std::move(target)};
}

bool target_has_labels(const Data& data) {
  return data.target.labels.size() > 0;
}

fs::path ckpt_path(const Options& opt) { return run_dir(opt) / "source_ckpt.json"; }
fs::path adapted_path(const Options& opt) {
  return run_dir(opt) / "adapted_ckpt.json";
}
fs::path posterior_path(const Options& opt) {
  return run_dir(opt) / "posterior.json";
}

DenseNet load_ckpt_or_die(const fs::path& path) {
  if (!fs::exists(path)) {
    throw DataError("missing checkpoint " + path.string() +
                    " (run train-source first)");
  }
  return load_checkpoint(path.string());
}

int cmd_train_source(const Options& opt) {
  const Data data = load_data(opt);
  AdaptConfig cfg = adapt_config(opt);

  Rng init(mix_seed(opt.seed, 0));
  std::vector<int> dims;
  dims.push_back(static_cast<int>(data.source.inputs.cols()));
  for (int h : parse_hidden(opt.hidden)) dims.push_back(h);
  dims.push_back(data.source.num_classes());
  DenseNet net = DenseNet::random(dims, init);

  const RunReport report = train_source(net, data.source, cfg);
  const fs::path dir = run_dir(opt);
  save_checkpoint(net, ckpt_path(opt).string());
  save_csv(data.source, (dir / "source.csv").string());
  if (target_has_labels(data)) {
    save_csv(data.target, (dir / "target.csv").string());
  } else {
    save_csv(UnlabeledSet{data.target.inputs}, (dir / "target.csv").string());
  }

  std::ofstream metrics(dir / "source_metrics.csv");
  metrics << "epoch,loss,accuracy\n";
  for (std::size_t e = 0; e < report.epochs.size(); ++e) {
    metrics << e << ',' << report.epochs[e].loss_total << ','
            << report.epochs[e].accuracy << '\n';
  }
  std::cout << "source training done: accuracy "
            << report.final_accuracy << ", checkpoint "
            << ckpt_path(opt).string() << "\n";
  return 0;
}

int cmd_fit_laplace(const Options& opt) {
  const Data data = load_data(opt);
  const AdaptConfig cfg = adapt_config(opt);
  DenseNet net = load_ckpt_or_die(ckpt_path(opt));
  if (net.input_dim() != data.source.inputs.cols()) {
    throw DataError("checkpoint input width does not match the configured data");
  }
  if (net.num_classes() != data.source.num_classes()) {
    throw DataError("checkpoint class count does not match the configured data");
  }

  // Hold out a tail slice of the source for the open-set entropy threshold.
  const int n = data.source.size();
  const int held = std::max(1, static_cast<int>(opt.holdout_frac * n));
  const int fit_n = std::max(1, n - held);
  LabeledSet fit_set{data.source.inputs.topRows(fit_n),
                     data.source.labels.topRows(fit_n)};
  LaplacePosterior posterior = LaplacePosterior::fit(net, fit_set, cfg.laplace);

  Rng rng(mix_seed(opt.seed, 0x7E57ull));
  posterior.unknown_threshold = entropy_quantile(
      net, &posterior, data.source.inputs.bottomRows(held),
      EvalMode::kPredictive, cfg.laplace, 0.99, rng);
  posterior.save(posterior_path(opt).string());
  std::cout << "posterior written to " << posterior_path(opt).string()
            << " (unknown-threshold " << *posterior.unknown_threshold << ")\n";
  return 0;
}

int cmd_adapt(const Options& opt) {
  const Data data = load_data(opt);
  const AdaptConfig base_cfg = adapt_config(opt);
  DenseNet net = load_ckpt_or_die(ckpt_path(opt));

  std::optional<LaplacePosterior> posterior;
  if (!opt.baseline) {
    if (!fs::exists(posterior_path(opt))) {
      throw UsageError("no posterior at " + posterior_path(opt).string() +
                       "; run fit-laplace first (or pass --baseline)");
    }
    posterior = LaplacePosterior::load(posterior_path(opt).string());
  }

  AdaptConfig cfg = base_cfg;
  cfg.schedule = target_schedule(opt);
  net.set_frozen(Part::kHead, true);

  const fs::path dir = run_dir(opt);
  RunLogger logger((dir / "adapt_log.csv").string(),
                   opt.baseline ? "shot-im" : "usfan");
  AdaptOptions options;
  options.logger = &logger;
  if (target_has_labels(data)) options.eval_labels = &data.target.labels;

  const UnlabeledSet target{data.target.inputs};
  const RunReport report =
      adapt_target(net, posterior ? &*posterior : nullptr, target, cfg, options);
  save_checkpoint(net, adapted_path(opt).string());
  std::cout << "adaptation done";
  if (report.final_accuracy >= 0) {
    std::cout << ": target accuracy " << report.final_accuracy;
  }
  std::cout << ", checkpoint " << adapted_path(opt).string() << "\n";
  return 0;
}

// Shared loader for the artifact commands: prefers the adapted checkpoint,
// falls back to the source one.
DenseNet load_eval_net(const Options& opt) {
  if (fs::exists(adapted_path(opt))) {
    return load_checkpoint(adapted_path(opt).string());
  }
  return load_ckpt_or_die(ckpt_path(opt));
}

std::optional<LaplacePosterior> load_posterior_if_any(const Options& opt) {
  if (fs::exists(posterior_path(opt))) {
    return LaplacePosterior::load(posterior_path(opt).string());
  }
  return std::nullopt;
}

int cmd_eval(const Options& opt) {
  const Data data = load_data(opt);
  DenseNet net = load_eval_net(opt);
  const AdaptConfig cfg = adapt_config(opt);
  auto posterior = load_posterior_if_any(opt);

  const LabeledSet* set = nullptr;
  if (opt.eval_on == "source") {
    set = &data.source;
  } else if (opt.eval_on == "target") {
    if (!target_has_labels(data)) {
      throw DataError("target data has no labels to evaluate against");
    }
    set = &data.target;
  } else {
    throw UsageError("eval.on must be source or target");
  }

  const EvalMode mode =
      opt.eval_mode == "map" ? EvalMode::kMap : EvalMode::kPredictive;
  if (mode == EvalMode::kPredictive && !posterior) {
    throw UsageError("predictive evaluation needs a posterior; run fit-laplace "
                     "or pass --eval-mode map");
  }
  std::optional<double> threshold;
  if (opt.open_set && posterior) threshold = posterior->unknown_threshold;

  Rng rng(mix_seed(opt.seed, 0xE7A1ull));
  const MetricsReport report =
      evaluate(net, posterior ? &*posterior : nullptr, *set, mode, cfg.laplace,
               threshold, rng);
  write_metrics_csv(report, (run_dir(opt) / "metrics.csv").string());
  std::cout << "accuracy " << report.accuracy << "  os " << report.os
            << "  os* " << report.os_star << "\n";
  return 0;
}

int cmd_grid(const Options& opt) {
  const Data data = load_data(opt);
  DenseNet net = load_eval_net(opt);
  const AdaptConfig cfg = adapt_config(opt);
  auto posterior = load_posterior_if_any(opt);

  GridBounds bounds;
  bounds.xmin = data.target.inputs.col(0).minCoeff() - opt.grid_pad;
  bounds.xmax = data.target.inputs.col(0).maxCoeff() + opt.grid_pad;
  bounds.ymin = data.target.inputs.col(1).minCoeff() - opt.grid_pad;
  bounds.ymax = data.target.inputs.col(1).maxCoeff() + opt.grid_pad;
  const auto cells =
      decision_grid(net, posterior ? &*posterior : nullptr, bounds,
                    opt.grid_nx, opt.grid_ny, cfg.laplace, opt.seed);
  write_grid_csv(cells, (run_dir(opt) / "grid.csv").string());
  std::cout << "grid written (" << opt.grid_nx << "x" << opt.grid_ny << ")\n";
  return 0;
}

int cmd_entropy(const Options& opt) {
  const Data data = load_data(opt);
  DenseNet net = load_eval_net(opt);
  const AdaptConfig cfg = adapt_config(opt);
  auto posterior = load_posterior_if_any(opt);
  if (!target_has_labels(data)) {
    throw DataError("entropy histograms need labelled target data");
  }
  const EvalMode mode =
      opt.eval_mode == "map" ? EvalMode::kMap : EvalMode::kPredictive;
  if (mode == EvalMode::kPredictive && !posterior) {
    throw UsageError("predictive entropy needs a posterior; run fit-laplace "
                     "or pass --eval-mode map");
  }
  Rng rng(mix_seed(opt.seed, 0x417Bull));
  const EntropyHistogram hist =
      entropy_histogram(net, posterior ? &*posterior : nullptr, data.target,
                        opt.bins, mode, cfg.laplace, rng);
  write_histogram_csv(hist, (run_dir(opt) / "entropy.csv").string());
  std::cout << "entropy histogram written (mean correct "
            << hist.mean_entropy_correct << ", incorrect "
            << hist.mean_entropy_incorrect << ")\n";
  return 0;
}

int cmd_sweep(const Options& opt) {
  if (opt.sweep_steps < 2) throw UsageError("sweep needs at least two steps");
  const fs::path dir = run_dir(opt);
  std::ofstream out(dir / "sweep.csv");
  if (!out) throw DataError("cannot write sweep table");
  out << "shift_scale,map_acc,shot_im_acc,usfan_acc\n";

  for (int i = 0; i < opt.sweep_steps; ++i) {
    const double scale = opt.sweep_from + (opt.sweep_to - opt.sweep_from) * i /
                                              (opt.sweep_steps - 1);
    BlobSpec spec = preset_with_scale(scale, opt.seed);
    spec.n_per_class = opt.n_per_class;
    auto [source, target] = gen_toy(spec);

    AdaptConfig cfg = adapt_config(opt);
    Rng init(mix_seed(opt.seed, 0));
    std::vector<int> dims{2};
    for (int h : parse_hidden(opt.hidden)) dims.push_back(h);
    dims.push_back(source.num_classes());
    DenseNet net = DenseNet::random(dims, init);
    train_source(net, source, cfg);

    Rng rng(mix_seed(opt.seed, 0xE7A1ull));
    const double map_acc =
        evaluate(net, nullptr, target, EvalMode::kMap, cfg.laplace, {}, rng)
            .accuracy;
    const LaplacePosterior posterior =
        LaplacePosterior::fit(net, source, cfg.laplace);

    const UnlabeledSet unlabeled{target.inputs};
    AdaptOptions options;
    options.eval_labels = &target.labels;

    AdaptConfig run_cfg = cfg;
    run_cfg.schedule = target_schedule(opt);

    DenseNet baseline_net = net;
    baseline_net.set_frozen(Part::kHead, true);
    AdaptConfig baseline_cfg = run_cfg;
    baseline_cfg.baseline_mode = true;
    const double shot_acc =
        adapt_target(baseline_net, nullptr, unlabeled, baseline_cfg, options)
            .final_accuracy;

    DenseNet usfan_net = net;
    usfan_net.set_frozen(Part::kHead, true);
    const double usfan_acc =
        adapt_target(usfan_net, &posterior, unlabeled, run_cfg, options)
            .final_accuracy;

    out << scale << ',' << map_acc << ',' << shot_acc << ',' << usfan_acc
        << '\n';
    std::cout << "scale " << scale << ": map " << map_acc << "  shot-im "
              << shot_acc << "  usfan " << usfan_acc << "\n";
  }
  std::cout << "sweep table written to " << (dir / "sweep.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uncertainty-guided source-free adaptation"};
  app.fallthrough(true);

  Options opt;
  // The config file is applied before parsing so command-line flags win.
  std::string config_path;
  app.add_option("--config", config_path,
                 "key-value config file with dotted sections");
  try {
    for (int i = 1; i < argc; ++i) {
      const std::string arg = argv[i];
      if (arg == "--config" && i + 1 < argc) {
        apply_config_file(argv[i + 1], opt);
      } else if (arg.rfind("--config=", 0) == 0) {
        apply_config_file(arg.substr(9), opt);
      }
    }
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
  app.add_option("--run.name", opt.name, "run directory name");
  app.add_option("--run.out", opt.out_root,
                 "output root (default $USFAN_OUT_ROOT or ./runs)");
  app.add_option("--run.seed", opt.seed, "run seed");

  app.add_option("--data.preset", opt.preset, "mild | strong | scale | csv");
  app.add_option("--data.shift-scale", opt.shift_scale,
                 "shift interpolation for preset=scale");
  app.add_option("--data.n-per-class", opt.n_per_class, "samples per class");
  app.add_option("--data.source-csv", opt.source_csv, "source CSV path");
  app.add_option("--data.target-csv", opt.target_csv, "target CSV path");
  app.add_flag("--data.open-set", opt.open_set, "append a target-private class");
  app.add_option("--data.n-private", opt.n_private, "private-class samples");

  app.add_option("--net.hidden", opt.hidden, "hidden widths, e.g. 32,32");

  app.add_option("--train.alpha", opt.alpha, "label smoothing");
  app.add_option("--train.batch", opt.batch, "mini-batch size");
  app.add_option("--train.epochs", opt.train_epochs, "source epochs");
  app.add_option("--train.eta0", opt.train_eta0, "source initial rate");
  app.add_option("--train.momentum", opt.momentum, "SGD momentum");
  app.add_option("--train.weight-decay", opt.weight_decay,
                 "source weight decay (= prior precision)");
  app.add_option("--train.decay-a", opt.decay_a, "power decay a");
  app.add_option("--train.decay-b", opt.decay_b, "power decay b");

  app.add_option("--adapt.gamma", opt.gamma, "diversity mixing");
  app.add_option("--adapt.epochs", opt.adapt_epochs, "target epochs");
  app.add_option("--adapt.eta0", opt.adapt_eta0, "target initial rate");
  app.add_option("--adapt.weight-decay", opt.adapt_weight_decay,
                 "target weight decay");
  app.add_flag("--adapt.baseline", opt.baseline,
               "uniform weights (information maximization only)");

  app.add_option("--laplace.variant", opt.variant, "kronecker | full")
      ->check(CLI::IsMember({"kronecker", "full"}));
  app.add_option("--laplace.prior-precision", opt.prior_precision,
                 "prior precision lambda");
  app.add_option("--laplace.tau", opt.tau, "predictive temperature");
  app.add_option("--laplace.samples", opt.mc_samples, "Monte Carlo draws");
  app.add_option("--laplace.holdout-frac", opt.holdout_frac,
                 "source fraction held out for the unknown threshold");

  app.add_option("--eval.on", opt.eval_on, "source | target");
  app.add_option("--eval.mode", opt.eval_mode, "map | predictive")
      ->check(CLI::IsMember({"map", "predictive"}));
  app.add_option("--grid.nx", opt.grid_nx, "grid cells along x");
  app.add_option("--grid.ny", opt.grid_ny, "grid cells along y");
  app.add_option("--grid.pad", opt.grid_pad, "padding around the data");
  app.add_option("--entropy.bins", opt.bins, "histogram bins");
  app.add_option("--sweep.from", opt.sweep_from, "first shift scale");
  app.add_option("--sweep.to", opt.sweep_to, "last shift scale");
  app.add_option("--sweep.steps", opt.sweep_steps, "sweep points");

  // repeated flags are allowed, the last occurrence wins
  for (CLI::Option* option : app.get_options()) {
    option->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }

  CLI::App* train = app.add_subcommand("train-source", "train the source model");
  CLI::App* fit = app.add_subcommand("fit-laplace", "fit the head posterior");
  CLI::App* adapt = app.add_subcommand("adapt", "adapt on unlabelled target data");
  CLI::App* eval = app.add_subcommand("eval", "classification metrics");
  CLI::App* grid = app.add_subcommand("grid", "decision-surface export");
  CLI::App* entropy = app.add_subcommand("entropy", "entropy histograms");
  CLI::App* sweep = app.add_subcommand("sweep", "accuracy vs shift scale");
  app.require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? 1 : 0;
  }

  try {
    std::error_code ec;
    fs::create_directories(run_dir(opt), ec);
    if (ec) throw DataError("cannot create run directory " +
                            run_dir(opt).string());
    write_resolved_config(run_dir(opt) / "config.resolved.ini", opt);
    if (train->parsed()) return cmd_train_source(opt);
    if (fit->parsed()) return cmd_fit_laplace(opt);
    if (adapt->parsed()) return cmd_adapt(opt);
    if (eval->parsed()) return cmd_eval(opt);
    if (grid->parsed()) return cmd_grid(opt);
    if (entropy->parsed()) return cmd_entropy(opt);
    if (sweep->parsed()) return cmd_sweep(opt);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
