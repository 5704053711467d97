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

// End-to-end checks of the command-line tool, driven through the shell.

#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;

const std::string kCli = USFAN_CLI_PATH;

struct CliResult {
  int exit_code;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const fs::path out = fs::temp_directory_path() / "usfan_cli_out.txt";
  const std::string cmd = kCli + " " + args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  fs::remove(out);
  return {WEXITSTATUS(status), ss.str()};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small fast settings shared by the CLI tests.
std::string fast_args(const fs::path& dir, const std::string& name) {
  return "--run.out " + dir.string() + " --run.name " + name +
         " --run.seed 3 --data.n-per-class 40 --net.hidden 8,8"
         " --train.epochs 10 --adapt.epochs 5 --laplace.samples 5";
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() /
                   ("usfan_cli_" + std::to_string(std::rand()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("cli: missing data path fails with exit 2 naming the path") {
  TempDir dir;
  const CliResult r = run_cli(
      "train-source " + fast_args(dir.path, "r") +
      " --data.preset csv --data.source-csv /nonexistent/source.csv"
      " --data.target-csv /nonexistent/target.csv");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("/nonexistent/source.csv") != std::string::npos);
}

TEST_CASE("cli: unknown flag is a usage error") {
  TempDir dir;
  const CliResult r = run_cli("train-source --no-such-flag 1");
  CHECK(r.exit_code == 1);
}

TEST_CASE("cli: train-source writes checkpoint and metrics, deterministically") {
  TempDir dir;
  const std::string args = "train-source " + fast_args(dir.path, "a");
  CHECK(run_cli(args).exit_code == 0);
  const fs::path run = dir.path / "a";
  CHECK(fs::exists(run / "source_ckpt.json"));
  CHECK(fs::exists(run / "source_metrics.csv"));
  CHECK(fs::exists(run / "config.resolved.ini"));
  const std::string first = slurp(run / "source_ckpt.json");

  CHECK(run_cli("train-source " + fast_args(dir.path, "b")).exit_code == 0);
  CHECK(slurp(dir.path / "b" / "source_ckpt.json") == first);
}

TEST_CASE("cli: full pipeline, posterior gating and log headers") {
  TempDir dir;
  const std::string args = fast_args(dir.path, "run");
  REQUIRE(run_cli("train-source " + args).exit_code == 0);

  SUBCASE("adapt without a posterior instructs to run fit-laplace") {
    const CliResult r = run_cli("adapt " + args);
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("fit-laplace") != std::string::npos);
  }

  SUBCASE("baseline adapt works without a posterior and records its mode") {
    CHECK(run_cli("adapt " + args + " --adapt.baseline").exit_code == 0);
    const std::string log = slurp(dir.path / "run" / "adapt_log.csv");
    CHECK(log.rfind("# mode=shot-im", 0) == 0);
  }

  SUBCASE("fit-laplace then adapt, eval, grid, entropy") {
    REQUIRE(run_cli("fit-laplace " + args).exit_code == 0);
    const fs::path run = dir.path / "run";
    CHECK(fs::exists(run / "posterior.json"));

    REQUIRE(run_cli("adapt " + args).exit_code == 0);
    const std::string log = slurp(run / "adapt_log.csv");
    CHECK(log.rfind("# mode=usfan", 0) == 0);

    CHECK(run_cli("eval " + args).exit_code == 0);
    CHECK(fs::exists(run / "metrics.csv"));
    const std::string metrics_once = slurp(run / "metrics.csv");
    CHECK(run_cli("eval " + args).exit_code == 0);
    CHECK(slurp(run / "metrics.csv") == metrics_once);  // idempotent

    CHECK(run_cli("grid " + args + " --grid.nx 10 --grid.ny 10").exit_code == 0);
    CHECK(fs::exists(run / "grid.csv"));
    CHECK(run_cli("entropy " + args).exit_code == 0);
    CHECK(fs::exists(run / "entropy.csv"));
  }
}

TEST_CASE("cli: config file values apply and flags override them") {
  TempDir dir;
  const fs::path cfg = dir.path / "cfg.toml";
  {
    std::ofstream out(cfg);
    out << "[run]\nname = \"fromcfg\"\nseed = 3\n"
        << "[data]\nn-per-class = 40\n"
        << "[net]\nhidden = \"8,8\"\n"
        << "[train]\nepochs = 10\n"
        << "[adapt]\nepochs = 5\n"
        << "[laplace]\nsamples = 5\n";
  }
  const CliResult r = run_cli("train-source --config " + cfg.string() +
                              " --run.out " + dir.path.string());
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir.path / "fromcfg" / "source_ckpt.json"));

  // flag wins over the file
  const CliResult r2 = run_cli("train-source --config " + cfg.string() +
                               " --run.out " + dir.path.string() +
                               " --run.name flagged");
  CHECK(r2.exit_code == 0);
  CHECK(fs::exists(dir.path / "flagged" / "source_ckpt.json"));

  // unknown config key is a data error
  {
    std::ofstream out(cfg, std::ios::app);
    out << "[bogus]\nkey = 1\n";
  }
  CHECK(run_cli("train-source --config " + cfg.string()).exit_code == 2);
}

TEST_CASE("cli: fit-laplace rejects a checkpoint/data dimension mismatch") {
  TempDir dir;
  const std::string args = fast_args(dir.path, "dims");
  REQUIRE(run_cli("train-source " + args).exit_code == 0);  // 2-D net

  const fs::path wide_src = dir.path / "wide_source.csv";
  const fs::path wide_tgt = dir.path / "wide_target.csv";
  std::ofstream(wide_src) << "f0,f1,f2,label\n1,2,3,0\n4,5,6,1\n7,8,9,2\n";
  std::ofstream(wide_tgt) << "f0,f1,f2\n1,2,3\n";
  const CliResult r = run_cli(
      "fit-laplace " + args + " --data.preset csv --data.source-csv " +
      wide_src.string() + " --data.target-csv " + wide_tgt.string() +
      " --laplace.holdout-frac 0.34");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("does not match") != std::string::npos);
}

TEST_CASE("cli: sweep emits the accuracy-vs-shift table") {
  TempDir dir;
  const CliResult r = run_cli(
      "sweep " + fast_args(dir.path, "sw") +
      " --sweep.steps 2 --data.n-per-class 30 --train.epochs 5");
  CHECK(r.exit_code == 0);
  const std::string table = slurp(dir.path / "sw" / "sweep.csv");
  CHECK(table.rfind("shift_scale,map_acc,shot_im_acc,usfan_acc\n", 0) == 0);
  CHECK(std::count(table.begin(), table.end(), '\n') == 3);  // header + 2 rows
}

TEST_CASE("cli: committed config files parse") {
  TempDir dir;
  for (const char* name : {"toy_mild.toml", "toy_strong.toml"}) {
    const fs::path cfg = fs::path(USFAN_REPO_ROOT) / "configs" / name;
    REQUIRE(fs::exists(cfg));
    // tiny override so the run is fast; the file must parse cleanly
    const CliResult r = run_cli("train-source --config " + cfg.string() +
                                " --run.out " + dir.path.string() +
                                " --train.epochs 3 --data.n-per-class 20"
                                " --net.hidden 8");
    CHECK(r.exit_code == 0);
  }
}
