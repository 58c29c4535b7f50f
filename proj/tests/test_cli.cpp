/*
 * Copyright (c) 2026 The FineSSL Engine Authors. All Rights Reserved
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
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
#include <sstream>

#include <json.hpp>

#include "commands.hpp"
#include "finessl/embedstore.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using finessl::cli::run;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.code = run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// A fresh scratch directory per test case.
fs::path scratch(const std::string& name) {
  const fs::path dir = oracle::temp_path("cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

nlohmann::json error_json(const Result& r) {
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  return nlohmann::json::parse(r.err);
}

void gen_small(const fs::path& dir, const std::string& seed = "1") {
  const Result r = cli({"gen", "blobs", "--classes", "3", "--dim", "8", "--labeled", "4", "--unlabeled", "20",
                        "--sep", "6", "--seed", seed, "--test-per-class", "10", "--test-out",
                        (dir / "t.emb1").string(), "--truth-out", (dir / "d.truth").string(), "--out",
                        (dir / "d.emb1").string()});
  REQUIRE(r.code == 0);
}

std::string small_config(const std::string& strategy) {
  return "[optim]\nlr = 0.5\nepochs = 2\nsteps_per_epoch = 10\nbatch_b = 8\n[strategy]\nstrategy = " + strategy + "\n";
}

}  // namespace

TEST_CASE("gen blobs writes a dataset that parses back") {
  const fs::path dir = scratch("gen");
  gen_small(dir);
  const auto d = finessl::read_emb1(dir / "d.emb1");
  CHECK(d.num_samples == 3 * 24);
  CHECK(d.dim == 8);
  CHECK(d.count_labeled() == 12);
  CHECK(finessl::read_emb1(dir / "t.emb1").num_samples == 30);
  CHECK(finessl::read_label_sidecar(dir / "d.truth").size() == d.num_samples);
}

TEST_CASE("gen is byte-identical for the same flags and seed") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  gen_small(a);
  gen_small(b);
  CHECK(slurp(a / "d.emb1") == slurp(b / "d.emb1"));
  CHECK(slurp(a / "t.emb1") == slurp(b / "t.emb1"));
  const fs::path c = scratch("gen_c");
  gen_small(c, "2");
  CHECK(slurp(a / "d.emb1") != slurp(c / "d.emb1"));
}

TEST_CASE("gen without labeled rows exits 2") {
  const fs::path dir = scratch("gen_nolab");
  const Result r = cli({"gen", "blobs", "--labeled", "0", "--out", (dir / "d.emb1").string()});
  CHECK(r.code == 2);
  const auto j = error_json(r);
  CHECK(j["exit"] == 2);
  CHECK(j["message"] == "SSL requires labeled samples");
  CHECK_FALSE(fs::exists(dir / "d.emb1"));
}

TEST_CASE("gen longtail uses long-tailed counts") {
  const fs::path dir = scratch("gen_lt");
  const Result r = cli({"gen", "longtail", "--classes", "10", "--n1", "50", "--rho", "10", "--m1", "100", "--out",
                        (dir / "d.emb1").string()});
  REQUIRE(r.code == 0);
  const auto d = finessl::read_emb1(dir / "d.emb1");
  std::vector<int> per_class(10, 0);
  for (auto y : d.labels) {
    if (y >= 0) ++per_class[y];
  }
  const auto want = oracle::longtail(50, 10, 10.0);
  for (int k = 0; k < 10; ++k) CHECK(per_class[k] == want[k]);
}

TEST_CASE("bad flags exit 2 with a usage error") {
  const Result r = cli({"gen", "blobs", "--classes", "many", "--out", "x"});
  CHECK(r.code == 2);
  CHECK(error_json(r)["error"] == "usage");
  CHECK(cli({}).code == 2);
}

TEST_CASE("missing data file exits 3") {
  const fs::path dir = scratch("io");
  const Result r = cli({"train", "--data", (dir / "missing.emb1").string(), "--out", (dir / "out").string()});
  CHECK(r.code == 3);
  CHECK(error_json(r)["error"] == "io");
}

TEST_CASE("corrupt data file exits 3 with the offset") {
  const fs::path dir = scratch("parse");
  spit(dir / "bad.emb1", "NOPE and some more bytes to fill a header");
  const Result r = cli({"train", "--data", (dir / "bad.emb1").string(), "--out", (dir / "out").string()});
  CHECK(r.code == 3);
  CHECK(error_json(r)["message"].get<std::string>().find("offset 0") != std::string::npos);
}

TEST_CASE("minimal supervised train") {
  const fs::path dir = scratch("train_sup");
  gen_small(dir);
  spit(dir / "run.cfg", small_config("supervised"));
  const Result r = cli({"train", "--config", (dir / "run.cfg").string(), "--data", (dir / "d.emb1").string(), "--test",
                        (dir / "t.emb1").string(), "--seeds", "1", "--out", (dir / "out").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("test_acc mean=") == 0);
  const std::string report = slurp(dir / "out" / "seed_1.jsonl");
  CHECK(std::count(report.begin(), report.end(), '\n') == 3);
  CHECK(fs::exists(dir / "out" / "seed_1.hds1"));
  CHECK(fs::exists(dir / "out" / "manifest.json"));
}

TEST_CASE("config errors exit 2 naming the problem") {
  const fs::path dir = scratch("train_cfg");
  gen_small(dir);
  spit(dir / "bad.cfg", "lambda = 1.5\n");
  Result r = cli({"train", "--config", (dir / "bad.cfg").string(), "--data", (dir / "d.emb1").string(), "--out",
                  (dir / "out").string()});
  CHECK(r.code == 2);
  CHECK(error_json(r)["message"] == "lambda must be in (0,1)");

  spit(dir / "unknown.cfg", "warmup = 3\n");
  r = cli({"train", "--config", (dir / "unknown.cfg").string(), "--data", (dir / "d.emb1").string(), "--out",
           (dir / "out").string()});
  CHECK(r.code == 2);
  CHECK(error_json(r)["message"].get<std::string>().find("'warmup'") != std::string::npos);
}

TEST_CASE("three seeds: manifest lists three reports and the printed std recomputes") {
  const fs::path dir = scratch("train_three");
  gen_small(dir);
  spit(dir / "run.cfg", small_config("fixmatch"));
  const Result r =
      cli({"train", "--config", (dir / "run.cfg").string(), "--data", (dir / "d.emb1").string(), "--test",
           (dir / "t.emb1").string(), "--truth", (dir / "d.truth").string(), "--seeds", "1,2,3", "--out",
           (dir / "out").string()});
  REQUIRE(r.code == 0);
  const auto manifest = nlohmann::json::parse(slurp(dir / "out" / "manifest.json"));
  REQUIRE(manifest["runs"].size() == 3);
  std::vector<double> acc;
  for (const auto& run : manifest["runs"]) {
    const fs::path report = dir / "out" / run["report"].get<std::string>();
    REQUIRE(fs::exists(report));
    std::istringstream in(slurp(report));
    std::string line, last;
    while (std::getline(in, line)) last = line;
    acc.push_back(nlohmann::json::parse(last)["test_acc"].get<double>());
    CHECK(fs::exists(dir / "out" / run["checkpoint"].get<std::string>()));
  }
  const double mean = (acc[0] + acc[1] + acc[2]) / 3.0;
  double ss = 0.0;
  for (double a : acc) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / 2.0);
  double printed_mean = 0.0, printed_sd = 0.0;
  REQUIRE(std::sscanf(r.out.c_str(), "test_acc mean=%lf std=%lf", &printed_mean, &printed_sd) == 2);
  CHECK(printed_mean == doctest::Approx(mean).epsilon(1e-12));
  CHECK(printed_sd == doctest::Approx(sd).epsilon(1e-12));

  // The snapshotted config reproduces the run.
  spit(dir / "snap.cfg", manifest["config"].get<std::string>());
  const Result again = cli({"train", "--config", (dir / "snap.cfg").string(), "--data", (dir / "d.emb1").string(),
                            "--test", (dir / "t.emb1").string(), "--truth", (dir / "d.truth").string(), "--seeds",
                            "1,2,3", "--out", (dir / "again").string()});
  REQUIRE(again.code == 0);
  CHECK(slurp(dir / "again" / "seed_2.jsonl") == slurp(dir / "out" / "seed_2.jsonl"));
}

TEST_CASE("parallel seeds match sequential ones") {
  const fs::path dir = scratch("train_par");
  gen_small(dir);
  spit(dir / "run.cfg", small_config("finessl"));
  const std::vector<std::string> base{"train", "--config", (dir / "run.cfg").string(), "--data",
                                      (dir / "d.emb1").string(), "--seeds", "4,5"};
  auto seq = base, par = base;
  seq.insert(seq.end(), {"--out", (dir / "seq").string()});
  par.insert(par.end(), {"--out", (dir / "par").string(), "--parallel"});
  REQUIRE(cli(seq).code == 0);
  REQUIRE(cli(par).code == 0);
  CHECK(slurp(dir / "seq" / "seed_5.jsonl") == slurp(dir / "par" / "seed_5.jsonl"));
  CHECK(slurp(dir / "seq" / "seed_4.hds1") == slurp(dir / "par" / "seed_4.hds1"));
}

TEST_CASE("train refuses a non-empty output directory unless forced") {
  const fs::path dir = scratch("train_force");
  gen_small(dir);
  spit(dir / "run.cfg", small_config("supervised"));
  const std::vector<std::string> args{"train", "--config", (dir / "run.cfg").string(), "--data",
                                      (dir / "d.emb1").string(), "--out", (dir / "out").string()};
  REQUIRE(cli(args).code == 0);
  const std::string first = slurp(dir / "out" / "seed_1.jsonl");
  const Result refused = cli(args);
  CHECK(refused.code == 2);
  CHECK(error_json(refused)["message"].get<std::string>().find("--force") != std::string::npos);
  auto forced = args;
  forced.push_back("--force");
  REQUIRE(cli(forced).code == 0);
  CHECK(slurp(dir / "out" / "seed_1.jsonl") == first);
}

TEST_CASE("a diverging run exits 4 with the step index") {
  const fs::path dir = scratch("train_nan");
  gen_small(dir);
  spit(dir / "run.cfg", "lr = 1e300\nmomentum = 0\nepochs = 1\nsteps_per_epoch = 20\nstrategy = supervised\n");
  const Result r =
      cli({"train", "--config", (dir / "run.cfg").string(), "--data", (dir / "d.emb1").string(), "--out",
           (dir / "out").string()});
  CHECK(r.code == 4);
  const auto j = error_json(r);
  CHECK(j["error"] == "numeric");
  CHECK(j.contains("step"));
}

TEST_CASE("compare tabulates runs and matches the reports") {
  const fs::path dir = scratch("compare");
  gen_small(dir);
  for (const std::string s : {"fixmatch", "finessl"}) {
    spit(dir / (s + ".cfg"), small_config(s));
    REQUIRE(cli({"train", "--config", (dir / (s + ".cfg")).string(), "--data", (dir / "d.emb1").string(), "--test",
                 (dir / "t.emb1").string(), "--seeds", "1,2", "--out", (dir / s).string()})
                .code == 0);
  }
  const Result r = cli({"compare", (dir / "fixmatch" / "manifest.json").string(),
                        (dir / "finessl" / "manifest.json").string(), "--out", (dir / "table.csv").string()});
  REQUIRE(r.code == 0);
  std::istringstream csv(slurp(dir / "table.csv"));
  std::string header, row;
  std::getline(csv, header);
  CHECK(header == "strategy,acc_mean,acc_std,pl_entropy_mean,pl_entropy_std,ece_mean,ece_std,runs");
  int rows = 0;
  while (std::getline(csv, row)) {
    ++rows;
    const std::string strategy = row.substr(0, row.find(','));
    double vals[6];
    int runs = 0;
    REQUIRE(std::sscanf(row.c_str() + strategy.size(), ",%lf,%lf,%lf,%lf,%lf,%lf,%d", &vals[0], &vals[1], &vals[2],
                        &vals[3], &vals[4], &vals[5], &runs) == 7);
    CHECK(runs == 2);
    double acc[2], ent[2], ece[2];
    for (int s = 0; s < 2; ++s) {
      std::istringstream in(slurp(dir / strategy / ("seed_" + std::to_string(s + 1) + ".jsonl")));
      std::string line, last;
      while (std::getline(in, line)) last = line;
      const auto j = nlohmann::json::parse(last);
      acc[s] = j["test_acc"];
      ent[s] = j["pl_entropy"];
      ece[s] = j["ece"];
    }
    CHECK(vals[0] == doctest::Approx((acc[0] + acc[1]) / 2.0).epsilon(1e-12));
    CHECK(vals[1] == doctest::Approx(std::abs(acc[0] - acc[1]) / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(vals[2] == doctest::Approx((ent[0] + ent[1]) / 2.0).epsilon(1e-12));
    CHECK(vals[4] == doctest::Approx((ece[0] + ece[1]) / 2.0).epsilon(1e-12));
  }
  CHECK(rows == 2);
}

TEST_CASE("compare refuses manifests over different data") {
  const fs::path dir = scratch("compare_mismatch");
  const fs::path a = dir / "a", b = dir / "b";
  fs::create_directories(a);
  fs::create_directories(b);
  gen_small(a, "1");
  gen_small(b, "2");
  for (const fs::path& d : {a, b}) {
    spit(d / "run.cfg", small_config("supervised"));
    REQUIRE(cli({"train", "--config", (d / "run.cfg").string(), "--data", (d / "d.emb1").string(), "--out",
                 (d / "out").string()})
                .code == 0);
  }
  const Result r = cli({"compare", (a / "out" / "manifest.json").string(), (b / "out" / "manifest.json").string()});
  CHECK(r.code == 2);
  CHECK(error_json(r)["error"] == "config");
}

TEST_CASE("eval scores a checkpoint") {
  const fs::path dir = scratch("eval");
  gen_small(dir);
  spit(dir / "run.cfg", small_config("finessl"));
  REQUIRE(cli({"train", "--config", (dir / "run.cfg").string(), "--data", (dir / "d.emb1").string(), "--test",
               (dir / "t.emb1").string(), "--out", (dir / "out").string()})
              .code == 0);
  const Result r = cli({"eval", "--checkpoint", (dir / "out" / "seed_1.hds1").string(), "--data",
                        (dir / "d.emb1").string(), "--test", (dir / "t.emb1").string(), "--config",
                        (dir / "run.cfg").string()});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  REQUIRE(j.contains("test_acc"));
  CHECK(j["test_acc"].get<double>() >= 0.0);
  CHECK(j["test_acc"].get<double>() <= 1.0);
}
