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

#include "commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "finessl/embedstore.hpp"
#include "finessl/error.hpp"
#include "finessl/model.hpp"
#include "finessl/trainer.hpp"

namespace finessl::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("FINESSL_LOG");
  if (env == nullptr) return LogLevel::kError;
  const std::string v(env);
  if (v == "debug") return LogLevel::kDebug;
  if (v == "info") return LogLevel::kInfo;
  return LogLevel::kError;
}

class Logger {
 public:
  Logger(std::ostream& err) : err_(err), level_(log_level()) {}

  void info(const std::string& msg) { emit(LogLevel::kInfo, "info", msg); }
  void debug(const std::string& msg) { emit(LogLevel::kDebug, "debug", msg); }

 private:
  void emit(LogLevel lvl, const char* tag, const std::string& msg) {
    if (lvl > level_) return;
    std::lock_guard<std::mutex> lock(mu_);
    err_ << tag << ": " << msg << '\n';
  }

  std::ostream& err_;
  LogLevel level_;
  std::mutex mu_;
};

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

// Sample standard deviation (n-1); a single value has std 0.
MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return r;
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return r;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::uint64_t s = 0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), s);
    if (tok.empty() || res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
      throw UsageError("invalid seed '" + tok + "'");
    }
    if (std::find(seeds.begin(), seeds.end(), s) != seeds.end()) throw UsageError("duplicate seed " + tok);
    seeds.push_back(s);
  }
  if (seeds.empty()) throw UsageError("--seeds needs at least one seed");
  return seeds;
}

// FNV-1a over the file bytes; identifies a dataset independent of its path.
std::string file_fingerprint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

EmbeddingDataset load_dataset(const std::string& path, const std::string& truth_path) {
  EmbeddingDataset d = read_emb1(path);
  if (!truth_path.empty()) {
    auto truth = read_label_sidecar(truth_path);
    if (truth.size() != d.num_samples) throw ConfigError("truth file has " + std::to_string(truth.size()) +
                                                         " rows, dataset has " + std::to_string(d.num_samples));
    d.hidden_labels = std::move(truth);
    d.validate();
  }
  return d;
}

// ---- gen -------------------------------------------------------------------

struct GenArgs {
  std::uint32_t classes = 10;
  std::uint32_t dim = 16;
  std::vector<std::uint32_t> labeled{4};
  std::vector<std::uint32_t> unlabeled{200};
  double sep = 6.0;
  double noise = 1.0;
  std::uint32_t ood = 0;
  std::vector<double> bias;
  std::uint32_t test_per_class = 0;
  std::string test_out;
  std::string truth_out;
  bool prototypes = false;
  std::uint64_t seed = 1;
  std::string out;
  // longtail
  std::uint32_t n1 = 50;
  std::uint32_t m1 = 400;
  double rho = 10.0;
  double rho_u = 0.0;  // 0 = same as rho
};

void add_common_gen_flags(CLI::App* cmd, GenArgs& a) {
  cmd->add_option("--classes", a.classes, "number of classes")->capture_default_str();
  cmd->add_option("--dim", a.dim, "embedding dimension")->capture_default_str();
  cmd->add_option("--sep", a.sep, "minimum mean distance in units of --noise")->capture_default_str();
  cmd->add_option("--noise", a.noise, "per-dimension noise sd")->capture_default_str();
  cmd->add_option("--ood", a.ood, "number of out-of-distribution unlabeled rows")->capture_default_str();
  cmd->add_option("--bias", a.bias, "per-class noise multipliers (comma separated)")->delimiter(',');
  cmd->add_option("--test-per-class", a.test_per_class, "rows per class in the test split")->capture_default_str();
  cmd->add_option("--test-out", a.test_out, "EMB1 path for the test split");
  cmd->add_option("--truth-out", a.truth_out, "label sidecar with ground truth for every training row");
  cmd->add_flag("--prototypes", a.prototypes, "store normalized class means as prototypes");
  cmd->add_option("--seed", a.seed, "generator seed")->capture_default_str();
  cmd->add_option("--out", a.out, "EMB1 output path")->required();
}

int do_gen(const GenArgs& a, bool longtail, std::ostream& out, Logger& log) {
  BlobParams p;
  p.classes = a.classes;
  p.dim = a.dim;
  p.class_sep = a.sep;
  p.noise_sd = a.noise;
  p.n_ood = a.ood;
  p.bias_profile = a.bias;
  p.test_per_class = a.test_per_class;
  p.with_prototypes = a.prototypes;
  if (longtail) {
    p.labeled_per_class = longtail_counts(a.n1, a.classes, a.rho);
    p.unlabeled_per_class = longtail_counts(a.m1, a.classes, a.rho_u > 0.0 ? a.rho_u : a.rho);
  } else {
    p.labeled_per_class = a.labeled;
    p.unlabeled_per_class = a.unlabeled;
    if (std::all_of(a.labeled.begin(), a.labeled.end(), [](std::uint32_t v) { return v == 0; })) {
      throw ConfigError("SSL requires labeled samples");
    }
    if (std::all_of(a.unlabeled.begin(), a.unlabeled.end(), [](std::uint32_t v) { return v == 0; }) && a.ood == 0) {
      throw ConfigError("SSL requires unlabeled samples");
    }
  }
  if (!a.test_out.empty() && a.test_per_class == 0) throw UsageError("--test-out needs --test-per-class > 0");
  RandomStream rng(a.seed, StreamId::kDataGen);
  GeneratedData g = gen_blobs(p, rng);
  const std::vector<std::int32_t> truth = *g.train.hidden_labels;
  write_emb1(g.train, a.out);
  if (!a.truth_out.empty()) write_label_sidecar(truth, a.truth_out);
  if (!a.test_out.empty() && g.test) write_emb1(*g.test, a.test_out);
  log.info("wrote " + a.out + " (" + std::to_string(g.train.num_samples) + " rows)");
  out << "wrote " << a.out << " N=" << g.train.num_samples << " D=" << g.train.dim << " C=" << g.train.num_classes
      << " labeled=" << g.train.count_labeled() << " unlabeled=" << g.train.count_unlabeled() << '\n';
  return kExitOk;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string test;
  std::string truth;
  std::string seeds = "1";
  std::string out;
  bool force = false;
  bool parallel = false;
};

std::optional<double> final_value(const RunReport& r, std::optional<double> EpochRecord::*field) {
  for (auto it = r.epochs.rbegin(); it != r.epochs.rend(); ++it) {
    if ((*it).*field) return (*it).*field;
  }
  return std::nullopt;
}

int do_train(const TrainArgs& a, std::ostream& out, Logger& log) {
  TrainConfig base = a.config.empty() ? TrainConfig{} : load_config(a.config);
  base.validate();
  const auto seeds = parse_seed_list(a.seeds);

  const fs::path out_dir(a.out);
  if (fs::exists(out_dir)) {
    if (!fs::is_directory(out_dir)) throw IoError(a.out + " exists and is not a directory");
    if (!fs::is_empty(out_dir) && !a.force) {
      throw UsageError("output directory " + a.out + " is not empty; pass --force to overwrite");
    }
    if (a.force) {
      for (const auto& entry : fs::directory_iterator(out_dir)) fs::remove_all(entry.path());
    }
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + a.out + ": " + ec.message());

  const EmbeddingDataset train = load_dataset(a.data, a.truth);
  std::optional<EmbeddingDataset> test;
  if (!a.test.empty()) test = read_emb1(a.test);

  std::vector<std::optional<RunReport>> reports(seeds.size());
  auto run_one = [&](std::size_t i) {
    TrainConfig cfg = base;
    cfg.seed = seeds[i];
    log.info("seed " + std::to_string(cfg.seed) + ": training " + variant_name(cfg.strategy.variant));
    reports[i] = run_training(train, test ? &*test : nullptr, cfg);
  };
  if (a.parallel && seeds.size() > 1) {
    std::vector<std::exception_ptr> errors(seeds.size());
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      threads.emplace_back([&, i] {
        try {
          run_one(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  } else {
    for (std::size_t i = 0; i < seeds.size(); ++i) run_one(i);
  }

  Json manifest;
  manifest["engine_version"] = kEngineVersion;
  manifest["strategy"] = variant_name(base.strategy.variant);
  manifest["config"] = render_config(base);
  manifest["seeds"] = seeds;
  manifest["data"] = fs::absolute(a.data).lexically_normal().string();
  manifest["data_fingerprint"] = file_fingerprint(a.data);
  manifest["test"] = a.test.empty() ? Json(nullptr) : Json(fs::absolute(a.test).lexically_normal().string());
  manifest["test_fingerprint"] = a.test.empty() ? Json(nullptr) : Json(file_fingerprint(a.test));
  manifest["truth"] = a.truth.empty() ? Json(nullptr) : Json(fs::absolute(a.truth).lexically_normal().string());
  manifest["output_dir"] = fs::absolute(out_dir).lexically_normal().string();
  Json runs = Json::array();
  std::vector<double> accs;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const RunReport& r = *reports[i];
    const std::string stem = "seed_" + std::to_string(seeds[i]);
    Json run;
    run["seed"] = seeds[i];
    write_text(out_dir / (stem + ".jsonl"), r.to_jsonl());
    run["report"] = stem + ".jsonl";
    write_hds1(r.heads, out_dir / (stem + ".hds1"));
    run["checkpoint"] = stem + ".hds1";
    if (r.groups_main) {
      write_conf_groups_csv(*r.groups_main, out_dir / (stem + "_conf_main.csv"));
      write_conf_groups_csv(*r.groups_aux, out_dir / (stem + "_conf_aux.csv"));
      run["conf_groups_main"] = stem + "_conf_main.csv";
      run["conf_groups_aux"] = stem + "_conf_aux.csv";
    }
    const auto acc = final_value(r, &EpochRecord::test_acc);
    run["final_test_acc"] = acc ? Json(*acc) : Json(nullptr);
    if (acc) accs.push_back(*acc);
    runs.push_back(std::move(run));
  }
  manifest["runs"] = std::move(runs);
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");

  if (accs.size() == seeds.size()) {
    const MeanStd ms = mean_std(accs);
    out << "test_acc mean=" << fmt(ms.mean) << " std=" << fmt(ms.std) << " seeds=" << seeds.size() << '\n';
  } else {
    out << "test_acc unavailable (no --test split)\n";
  }
  return kExitOk;
}

// ---- compare ---------------------------------------------------------------

struct RunSummary {
  std::string strategy;
  std::string fingerprint;
  std::vector<double> acc, entropy, ece;
};

Json last_json_line(const fs::path& path) {
  const std::string text = read_text(path);
  std::istringstream in(text);
  std::string line, last;
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  if (last.empty()) throw IoError("empty report " + path.string());
  return Json::parse(last);
}

RunSummary summarize_manifest(const fs::path& path) {
  const Json m = Json::parse(read_text(path));
  RunSummary s;
  s.strategy = m.at("strategy").get<std::string>();
  s.fingerprint = m.at("data_fingerprint").get<std::string>();
  if (!m.at("test_fingerprint").is_null()) s.fingerprint += "/" + m.at("test_fingerprint").get<std::string>();
  const fs::path dir = path.parent_path();
  for (const Json& run : m.at("runs")) {
    const Json rec = last_json_line(dir / run.at("report").get<std::string>());
    if (!rec.at("test_acc").is_null()) s.acc.push_back(rec.at("test_acc").get<double>());
    s.entropy.push_back(rec.at("pl_entropy").get<double>());
    if (!rec.at("ece").is_null()) s.ece.push_back(rec.at("ece").get<double>());
  }
  return s;
}

std::string csv_pair(const std::vector<double>& v, std::size_t expected) {
  if (v.size() != expected || v.empty()) return ",";
  const MeanStd ms = mean_std(v);
  return fmt(ms.mean) + "," + fmt(ms.std);
}

int do_compare(const std::vector<std::string>& manifests, const std::string& out_path, std::ostream& out) {
  if (manifests.size() < 2) throw UsageError("compare needs at least 2 manifests");
  std::vector<RunSummary> rows;
  for (const auto& m : manifests) rows.push_back(summarize_manifest(m));
  for (const auto& r : rows) {
    if (r.fingerprint != rows.front().fingerprint) {
      throw ConfigError("manifest mismatch: runs use different datasets");
    }
  }
  std::ostringstream csv;
  csv << "strategy,acc_mean,acc_std,pl_entropy_mean,pl_entropy_std,ece_mean,ece_std,runs\n";
  for (const auto& r : rows) {
    const std::size_t n = r.entropy.size();
    csv << r.strategy << ',' << csv_pair(r.acc, n) << ',' << csv_pair(r.entropy, n) << ',' << csv_pair(r.ece, n)
        << ',' << n << '\n';
  }
  if (out_path.empty()) {
    out << csv.str();
  } else {
    write_text(out_path, csv.str());
  }
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string test;
  std::string truth;
  std::string config;
};

int do_eval(const EvalArgs& a, std::ostream& out) {
  const TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config(a.config);
  const Heads heads = read_hds1(a.checkpoint);
  EmbeddingDataset train = load_dataset(a.data, a.truth);
  std::optional<EmbeddingDataset> test;
  if (!a.test.empty()) test = read_emb1(a.test);
  if (train.dim != heads.input_dim || train.num_classes != heads.num_classes) {
    throw ConfigError("checkpoint shape does not match the dataset");
  }
  if (cfg.normalize) {
    normalize_features(train);
    if (test) normalize_features(*test);
  }
  const auto truth = ground_truth(train).value_or(std::vector<std::int32_t>{});
  const double threshold = cfg.strategy.variant == Variant::kFineSsl ? cfg.zeta : cfg.strategy.tau;
  const EvalSnapshot s = evaluate(heads, train, test ? &*test : nullptr, truth, threshold, cfg.ece_bins);
  Json j;
  j["test_acc"] = s.test_acc ? Json(*s.test_acc) : Json(nullptr);
  j["ece"] = s.ece ? Json(*s.ece) : Json(nullptr);
  j["pl_acc"] = s.pl.accuracy ? Json(*s.pl.accuracy) : Json(nullptr);
  j["pl_entropy"] = s.pl.entropy;
  j["mean_conf"] = s.pl.mean_conf;
  j["mean_conf_confident"] = s.pl.mean_conf_confident;
  j["pseudo_label_hist"] = s.pl.hist;
  out << j.dump() << '\n';
  return kExitOk;
}

void report_error(std::ostream& err, const char* kind, int code, const std::string& message,
                  std::optional<std::int64_t> step = std::nullopt) {
  Json j;
  j["error"] = kind;
  j["exit"] = code;
  j["message"] = message;
  if (step) j["step"] = *step;
  err << j.dump() << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Logger log(err);
  CLI::App app{"semi-supervised training over frozen embeddings", "finessl"};
  app.require_subcommand(1);

  GenArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen", "generate a synthetic EMB1 dataset");
  gen_cmd->require_subcommand(1);
  CLI::App* blobs = gen_cmd->add_subcommand("blobs", "Gaussian blobs");
  add_common_gen_flags(blobs, gen);
  blobs->add_option("--labeled", gen.labeled, "labeled rows per class (one value or one per class)")
      ->delimiter(',');
  blobs->add_option("--unlabeled", gen.unlabeled, "unlabeled rows per class (one value or one per class)")
      ->delimiter(',');
  CLI::App* longtail = gen_cmd->add_subcommand("longtail", "Gaussian blobs with long-tailed class counts");
  add_common_gen_flags(longtail, gen);
  longtail->add_option("--n1", gen.n1, "labeled rows of the head class")->capture_default_str();
  longtail->add_option("--m1", gen.m1, "unlabeled rows of the head class")->capture_default_str();
  longtail->add_option("--rho", gen.rho, "labeled imbalance ratio")->capture_default_str();
  longtail->add_option("--rho-u", gen.rho_u, "unlabeled imbalance ratio (default: --rho)");

  TrainArgs train;
  CLI::App* train_cmd = app.add_subcommand("train", "train one run per seed and write a manifest");
  train_cmd->add_option("--config", train.config, "key = value config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", train.data, "training EMB1")->required();
  train_cmd->add_option("--test", train.test, "test EMB1");
  train_cmd->add_option("--truth", train.truth, "label sidecar with ground truth for unlabeled rows");
  train_cmd->add_option("--seeds", train.seeds, "comma-separated seeds")->capture_default_str();
  train_cmd->add_option("--out", train.out, "output directory")->required();
  train_cmd->add_flag("--force", train.force, "overwrite a non-empty output directory");
  train_cmd->add_flag("--parallel", train.parallel, "run seeds on separate threads");

  std::vector<std::string> manifests;
  std::string compare_out;
  CLI::App* compare_cmd = app.add_subcommand("compare", "tabulate manifests as CSV");
  compare_cmd->add_option("manifests", manifests, "manifest.json files")->required();
  compare_cmd->add_option("--out", compare_out, "CSV path (default: stdout)");

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "HDS1 checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "training EMB1 (unlabeled rows are scored)")->required();
  eval_cmd->add_option("--test", ev.test, "test EMB1");
  eval_cmd->add_option("--truth", ev.truth, "label sidecar");
  eval_cmd->add_option("--config", ev.config, "config used for training")->check(CLI::ExistingFile);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", kExitUsage, e.what());
    return kExitUsage;
  }

  try {
    if (*blobs) return do_gen(gen, false, out, log);
    if (*longtail) return do_gen(gen, true, out, log);
    if (*train_cmd) return do_train(train, out, log);
    if (*compare_cmd) return do_compare(manifests, compare_out, out);
    if (*eval_cmd) return do_eval(ev, out);
  } catch (const NumericError& e) {
    report_error(err, "numeric", kExitNumeric, e.what(), e.step());
    return kExitNumeric;
  } catch (const UsageError& e) {
    report_error(err, "usage", kExitUsage, e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    report_error(err, "config", kExitUsage, e.what());
    return kExitUsage;
  } catch (const ParseError& e) {
    report_error(err, "parse", kExitIo, e.what());
    return kExitIo;
  } catch (const IoError& e) {
    report_error(err, "io", kExitIo, e.what());
    return kExitIo;
  } catch (const nlohmann::json::exception& e) {
    report_error(err, "io", kExitIo, std::string("malformed manifest or report: ") + e.what());
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    report_error(err, "io", kExitIo, e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    report_error(err, "internal", kExitInternal, e.what());
    return kExitInternal;
  }
  report_error(err, "usage", kExitUsage, "no command given");
  return kExitUsage;
}

}  // namespace finessl::cli
