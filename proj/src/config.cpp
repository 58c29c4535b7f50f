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

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <string_view>

#include "finessl/error.hpp"
#include "finessl/trainer.hpp"

namespace finessl {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("bad number for '" + key + "': " + v);
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("bad integer for '" + key + "': " + v);
  return out;
}

std::uint32_t to_u32(const std::string& key, const std::string& v) {
  const std::uint64_t wide = to_u64(key, v);
  if (wide > UINT32_MAX) throw ConfigError("integer too large for '" + key + "'");
  return static_cast<std::uint32_t>(wide);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("bad boolean for '" + key + "': " + v);
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string init_name(InitMode m) {
  switch (m) {
    case InitMode::kZeros: return "zeros";
    case InitMode::kGaussian: return "gaussian";
    case InitMode::kPrototypes: return "prototypes";
  }
  return "zeros";
}

InitMode parse_init(const std::string& v) {
  if (v == "zeros") return InitMode::kZeros;
  if (v == "gaussian") return InitMode::kGaussian;
  if (v == "prototypes") return InitMode::kPrototypes;
  throw ConfigError("unknown init mode '" + v + "'");
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define FINESSL_REAL(sec, name, member)                                                     \
  Field {                                                                                   \
    sec, name, [](TrainConfig& c, const std::string& v) { c.member = to_double(name, v); }, \
        [](const TrainConfig& c) { return fmt(c.member); }                                  \
  }
#define FINESSL_U32(sec, name, member)                                                   \
  Field {                                                                                \
    sec, name, [](TrainConfig& c, const std::string& v) { c.member = to_u32(name, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.member); }                    \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      FINESSL_REAL("optim", "lr", lr),
      FINESSL_REAL("optim", "momentum", momentum),
      FINESSL_REAL("optim", "weight_decay", weight_decay),
      FINESSL_U32("optim", "batch_b", batch_b),
      FINESSL_U32("optim", "mu", mu),
      FINESSL_U32("optim", "epochs", epochs),
      FINESSL_U32("optim", "steps_per_epoch", steps_per_epoch),
      Field{"run", "seed", [](TrainConfig& c, const std::string& v) { c.seed = to_u64("seed", v); },
            [](const TrainConfig& c) { return std::to_string(c.seed); }},
      FINESSL_U32("run", "eval_every", eval_every),
      FINESSL_U32("run", "ece_bins", ece_bins),
      Field{"run", "normalize", [](TrainConfig& c, const std::string& v) { c.normalize = to_bool("normalize", v); },
            [](const TrainConfig& c) { return std::string(c.normalize ? "true" : "false"); }},
      Field{"strategy", "strategy",
            [](TrainConfig& c, const std::string& v) { c.strategy.variant = parse_variant(v); },
            [](const TrainConfig& c) { return variant_name(c.strategy.variant); }},
      FINESSL_REAL("strategy", "tau", strategy.tau),
      FINESSL_REAL("strategy", "lambda_d", strategy.lambda_d),
      FINESSL_REAL("strategy", "m_ema", strategy.m_ema),
      FINESSL_REAL("finessl", "zeta", zeta),
      FINESSL_REAL("finessl", "alpha_base", alpha_base),
      FINESSL_REAL("finessl", "lambda", lambda),
      FINESSL_REAL("finessl", "gamma", gamma),
      FINESSL_U32("finessl", "pace_window", pace_window),
      Field{"finessl", "pace_estimator",
            [](TrainConfig& c, const std::string& v) {
              if (v == "window") {
                c.pace_estimator = PaceEstimator::kWindow;
              } else if (v == "ema") {
                c.pace_estimator = PaceEstimator::kEma;
              } else {
                throw ConfigError("unknown pace estimator '" + v + "'");
              }
            },
            [](const TrainConfig& c) {
              return std::string(c.pace_estimator == PaceEstimator::kWindow ? "window" : "ema");
            }},
      FINESSL_REAL("finessl", "pace_ema_decay", pace_ema_decay),
      FINESSL_REAL("augment", "weak_noise_sd", augment.weak_noise_sd),
      FINESSL_REAL("augment", "strong_noise_sd", augment.strong_noise_sd),
      FINESSL_REAL("augment", "strong_drop_frac", augment.strong_drop_frac),
      Field{"model", "init", [](TrainConfig& c, const std::string& v) { c.init.mode = parse_init(v); },
            [](const TrainConfig& c) { return init_name(c.init.mode); }},
      FINESSL_REAL("model", "init_sd", init.gaussian_sd),
      FINESSL_REAL("model", "init_scale", init.prototype_scale),
      Field{"model", "adapter", [](TrainConfig& c, const std::string& v) { c.init.use_adapter = to_bool("adapter", v); },
            [](const TrainConfig& c) { return std::string(c.init.use_adapter ? "true" : "false"); }},
  };
  return table;
}

#undef FINESSL_REAL
#undef FINESSL_U32

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_b < 1) throw ConfigError("batch_b must be >= 1");
  if (mu < 1) throw ConfigError("mu must be >= 1");
  if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
  if (!(zeta > 0.0 && zeta <= 1.0)) throw ConfigError("zeta must be in (0,1]");
  if (!(alpha_base >= 0.0)) throw ConfigError("alpha_base must be >= 0");
  if (!(lambda > 0.0 && lambda < 1.0)) throw ConfigError("lambda must be in (0,1)");
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (ece_bins < 1) throw ConfigError("ece_bins must be >= 1");
  if (!(pace_ema_decay >= 0.0 && pace_ema_decay < 1.0)) throw ConfigError("pace_ema_decay must be in [0,1)");
  if (augment.weak_noise_sd < 0.0 || augment.strong_noise_sd < 0.0) throw ConfigError("noise sds must be >= 0");
  if (!(augment.strong_drop_frac >= 0.0 && augment.strong_drop_frac < 1.0)) {
    throw ConfigError("strong_drop_frac must be in [0,1)");
  }
  strategy.validate();
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string s = trim(line);
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("malformed section header on line " + std::to_string(lineno));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value on line " + std::to_string(lineno));
    const std::string key = trim(std::string_view(s).substr(0, eq));
    const std::string value = trim(std::string_view(s).substr(eq + 1));
    bool known = false;
    for (const Field& f : fields()) {
      if (key == f.key) {
        f.set(cfg, value);
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string render_config(const TrainConfig& config) {
  std::string out;
  std::string section;
  for (const Field& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

}  // namespace finessl
