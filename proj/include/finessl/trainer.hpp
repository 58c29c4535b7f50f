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

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "finessl/embedstore.hpp"
#include "finessl/metrics.hpp"
#include "finessl/model.hpp"
#include "finessl/pace.hpp"
#include "finessl/strategy.hpp"

namespace finessl {

/// Hyperparameters. Defaults are the reference configuration for SSL
/// fine-tuning: SGD lr 0.03 with cosine decay, wd 5e-4, momentum 0.9,
/// B=32, mu=1, 30 epochs x 500 steps, lambda 0.5, alpha 8, gamma 3,
/// zeta 0.7, tau 0.7.
struct TrainConfig {
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint32_t batch_b = 32;
  std::uint32_t mu = 1;
  std::uint32_t epochs = 30;
  std::uint32_t steps_per_epoch = 500;
  double zeta = 0.7;
  double alpha_base = 8.0;
  double lambda = 0.5;
  double gamma = 3.0;
  StrategySpec strategy;
  std::uint64_t seed = 1;
  std::uint32_t eval_every = 1;  // epochs between evaluations

  AugmentConfig augment;
  InitSpec init;

  std::uint32_t pace_window = 0;  // 0 = steps_per_epoch
  PaceEstimator pace_estimator = PaceEstimator::kWindow;
  double pace_ema_decay = 0.999;

  bool normalize = true;  // L2-normalize features not already normalized
  std::uint32_t ece_bins = 15;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  std::uint32_t effective_window() const { return pace_window == 0 ? steps_per_epoch : pace_window; }
  std::uint64_t total_steps() const { return std::uint64_t{epochs} * steps_per_epoch; }

  bool operator==(const TrainConfig&) const = default;
};

/// Flat `key = value` text; `[section]` headers group keys but do not
/// namespace them; `#` starts a comment. Unknown keys throw ConfigError
/// ("unknown config key 'x'"). Omitted keys keep their defaults.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);

/// Every key with its effective value; parse_config(render_config(c)) == c.
std::string render_config(const TrainConfig& config);

struct OptimizerState {
  ParamSet velocity;
  std::uint64_t step = 0;
  std::uint64_t total = 0;
};

/// base * 0.5 * (1 + cos(pi * t / T)). T = 0 yields base.
double cosine_lr(std::uint64_t t, std::uint64_t total, double base);

/// g = grad + wd*param (weights only); v = momentum*v + g; param -= lr*v.
/// Throws NumericError naming the block on a non-finite gradient.
void sgd_step(Heads& heads, const GradBundle& grads, OptimizerState& opt, double lr, double momentum,
              double weight_decay);

struct EpochRecord {
  std::uint32_t epoch = 0;
  double lr = 0.0;
  std::optional<double> sup_loss;   // means over the epoch's steps
  std::optional<double> unsup_loss;
  std::optional<double> test_acc;
  std::optional<double> pl_acc;
  double pl_entropy = 0.0;
  double mean_conf = 0.0;
  double mean_conf_confident = 0.0;
  std::optional<double> ece;
  double alpha_t = 0.0;
  Vector delta;
  Vector beta;
  Vector pseudo_label_hist;
};

struct RunReport {
  std::string strategy;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  Heads heads;
  /// Final max-probability groups over unlabeled rows (needs ground truth).
  std::optional<ConfidenceGroups> groups_main;
  std::optional<ConfidenceGroups> groups_aux;

  /// One JSON object per epoch, newline-terminated.
  std::string to_jsonl() const;
};

struct EvalSnapshot {
  std::optional<double> test_acc;
  std::optional<double> ece;
  PseudoLabelStats pl;
};

/// Side-effect-free evaluation with the main head. `train` should already be
/// normalized the way training sees it.
EvalSnapshot evaluate(const Heads& heads, const EmbeddingDataset& train, const EmbeddingDataset* test,
                      std::span<const std::int32_t> truth, double threshold, std::uint32_t ece_bins);

/// Runs the full loop. `test` is optional. Deterministic given config.seed.
/// Throws NumericError (with the step index) on a non-finite loss.
RunReport run_training(const EmbeddingDataset& dataset, const EmbeddingDataset* test, const TrainConfig& config);

}  // namespace finessl
