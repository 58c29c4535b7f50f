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

// Unlabeled-loss strategies. FineSSL plus the threshold baselines:
//
//   supervised      labeled CE only
//   pl              masked CE of the weak view against its own argmax
//   fixmatch        masked CE of the strong view against the weak argmax
//   flexmatch_lite  fixmatch with per-class thresholds tau*M(beta_k),
//                   M(b) = b/(2-b), floored at tau/2
//   debiaspl_lite   fixmatch on weak logits adjusted by -lambda_d*log(p_bar)
//   finessl         margin softmax + decoupled label smoothing + psi weights
//
// The flexmatch and debias mappings are lite approximations, not the
// reference implementations.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>

#include "finessl/embedstore.hpp"
#include "finessl/model.hpp"
#include "finessl/numkit.hpp"
#include "finessl/objective.hpp"

namespace finessl {

enum class Variant { kSupervised, kPl, kFixMatch, kFlexMatchLite, kDebiasPlLite, kFineSsl };

struct StrategySpec {
  Variant variant = Variant::kFineSsl;
  double tau = 0.7;
  double lambda_d = 0.5;
  double m_ema = 0.999;

  /// Throws ConfigError when a parameter is out of range.
  void validate() const;
  /// True when the variant reads pace counts.
  bool uses_pace() const { return variant == Variant::kFineSsl || variant == Variant::kFlexMatchLite; }

  bool operator==(const StrategySpec&) const = default;
};

std::string variant_name(Variant v);
/// Accepts the names printed by variant_name. Throws ConfigError.
Variant parse_variant(const std::string& name);

/// (argmax, max); ties go to the lowest index.
std::pair<std::size_t, double> pseudo_label(std::span<const double> q);

/// tau_k = max(tau * M(beta_k), tau/2) with beta_k = counts_k / max(counts)
/// (beta = 1 everywhere when all counts are zero).
Vector flex_thresholds(std::span<const double> counts, double tau);

/// EMA of the pseudo-label marginal, floored at 1e-6 and renormalized.
class DebiasState {
 public:
  explicit DebiasState(std::size_t num_classes);
  DebiasState(Vector p_bar);

  const Vector& p_bar() const { return p_bar_; }
  /// p_bar <- m*p_bar + (1-m)*(one-hot marginal of `labels`).
  void update(std::span<const std::size_t> labels, double m_ema);

 private:
  Vector p_bar_;
};

Vector debias_logits(std::span<const double> z, const DebiasState& state, double lambda_d);

/// Pseudo-label bookkeeping for one batch.
struct PseudoBatchStats {
  Vector hist;             // confident pseudo-labels per class
  std::size_t confident = 0;
  std::size_t correct = 0;    // among confident, when truth is known
  std::size_t incorrect = 0;
  double conf_sum = 0.0;      // sum of max-probability over all rows
  std::size_t rows = 0;
};

/// Mutable state some strategies carry between steps.
struct StrategyContext {
  Margins margins;                 // finessl
  Vector pace_counts;              // flexmatch_lite
  std::optional<DebiasState> debias;
  FineSslWeights weights;
  double stats_threshold = 0.7;    // what counts as "confident" in stats
  std::span<const std::int32_t> truth;  // dataset ground truth, may be empty
};

struct UnlabeledTerms {
  double loss = 0.0;
  double aux_loss = 0.0;   // finessl only: cons_aux
  PseudoBatchStats stats;
};

/// Everything one optimizer step needs.
struct StepResult {
  double sup_loss = 0.0;    // main-branch supervised term (plus sup_aux for finessl)
  double unsup_loss = 0.0;  // unlabeled terms
  LossBundle bundle;        // finessl only; baselines fill sup_main/cons_main
  GradBundle grad;
  PseudoBatchStats stats;
  Matrix q_weak;            // main head softmax on the weak view (pre-update)
};

/// Unlabeled terms of `spec` with their gradient accumulated into `grad`.
UnlabeledTerms unlabeled_step(const StrategySpec& spec, const Heads& heads, const Batch& batch,
                              StrategyContext& ctx, GradBundle& grad);

/// Supervised + unlabeled loss and gradient for one batch.
StepResult compute_step(const StrategySpec& spec, const Heads& heads, const Batch& batch, StrategyContext& ctx);

}  // namespace finessl
