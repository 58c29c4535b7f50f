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

// Losses and their analytic logit gradients.
//
// The balanced margin softmax for target y adds alpha_t * delta[y] to every
// competitor logit, which is the same as lowering the target logit by that
// amount:
//
//   margin_ce(z, y) = -log( e^{z_y} / (e^{z_y} + sum_{k!=y} e^{z_k + a*d_y}) )
//                   = ce(z - a*d_y*e_y, y)
//
// Gradient helpers write `scale * dLoss/dz` into the caller's row, adding to
// whatever is already there.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "finessl/embedstore.hpp"
#include "finessl/model.hpp"
#include "finessl/numkit.hpp"

namespace finessl {

/// Per-class margins in [0,1] and the current scale alpha_t.
struct Margins {
  Vector delta;
  double alpha_t = 0.0;

  static Margins none(std::size_t num_classes) { return {Vector(num_classes, 0.0), 0.0}; }
};

Vector smooth_labels(std::size_t y_hat, double lambda, std::size_t num_classes);

double ce(std::span<const double> z, std::size_t y);
void ce_grad(std::span<const double> z, std::size_t y, double scale, std::span<double> dz);

double margin_ce(std::span<const double> z, std::size_t y, std::span<const double> delta, double alpha_t);
void margin_ce_grad(std::span<const double> z, std::size_t y, std::span<const double> delta, double alpha_t,
                    double scale, std::span<double> dz);

/// sum_k q[k] * margin_ce(z, k), evaluated in O(C).
double soft_margin_ce(std::span<const double> z, std::span<const double> q, std::span<const double> delta,
                      double alpha_t);
void soft_margin_ce_grad(std::span<const double> z, std::span<const double> q, std::span<const double> delta,
                         double alpha_t, double scale, std::span<double> dz);

/// Thresholded hard-label consistency, averaged over every row (masked rows
/// count in the denominator).
double consistency_fixmatch(const Matrix& z_strong, const Matrix& q_weak, double tau);

/// (1/n) sum_j psi_j * margin_ce(z_strong_j, y_hat_j).
double consistency_weighted(const Matrix& z_strong, std::span<const std::size_t> pseudo_labels,
                            std::span<const double> psi, std::span<const double> delta, double alpha_t);

struct LossBundle {
  double sup_main = 0.0;
  double cons_main = 0.0;
  double sup_aux = 0.0;
  double cons_aux = 0.0;
  double total = 0.0;
};

struct FineSslWeights {
  double lambda = 0.5;  // label smoothing for the aux consistency target
  double gamma = 3.0;   // psi = gamma * max p_aux(weak view)
};

/// Batch statistics that enter the loss as constants.
struct PseudoTargets {
  std::vector<std::size_t> labels;  // argmax of main head on the weak view
  Vector confidence;                // max of main head softmax on the weak view
  Vector psi;                       // gamma * max of aux head softmax on the weak view
  Matrix q_weak;                    // main head softmax on the weak view
};

PseudoTargets pseudo_targets(const Heads& heads, const Batch& batch, const FineSslWeights& weights);

/// Which LossBundle terms contribute to a loss/gradient evaluation.
enum LossTerm : unsigned {
  kSupMain = 1u << 0,
  kConsMain = 1u << 1,
  kSupAux = 1u << 2,
  kConsAux = 1u << 3,
  kAllTerms = 0xFu,
  kMainTerms = kSupMain | kConsMain,
  kAuxTerms = kSupAux | kConsAux,
};

/// Full objective. The aux branch reads adapter features computed with
/// `aux_feature_source` (the detached snapshot); in training that is `heads`
/// itself. Unselected terms are reported as 0 and left out of `total`.
LossBundle finessl_loss(const Heads& heads, const Batch& batch, const Margins& margins, const FineSslWeights& weights,
                        const PseudoTargets& targets, const Heads& aux_feature_source, unsigned terms = kAllTerms);

/// Convenience: targets from `heads`, aux features from `heads`.
LossBundle finessl_loss(const Heads& heads, const Batch& batch, const Margins& margins, const FineSslWeights& weights);

/// Analytic gradient of the selected terms. Aux terms never reach the adapter.
GradBundle grad(const Heads& heads, const Batch& batch, const Margins& margins, const FineSslWeights& weights,
                const PseudoTargets& targets, unsigned terms = kAllTerms, LossBundle* loss_out = nullptr);

GradBundle grad(const Heads& heads, const Batch& batch, const Margins& margins, const FineSslWeights& weights);

/// Backprop main-head logit gradients for inputs `x` into adapter and main
/// head. Shared by every strategy.
void backprop_main(const Heads& heads, const FeatureCache& cache, const Matrix& dlogits, GradBundle& grad);

}  // namespace finessl
