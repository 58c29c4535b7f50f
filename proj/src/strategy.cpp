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

#include "finessl/strategy.hpp"

#include <algorithm>
#include <cmath>

#include "finessl/error.hpp"

namespace finessl {

namespace {

constexpr double kDebiasFloor = 1e-6;

void record(PseudoBatchStats& s, const Batch& batch, std::size_t j, std::size_t label, double conf, bool confident,
            std::span<const std::int32_t> truth) {
  s.conf_sum += conf;
  ++s.rows;
  if (!confident) return;
  s.hist[label] += 1.0;
  ++s.confident;
  if (truth.empty()) return;
  if (truth[batch.unlabeled_index[j]] == static_cast<std::int32_t>(label)) {
    ++s.correct;
  } else {
    ++s.incorrect;
  }
}

// Masked hard-label CE over `z` rows. `threshold_for(k)` gives the pass
// threshold of class k.
template <typename ThresholdFn>
double masked_ce(const Matrix& q, const Matrix& z, ThresholdFn threshold_for, const Batch& batch,
                 std::span<const std::int32_t> truth, double stats_threshold, Matrix& dz, PseudoBatchStats& stats,
                 std::vector<std::size_t>* labels_out = nullptr) {
  const double inv = 1.0 / static_cast<double>(z.rows);
  double loss = 0.0;
  for (std::size_t j = 0; j < q.rows; ++j) {
    const auto [k, conf] = pseudo_label(q.row(j));
    if (labels_out) labels_out->push_back(k);
    const bool pass = conf >= threshold_for(k);
    record(stats, batch, j, k, conf, conf >= stats_threshold, truth);
    if (!pass) continue;
    loss += ce(z.row(j), k);
    ce_grad(z.row(j), k, inv, dz.row(j));
  }
  return loss * inv;
}

}  // namespace

void StrategySpec::validate() const {
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must be in (0,1]");
  if (!(lambda_d >= 0.0)) throw ConfigError("lambda_d must be >= 0");
  if (!(m_ema >= 0.0 && m_ema < 1.0)) throw ConfigError("m_ema must be in [0,1)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kSupervised: return "supervised";
    case Variant::kPl: return "pl";
    case Variant::kFixMatch: return "fixmatch";
    case Variant::kFlexMatchLite: return "flexmatch_lite";
    case Variant::kDebiasPlLite: return "debiaspl_lite";
    case Variant::kFineSsl: return "finessl";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::kSupervised, Variant::kPl, Variant::kFixMatch, Variant::kFlexMatchLite,
                    Variant::kDebiasPlLite, Variant::kFineSsl}) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown strategy '" + name + "'");
}

std::pair<std::size_t, double> pseudo_label(std::span<const double> q) {
  const std::size_t k = argmax(q);
  return {k, q[k]};
}

Vector flex_thresholds(std::span<const double> counts, double tau) {
  const double top = counts.empty() ? 0.0 : *std::max_element(counts.begin(), counts.end());
  Vector out(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    const double beta = top > 0.0 ? counts[k] / top : 1.0;
    const double mapped = beta / (2.0 - beta);
    out[k] = std::max(tau * mapped, 0.5 * tau);
  }
  return out;
}

DebiasState::DebiasState(std::size_t num_classes)
    : p_bar_(num_classes, 1.0 / static_cast<double>(num_classes)) {}

DebiasState::DebiasState(Vector p_bar) : p_bar_(std::move(p_bar)) {
  double sum = 0.0;
  for (double p : p_bar_) {
    if (!(p > 0.0)) throw UsageError("debias state: entries must be positive");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw UsageError("debias state: entries must sum to 1");
}

void DebiasState::update(std::span<const std::size_t> labels, double m_ema) {
  if (labels.empty()) return;
  Vector marginal(p_bar_.size(), 0.0);
  for (std::size_t k : labels) marginal[k] += 1.0;
  const double inv = 1.0 / static_cast<double>(labels.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < p_bar_.size(); ++k) {
    p_bar_[k] = std::max(m_ema * p_bar_[k] + (1.0 - m_ema) * marginal[k] * inv, kDebiasFloor);
    sum += p_bar_[k];
  }
  for (double& p : p_bar_) p /= sum;
}

Vector debias_logits(std::span<const double> z, const DebiasState& state, double lambda_d) {
  if (z.size() != state.p_bar().size()) throw UsageError("debias_logits: width mismatch");
  Vector out(z.begin(), z.end());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= lambda_d * std::log(state.p_bar()[k]);
  return out;
}

UnlabeledTerms unlabeled_step(const StrategySpec& spec, const Heads& heads, const Batch& batch,
                              StrategyContext& ctx, GradBundle& grad) {
  const std::size_t c = heads.num_classes;
  const std::size_t nu = batch.unlabeled_weak.rows;
  if (nu == 0) throw UsageError("unlabeled_step: batch has no unlabeled rows");
  UnlabeledTerms out;
  out.stats.hist.assign(c, 0.0);

  const FeatureCache weak = forward_features(heads, batch.unlabeled_weak);
  const Matrix z_weak = head_logits(heads, HeadKind::kMain, weak.features);

  switch (spec.variant) {
    case Variant::kSupervised: {
      const Matrix q = softmax_rows(z_weak);
      for (std::size_t j = 0; j < nu; ++j) {
        const auto [k, conf] = pseudo_label(q.row(j));
        record(out.stats, batch, j, k, conf, conf >= ctx.stats_threshold, ctx.truth);
      }
      return out;
    }
    case Variant::kPl: {
      // Weak view supplies both the target and the prediction; the target is
      // a constant.
      const Matrix q = softmax_rows(z_weak);
      Matrix dz(nu, c);
      out.loss = masked_ce(q, z_weak, [&](std::size_t) { return spec.tau; }, batch, ctx.truth, ctx.stats_threshold,
                           dz, out.stats);
      backprop_main(heads, weak, dz, grad);
      return out;
    }
    case Variant::kFixMatch:
    case Variant::kFlexMatchLite:
    case Variant::kDebiasPlLite: {
      Matrix q;
      std::vector<std::size_t> labels;
      if (spec.variant == Variant::kDebiasPlLite) {
        if (!ctx.debias) ctx.debias.emplace(c);
        q = Matrix(nu, c);
        for (std::size_t j = 0; j < nu; ++j) {
          softmax(debias_logits(z_weak.row(j), *ctx.debias, spec.lambda_d), q.row(j));
        }
      } else {
        q = softmax_rows(z_weak);
      }
      Vector thresholds(c, spec.tau);
      if (spec.variant == Variant::kFlexMatchLite) {
        if (ctx.pace_counts.size() != c) throw UsageError("flexmatch_lite: pace counts missing");
        thresholds = flex_thresholds(ctx.pace_counts, spec.tau);
      }
      const FeatureCache strong = forward_features(heads, batch.unlabeled_strong);
      const Matrix z_strong = head_logits(heads, HeadKind::kMain, strong.features);
      Matrix dz(nu, c);
      out.loss = masked_ce(q, z_strong, [&](std::size_t k) { return thresholds[k]; }, batch, ctx.truth,
                           ctx.stats_threshold, dz, out.stats, &labels);
      backprop_main(heads, strong, dz, grad);
      if (spec.variant == Variant::kDebiasPlLite) ctx.debias->update(labels, spec.m_ema);
      return out;
    }
    case Variant::kFineSsl: {
      const PseudoTargets targets = pseudo_targets(heads, batch, ctx.weights);
      LossBundle bundle;
      const GradBundle g = finessl::grad(heads, batch, ctx.margins, ctx.weights, targets, kConsMain | kConsAux, &bundle);
      add_scaled(grad, 1.0, g);
      out.loss = bundle.cons_main;
      out.aux_loss = bundle.cons_aux;
      for (std::size_t j = 0; j < nu; ++j) {
        record(out.stats, batch, j, targets.labels[j], targets.confidence[j],
               targets.confidence[j] >= ctx.stats_threshold, ctx.truth);
      }
      return out;
    }
  }
  return out;
}

StepResult compute_step(const StrategySpec& spec, const Heads& heads, const Batch& batch, StrategyContext& ctx) {
  StepResult r;
  r.grad = heads.params.zeros_like();
  const std::size_t c = heads.num_classes;
  {
    const FeatureCache weak = forward_features(heads, batch.unlabeled_weak);
    r.q_weak = softmax_rows(head_logits(heads, HeadKind::kMain, weak.features));
  }

  if (spec.variant == Variant::kFineSsl) {
    const PseudoTargets targets = pseudo_targets(heads, batch, ctx.weights);
    r.grad = finessl::grad(heads, batch, ctx.margins, ctx.weights, targets, kAllTerms, &r.bundle);
    r.sup_loss = r.bundle.sup_main + r.bundle.sup_aux;
    r.unsup_loss = r.bundle.cons_main + r.bundle.cons_aux;
    r.stats.hist.assign(c, 0.0);
    for (std::size_t j = 0; j < targets.labels.size(); ++j) {
      record(r.stats, batch, j, targets.labels[j], targets.confidence[j],
             targets.confidence[j] >= ctx.stats_threshold, ctx.truth);
    }
    return r;
  }

  const std::size_t nl = batch.labeled_x.rows;
  if (nl == 0) throw UsageError("compute_step: batch has no labeled rows");
  const FeatureCache lab = forward_features(heads, batch.labeled_x);
  const Matrix z = head_logits(heads, HeadKind::kMain, lab.features);
  Matrix dz(nl, c);
  const double inv = 1.0 / static_cast<double>(nl);
  for (std::size_t i = 0; i < nl; ++i) {
    const auto y = static_cast<std::size_t>(batch.labeled_y[i]);
    r.sup_loss += ce(z.row(i), y);
    ce_grad(z.row(i), y, inv, dz.row(i));
  }
  r.sup_loss *= inv;
  backprop_main(heads, lab, dz, r.grad);

  const UnlabeledTerms u = unlabeled_step(spec, heads, batch, ctx, r.grad);
  r.unsup_loss = u.loss;
  r.stats = u.stats;
  r.bundle.sup_main = r.sup_loss;
  r.bundle.cons_main = u.loss;
  r.bundle.total = r.sup_loss + u.loss;
  return r;
}

}  // namespace finessl
