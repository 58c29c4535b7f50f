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

#include "finessl/objective.hpp"

#include <cmath>

#include "finessl/error.hpp"
#include "finessl/simd.hpp"

namespace finessl {

namespace {

void check_class(std::size_t y, std::size_t c) {
  if (y >= c) throw UsageError("class index " + std::to_string(y) + " out of range for C=" + std::to_string(c));
}

Vector shift_target(std::span<const double> z, std::size_t y, std::span<const double> delta, double alpha_t) {
  Vector shifted(z.begin(), z.end());
  shifted[y] -= alpha_t * delta[y];
  return shifted;
}

// Per-target denominators of the soft margin loss, all relative to max(z):
//   D_k = sum_{j != k} e^{z_j - m} + e^{z_k - a*d_k - m}
// `rest` holds sum_{j != k} e^{z_j - m}; for the argmax it is summed directly
// since S - 1 would cancel.
struct SoftTerms {
  double m = 0.0;
  Vector expz;     // e^{z_j - m}
  Vector exps;     // e^{z_j - a*d_j - m}
  Vector denom;    // D_k
};

SoftTerms soft_terms(std::span<const double> z, std::span<const double> delta, double alpha_t) {
  const std::size_t c = z.size();
  SoftTerms t;
  t.m = simd::max(z);
  t.expz.resize(c);
  t.exps.resize(c);
  t.denom.resize(c);
  double total = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    t.expz[j] = std::exp(z[j] - t.m);
    t.exps[j] = std::exp(z[j] - alpha_t * delta[j] - t.m);
    total += t.expz[j];
  }
  const std::size_t top = argmax(z);
  double rest_top = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    if (j != top) rest_top += t.expz[j];
  }
  for (std::size_t k = 0; k < c; ++k) {
    const double rest = k == top ? rest_top : total - t.expz[k];
    t.denom[k] = rest + t.exps[k];
  }
  return t;
}

void check_margins(std::span<const double> z, std::span<const double> delta, double alpha_t) {
  if (delta.size() != z.size()) throw UsageError("margin vector length != number of classes");
  if (!(alpha_t >= 0.0)) throw UsageError("alpha_t must be >= 0");
}

}  // namespace

Vector smooth_labels(std::size_t y_hat, double lambda, std::size_t num_classes) {
  if (!(lambda > 0.0 && lambda < 1.0)) throw UsageError("lambda must be in (0,1)");
  check_class(y_hat, num_classes);
  const double off = lambda / static_cast<double>(num_classes);
  Vector q(num_classes, off);
  q[y_hat] = (1.0 - lambda) + off;
  return q;
}

double ce(std::span<const double> z, std::size_t y) {
  check_class(y, z.size());
  return log_sum_exp(z) - z[y];
}

void ce_grad(std::span<const double> z, std::size_t y, double scale, std::span<double> dz) {
  check_class(y, z.size());
  const Vector p = softmax(z);
  for (std::size_t k = 0; k < z.size(); ++k) dz[k] += scale * p[k];
  dz[y] -= scale;
}

double margin_ce(std::span<const double> z, std::size_t y, std::span<const double> delta, double alpha_t) {
  check_class(y, z.size());
  check_margins(z, delta, alpha_t);
  return ce(shift_target(z, y, delta, alpha_t), y);
}

void margin_ce_grad(std::span<const double> z, std::size_t y, std::span<const double> delta, double alpha_t,
                    double scale, std::span<double> dz) {
  check_class(y, z.size());
  check_margins(z, delta, alpha_t);
  ce_grad(shift_target(z, y, delta, alpha_t), y, scale, dz);
}

double soft_margin_ce(std::span<const double> z, std::span<const double> q, std::span<const double> delta,
                      double alpha_t) {
  check_margins(z, delta, alpha_t);
  if (q.size() != z.size()) throw UsageError("target distribution length != number of classes");
  double mass = 0.0;
  for (double v : q) {
    if (v < 0.0) throw UsageError("target distribution has a negative entry");
    mass += v;
  }
  if (std::abs(mass - 1.0) > 1e-6) throw UsageError("target distribution must sum to 1");
  const SoftTerms t = soft_terms(z, delta, alpha_t);
  double loss = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (q[k] == 0.0) continue;
    // -log(e^{s_k - m} / D_k)
    loss += q[k] * (std::log(t.denom[k]) - (z[k] - alpha_t * delta[k] - t.m));
  }
  return loss;
}

void soft_margin_ce_grad(std::span<const double> z, std::span<const double> q, std::span<const double> delta,
                         double alpha_t, double scale, std::span<double> dz) {
  check_margins(z, delta, alpha_t);
  const SoftTerms t = soft_terms(z, delta, alpha_t);
  const std::size_t c = z.size();
  // dL/dz_j = sum_k q_k p^(k)_j - q_j, where p^(k) is the softmax of the
  // k-shifted logits: e^{z_j-m}/D_k off the target, e^{s_k-m}/D_k on it.
  double weight_sum = 0.0;
  for (std::size_t k = 0; k < c; ++k) weight_sum += q[k] / t.denom[k];
  for (std::size_t j = 0; j < c; ++j) {
    const double own = q[j] / t.denom[j];
    const double g = t.expz[j] * (weight_sum - own) + own * t.exps[j] - q[j];
    dz[j] += scale * g;
  }
}

double consistency_fixmatch(const Matrix& z_strong, const Matrix& q_weak, double tau) {
  if (z_strong.rows != q_weak.rows) throw UsageError("consistency_fixmatch: row mismatch");
  if (z_strong.rows == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t j = 0; j < q_weak.rows; ++j) {
    const auto q = q_weak.row(j);
    const std::size_t y = argmax(q);
    if (q[y] >= tau) sum += ce(z_strong.row(j), y);
  }
  return sum / static_cast<double>(z_strong.rows);
}

double consistency_weighted(const Matrix& z_strong, std::span<const std::size_t> pseudo_labels,
                            std::span<const double> psi, std::span<const double> delta, double alpha_t) {
  if (pseudo_labels.size() != z_strong.rows || psi.size() != z_strong.rows) {
    throw UsageError("consistency_weighted: row mismatch");
  }
  if (z_strong.rows == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t j = 0; j < z_strong.rows; ++j) {
    if (psi[j] < 0.0) throw UsageError("consistency_weighted: negative weight");
    if (psi[j] == 0.0) continue;
    sum += psi[j] * margin_ce(z_strong.row(j), pseudo_labels[j], delta, alpha_t);
  }
  return sum / static_cast<double>(z_strong.rows);
}

PseudoTargets pseudo_targets(const Heads& heads, const Batch& batch, const FineSslWeights& weights) {
  const FeatureCache weak = forward_features(heads, batch.unlabeled_weak);
  PseudoTargets t;
  t.q_weak = softmax_rows(head_logits(heads, HeadKind::kMain, weak.features));
  const Matrix p_aux = softmax_rows(head_logits(heads, HeadKind::kAux, weak.features));
  const std::size_t n = t.q_weak.rows;
  t.labels.resize(n);
  t.confidence.resize(n);
  t.psi.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    t.labels[j] = argmax(t.q_weak.row(j));
    t.confidence[j] = t.q_weak(j, t.labels[j]);
    t.psi[j] = weights.gamma * simd::max(p_aux.row(j));
  }
  return t;
}

namespace {

// One pass over the objective. Fills `g` when non-null.
LossBundle evaluate(const Heads& heads, const Batch& batch, const Margins& margins, const FineSslWeights& weights,
                    const PseudoTargets& targets, const Heads& aux_src, unsigned terms, GradBundle* g) {
  const std::size_t c = heads.num_classes;
  const std::size_t nl = batch.labeled_x.rows;
  const std::size_t nu = batch.unlabeled_strong.rows;
  if (nl == 0 || nu == 0) throw UsageError("finessl_loss: batch needs labeled and unlabeled rows");
  if (targets.labels.size() != nu || targets.psi.size() != nu) throw UsageError("finessl_loss: targets misaligned");
  if (margins.delta.size() != c) throw UsageError("finessl_loss: margin vector length != C");
  const std::span<const double> delta = margins.delta;
  const double alpha = margins.alpha_t;
  const double inv_l = 1.0 / static_cast<double>(nl);
  const double inv_u = 1.0 / static_cast<double>(nu);
  LossBundle out;

  if (terms & kMainTerms) {
    const FeatureCache lab = forward_features(heads, batch.labeled_x);
    const FeatureCache str = forward_features(heads, batch.unlabeled_strong);
    if (terms & kSupMain) {
      const Matrix z = head_logits(heads, HeadKind::kMain, lab.features);
      Matrix dz(nl, c);
      for (std::size_t i = 0; i < nl; ++i) {
        const auto y = static_cast<std::size_t>(batch.labeled_y[i]);
        out.sup_main += margin_ce(z.row(i), y, delta, alpha);
        if (g) margin_ce_grad(z.row(i), y, delta, alpha, inv_l, dz.row(i));
      }
      out.sup_main *= inv_l;
      if (g) backprop_main(heads, lab, dz, *g);
    }
    if (terms & kConsMain) {
      const Matrix z = head_logits(heads, HeadKind::kMain, str.features);
      Matrix dz(nu, c);
      for (std::size_t j = 0; j < nu; ++j) {
        const double w = targets.psi[j];
        if (w == 0.0) continue;
        out.cons_main += w * margin_ce(z.row(j), targets.labels[j], delta, alpha);
        if (g) margin_ce_grad(z.row(j), targets.labels[j], delta, alpha, w * inv_u, dz.row(j));
      }
      out.cons_main *= inv_u;
      if (g) backprop_main(heads, str, dz, *g);
    }
  }

  if (terms & kAuxTerms) {
    // Features for the aux head come from the detached snapshot; nothing
    // below writes into the adapter gradient.
    const Matrix lab_h = forward_features(aux_src, batch.labeled_x).features;
    const Matrix str_h = forward_features(aux_src, batch.unlabeled_strong).features;
    if (terms & kSupAux) {
      const Matrix z = head_logits(heads, HeadKind::kAux, lab_h);
      Matrix dz(nl, c);
      for (std::size_t i = 0; i < nl; ++i) {
        const auto y = static_cast<std::size_t>(batch.labeled_y[i]);
        out.sup_aux += ce(z.row(i), y);
        if (g) ce_grad(z.row(i), y, inv_l, dz.row(i));
      }
      out.sup_aux *= inv_l;
      if (g) accumulate_head_grad(HeadKind::kAux, lab_h, dz, *g);
    }
    if (terms & kConsAux) {
      const Matrix z = head_logits(heads, HeadKind::kAux, str_h);
      Matrix dz(nu, c);
      for (std::size_t j = 0; j < nu; ++j) {
        const Vector q = smooth_labels(targets.labels[j], weights.lambda, c);
        out.cons_aux += soft_margin_ce(z.row(j), q, delta, alpha);
        if (g) soft_margin_ce_grad(z.row(j), q, delta, alpha, inv_u, dz.row(j));
      }
      out.cons_aux *= inv_u;
      if (g) accumulate_head_grad(HeadKind::kAux, str_h, dz, *g);
    }
  }
  out.total = out.sup_main + out.cons_main + out.sup_aux + out.cons_aux;
  return out;
}

}  // namespace

void backprop_main(const Heads& heads, const FeatureCache& cache, const Matrix& dlogits, GradBundle& grad) {
  accumulate_head_grad(HeadKind::kMain, cache.features, dlogits, grad);
  if (heads.use_adapter) accumulate_adapter_grad(heads, cache, main_feature_grad(heads, dlogits), grad);
}

LossBundle finessl_loss(const Heads& heads, const Batch& batch, const Margins& margins, const FineSslWeights& weights,
                        const PseudoTargets& targets, const Heads& aux_feature_source, unsigned terms) {
  return evaluate(heads, batch, margins, weights, targets, aux_feature_source, terms, nullptr);
}

LossBundle finessl_loss(const Heads& heads, const Batch& batch, const Margins& margins, const FineSslWeights& weights) {
  return finessl_loss(heads, batch, margins, weights, pseudo_targets(heads, batch, weights), heads);
}

GradBundle grad(const Heads& heads, const Batch& batch, const Margins& margins, const FineSslWeights& weights,
                const PseudoTargets& targets, unsigned terms, LossBundle* loss_out) {
  GradBundle g = heads.params.zeros_like();
  const LossBundle loss = evaluate(heads, batch, margins, weights, targets, heads, terms, &g);
  if (loss_out) *loss_out = loss;
  return g;
}

GradBundle grad(const Heads& heads, const Batch& batch, const Margins& margins, const FineSslWeights& weights) {
  return grad(heads, batch, margins, weights, pseudo_targets(heads, batch, weights));
}

}  // namespace finessl
