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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "finessl/error.hpp"
#include "finessl/objective.hpp"
#include "oracles.hpp"

using namespace finessl;

namespace {

std::vector<double> rand_vec(std::size_t n, double lo, double hi, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(gen);
  return v;
}

std::vector<double> rand_simplex(std::size_t n, std::mt19937_64& gen) {
  auto v = rand_vec(n, 0.0, 1.0, gen);
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  for (double& x : v) x /= s;
  return v;
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

Heads zero_heads(std::uint32_t c, std::uint32_t d) {
  RandomStream r(1, StreamId::kInit);
  return init_heads(c, d, InitSpec{}, std::nullopt, r);
}

}  // namespace

TEST_CASE("smooth_labels") {
  const auto q = smooth_labels(3, 0.5, 10);
  for (std::size_t k = 0; k < 10; ++k) CHECK(q[k] == doctest::Approx(k == 3 ? 0.55 : 0.05).epsilon(1e-15));
  const auto near = smooth_labels(1, 1e-9, 4);
  CHECK(std::abs(near[1] - 1.0) < 1e-8);
  CHECK(near[0] < 1e-8);
  std::mt19937_64 gen(1);
  for (int t = 0; t < 500; ++t) {
    const std::size_t c = 2 + t % 50;
    const double lambda = std::uniform_real_distribution<double>(1e-6, 1.0 - 1e-6)(gen);
    const auto v = smooth_labels(t % c, lambda, c);
    CHECK(std::abs(std::accumulate(v.begin(), v.end(), 0.0) - 1.0) <= 1e-12);
  }
  CHECK_THROWS_AS(smooth_labels(0, 0.0, 3), UsageError);
  CHECK_THROWS_AS(smooth_labels(0, 1.0, 3), UsageError);
  CHECK_THROWS_AS(smooth_labels(3, 0.5, 3), UsageError);
}

TEST_CASE("ce examples") {
  CHECK(ce(std::vector<double>(6, 0.0), 2) == doctest::Approx(std::log(6.0)).epsilon(1e-15));
  std::vector<double> z(5, 0.0);
  z[1] = 50.0;
  CHECK(ce(z, 1) < 1e-20);
  CHECK(ce(std::vector<double>{std::log(1.0), std::log(3.0)}, 1) == doctest::Approx(-std::log(0.75)).epsilon(1e-14));
}

TEST_CASE("margin_ce examples") {
  std::mt19937_64 gen(2);
  const auto z = rand_vec(6, -4.0, 4.0, gen);
  const auto delta = rand_vec(6, 0.0, 1.0, gen);
  for (std::size_t y = 0; y < 6; ++y) CHECK(margin_ce(z, y, delta, 0.0) == ce(z, y));

  const std::vector<double> d01{1.0, 0.3};
  CHECK(margin_ce(std::vector<double>{0.0, 0.0}, 0, d01, 8.0) ==
        doctest::Approx(std::log1p(std::exp(8.0))).epsilon(1e-15));
  CHECK(margin_ce(std::vector<double>{0.0, 0.0}, 0, d01, 8.0) == doctest::Approx(8.000335).epsilon(1e-7));

  std::vector<double> dz = delta;
  dz[2] = 0.0;
  CHECK(margin_ce(z, 2, dz, 5.0) == ce(z, 2));
  CHECK_THROWS_AS(margin_ce(z, 0, delta, -1.0), UsageError);
}

TEST_CASE("margin_ce shift identity and oracle agreement") {
  std::mt19937_64 gen(3);
  for (int t = 0; t < 10000; ++t) {
    const std::size_t c = 2 + t % 30;
    const auto z = rand_vec(c, -20.0, 20.0, gen);
    const auto delta = rand_vec(c, 0.0, 1.0, gen);
    const double alpha = std::uniform_real_distribution<double>(0.0, 10.0)(gen);
    const std::size_t y = t % c;
    const double m = margin_ce(z, y, delta, alpha);
    auto shifted = z;
    shifted[y] -= alpha * delta[y];
    CHECK(rel_diff(m, ce(shifted, y)) <= 1e-10);
    CHECK(rel_diff(m, oracle::margin_ce(z, y, delta, alpha)) <= 1e-10);
  }
}

TEST_CASE("margin_ce is non-decreasing in alpha") {
  std::mt19937_64 gen(4);
  for (int t = 0; t < 500; ++t) {
    const auto z = rand_vec(5, -5.0, 5.0, gen);
    auto delta = rand_vec(5, 0.01, 1.0, gen);
    double prev = -1.0;
    for (double a = 0.0; a <= 10.0; a += 0.5) {
      const double m = margin_ce(z, t % 5, delta, a);
      CHECK(m >= prev);
      prev = m;
    }
  }
}

TEST_CASE("soft_margin_ce examples") {
  std::mt19937_64 gen(5);
  const auto z = rand_vec(7, -3.0, 3.0, gen);
  const auto delta = rand_vec(7, 0.0, 1.0, gen);
  for (std::size_t k = 0; k < 7; ++k) {
    std::vector<double> q(7, 0.0);
    q[k] = 1.0;
    CHECK(rel_diff(soft_margin_ce(z, q, delta, 4.0), margin_ce(z, k, delta, 4.0)) <= 1e-10);
  }
  const std::vector<double> uni(9, 1.0 / 9.0);
  CHECK(soft_margin_ce(std::vector<double>(9, 0.0), uni, std::vector<double>(9, 0.4), 0.0) ==
        doctest::Approx(std::log(9.0)).epsilon(1e-14));
  for (int t = 0; t < 200; ++t) {
    const auto zz = rand_vec(7, -6.0, 6.0, gen);
    const auto q = rand_simplex(7, gen);
    const auto dd = rand_vec(7, 0.0, 1.0, gen);
    const double a = std::uniform_real_distribution<double>(0.0, 8.0)(gen);
    CHECK(rel_diff(soft_margin_ce(zz, q, dd, a), oracle::soft_margin_ce(zz, q, dd, a)) <= 1e-10);
  }
  std::vector<double> bad(7, 0.2);
  CHECK_THROWS_AS(soft_margin_ce(z, bad, delta, 1.0), UsageError);
}

TEST_CASE("soft_margin_ce with a one-hot smoothed target equals margin_ce") {
  std::mt19937_64 gen(6);
  for (int t = 0; t < 300; ++t) {
    const std::size_t c = 2 + t % 20;
    const auto z = rand_vec(c, -8.0, 8.0, gen);
    const auto delta = rand_vec(c, 0.0, 1.0, gen);
    auto q = smooth_labels(t % c, 1e-14, c);
    CHECK(rel_diff(soft_margin_ce(z, q, delta, 6.0), margin_ce(z, t % c, delta, 6.0)) <= 1e-10);
  }
}

TEST_CASE("logit gradients match finite differences") {
  std::mt19937_64 gen(7);
  const double h = 1e-5;
  for (int t = 0; t < 100; ++t) {
    const std::size_t c = 2 + t % 9;
    const auto z = rand_vec(c, -4.0, 4.0, gen);
    const auto delta = rand_vec(c, 0.0, 1.0, gen);
    const auto q = rand_simplex(c, gen);
    const double a = 6.0 * std::uniform_real_distribution<double>(0.0, 1.0)(gen);
    const std::size_t y = t % c;
    std::vector<double> g_ce(c, 0.0), g_m(c, 0.0), g_s(c, 0.0);
    ce_grad(z, y, 1.0, g_ce);
    margin_ce_grad(z, y, delta, a, 1.0, g_m);
    soft_margin_ce_grad(z, q, delta, a, 1.0, g_s);
    for (std::size_t k = 0; k < c; ++k) {
      auto zp = z, zm = z;
      zp[k] += h;
      zm[k] -= h;
      CHECK(g_ce[k] == doctest::Approx((ce(zp, y) - ce(zm, y)) / (2 * h)).epsilon(1e-6));
      CHECK(g_m[k] ==
            doctest::Approx((margin_ce(zp, y, delta, a) - margin_ce(zm, y, delta, a)) / (2 * h)).epsilon(1e-6));
      CHECK(g_s[k] ==
            doctest::Approx((soft_margin_ce(zp, q, delta, a) - soft_margin_ce(zm, q, delta, a)) / (2 * h))
                .epsilon(1e-6));
    }
    // Gradients of a probability-weighted CE sum to zero across classes.
    CHECK(std::abs(std::accumulate(g_s.begin(), g_s.end(), 0.0)) <= 1e-12);
    // scale multiplies and accumulates.
    std::vector<double> g2(c, 1.0);
    ce_grad(z, y, 0.5, g2);
    for (std::size_t k = 0; k < c; ++k) CHECK(g2[k] == doctest::Approx(1.0 + 0.5 * g_ce[k]));
  }
}

TEST_CASE("consistency_fixmatch") {
  Matrix zs(3, 2), qw(3, 2);
  zs.data = {1.0, -1.0, 0.5, 0.2, -2.0, 3.0};
  qw.data = {0.6, 0.4, 0.69, 0.31, 0.5, 0.5};
  CHECK(consistency_fixmatch(zs, qw, 0.7) == 0.0);

  Matrix one(1, 2), qo(1, 2);
  one.data = {0.3, 0.1};
  qo.data = {0.69, 0.31};
  CHECK(consistency_fixmatch(one, qo, 0.7) == 0.0);

  Matrix two(2, 3), q2(2, 3);
  two.data = {0.2, 1.0, -0.5, 0.0, 0.3, 0.1};
  q2.data = {0.1, 0.8, 0.1, 0.4, 0.3, 0.3};
  const double l = ce(two.row(0), 1);
  CHECK(consistency_fixmatch(two, q2, 0.7) == doctest::Approx(l / 2.0).epsilon(1e-15));
}

TEST_CASE("consistency_weighted") {
  Matrix zs(2, 3);
  zs.data = {0.2, 1.0, -0.5, 0.0, 0.3, 0.1};
  const std::vector<std::size_t> yhat{1, 2};
  const std::vector<double> delta{0.2, 0.5, 1.0};
  CHECK(consistency_weighted(zs, yhat, std::vector<double>{0.0, 0.0}, delta, 3.0) == 0.0);

  Matrix z1(1, 3);
  z1.data = {0.2, 1.0, -0.5};
  CHECK(consistency_weighted(z1, std::vector<std::size_t>{0}, std::vector<double>{1.0}, delta, 0.0) ==
        doctest::Approx(ce(z1.row(0), 0)).epsilon(1e-15));

  const double w = consistency_weighted(zs, yhat, std::vector<double>{2.7, 0.4}, delta, 2.0);
  const double want = (2.7 * margin_ce(zs.row(0), 1, delta, 2.0) + 0.4 * margin_ce(zs.row(1), 2, delta, 2.0)) / 2.0;
  CHECK(w == doctest::Approx(want).epsilon(1e-14));
  CHECK_THROWS_AS(consistency_weighted(zs, yhat, std::vector<double>{-1.0, 0.0}, delta, 1.0), UsageError);
}

TEST_CASE("psi is gamma times the aux head's max probability") {
  // One class-0 logit of ln 9 over one rival at 0: max p_aux = 0.9.
  Heads h = zero_heads(2, 1);
  h.params.aux_b = {std::log(9.0), 0.0};
  Batch b;
  b.labeled_x = Matrix(1, 1, 1.0);
  b.labeled_y = {0};
  b.unlabeled_weak = Matrix(1, 1, 1.0);
  b.unlabeled_strong = Matrix(1, 1, 1.0);
  const PseudoTargets t = pseudo_targets(h, b, FineSslWeights{0.5, 3.0});
  CHECK(t.psi[0] == doctest::Approx(2.7).epsilon(1e-14));
  CHECK(t.labels[0] == 0);
  CHECK(t.confidence[0] == 0.5);
}

TEST_CASE("finessl_loss at zero init") {
  std::mt19937_64 gen(8);
  const Heads h = zero_heads(6, 4);
  const Batch b = oracle::random_batch(5, 7, 4, 6, gen);
  Margins m;
  m.delta = rand_vec(6, 0.0, 1.0, gen);
  m.alpha_t = 0.0;
  const LossBundle l = finessl_loss(h, b, m, FineSslWeights{0.5, 3.0});
  CHECK(std::abs(l.sup_main - std::log(6.0)) <= 1e-12);
  CHECK(std::abs(l.cons_aux - std::log(6.0)) <= 1e-12);
  CHECK(std::abs(l.sup_aux - std::log(6.0)) <= 1e-12);
  // psi = 3 * (1/6) = 0.5 on every row.
  CHECK(std::abs(l.cons_main - 0.5 * std::log(6.0)) <= 1e-12);
}

TEST_CASE("loss bundle components are non-negative and sum to the total") {
  std::mt19937_64 gen(9);
  for (int t = 0; t < 200; ++t) {
    const auto in = oracle::random_grad_instance(2 + t % 6, 3 + t % 4, 1 + t % 5, 1 + t % 7, t % 2 == 0, gen);
    const LossBundle l = finessl_loss(in.heads, in.batch, in.margins, in.weights);
    for (double v : {l.sup_main, l.cons_main, l.sup_aux, l.cons_aux}) {
      CHECK(v >= 0.0);
      CHECK(std::isfinite(v));
    }
    CHECK(std::abs(l.total - (l.sup_main + l.cons_main + l.sup_aux + l.cons_aux)) <= 1e-9);
  }
}

TEST_CASE("finessl_loss is permutation-equivariant") {
  std::mt19937_64 gen(10);
  for (int t = 0; t < 50; ++t) {
    const auto in = oracle::random_grad_instance(5, 6, 6, 8, true, gen);
    const LossBundle base = finessl_loss(in.heads, in.batch, in.margins, in.weights);
    Batch p = in.batch;
    std::vector<std::size_t> pl(6), pu(8);
    std::iota(pl.begin(), pl.end(), 0);
    std::iota(pu.begin(), pu.end(), 0);
    std::shuffle(pl.begin(), pl.end(), gen);
    std::shuffle(pu.begin(), pu.end(), gen);
    for (std::size_t i = 0; i < 6; ++i) {
      std::copy(in.batch.labeled_x.row(pl[i]).begin(), in.batch.labeled_x.row(pl[i]).end(), p.labeled_x.row(i).begin());
      p.labeled_y[i] = in.batch.labeled_y[pl[i]];
    }
    for (std::size_t j = 0; j < 8; ++j) {
      const auto w = in.batch.unlabeled_weak.row(pu[j]);
      const auto s = in.batch.unlabeled_strong.row(pu[j]);
      std::copy(w.begin(), w.end(), p.unlabeled_weak.row(j).begin());
      std::copy(s.begin(), s.end(), p.unlabeled_strong.row(j).begin());
    }
    const LossBundle perm = finessl_loss(in.heads, p, in.margins, in.weights);
    CHECK(std::abs(perm.sup_main - base.sup_main) <= 1e-9);
    CHECK(std::abs(perm.cons_main - base.cons_main) <= 1e-9);
    CHECK(std::abs(perm.sup_aux - base.sup_aux) <= 1e-9);
    CHECK(std::abs(perm.cons_aux - base.cons_aux) <= 1e-9);
  }
}

TEST_CASE("analytic gradient matches central differences") {
  std::mt19937_64 gen(11);
  for (int t = 0; t < 20; ++t) {
    const auto in = oracle::random_grad_instance(5, 8, 4, 4, true, gen);
    for (unsigned terms : {unsigned{kAllTerms}, unsigned{kSupMain}, unsigned{kConsMain}, unsigned{kSupAux},
                           unsigned{kConsAux}}) {
      const auto r = oracle::check_gradient(in, terms, 1e-4, 1e-4, 1e-7);
      INFO("terms=" << terms << " " << r.where);
      CHECK(r.ok);
    }
  }
  for (int t = 0; t < 10; ++t) {
    const auto in = oracle::random_grad_instance(3, 5, 2, 6, false, gen);
    const auto r = oracle::check_gradient(in, kAllTerms, 1e-4, 1e-4, 1e-7);
    INFO(r.where);
    CHECK(r.ok);
    CHECK(in.heads.params.adapter_w.data.empty());
  }
}

TEST_CASE("aux terms never reach the adapter") {
  std::mt19937_64 gen(12);
  for (int t = 0; t < 50; ++t) {
    const auto in = oracle::random_grad_instance(5, 8, 4, 4, true, gen);
    const PseudoTargets targets = pseudo_targets(in.heads, in.batch, in.weights);
    const GradBundle g = grad(in.heads, in.batch, in.margins, in.weights, targets, kAuxTerms);
    for (double v : g.adapter_w.data) CHECK(v == 0.0);
    for (double v : g.adapter_b) CHECK(v == 0.0);
    for (double v : g.main_w.data) CHECK(v == 0.0);
    bool aux_moves = false;
    for (double v : g.aux_w.data) aux_moves = aux_moves || v != 0.0;
    CHECK(aux_moves);
  }
}

TEST_CASE("with psi = 0 the main-head gradient is the supervised margin gradient") {
  std::mt19937_64 gen(13);
  for (int t = 0; t < 20; ++t) {
    auto in = oracle::random_grad_instance(4, 6, 5, 3, true, gen);
    in.weights.gamma = 0.0;
    const PseudoTargets targets = pseudo_targets(in.heads, in.batch, in.weights);
    for (double p : targets.psi) CHECK(p == 0.0);
    const GradBundle full = grad(in.heads, in.batch, in.margins, in.weights, targets, kAllTerms);
    const GradBundle sup = grad(in.heads, in.batch, in.margins, in.weights, targets, kSupMain);

    // Independent supervised-only gradient: margin logit gradients through
    // the main head and adapter, written out here.
    GradBundle ref = in.heads.params.zeros_like();
    const FeatureCache f = forward_features(in.heads, in.batch.labeled_x);
    const Matrix z = head_logits(in.heads, HeadKind::kMain, f.features);
    Matrix dz(z.rows, z.cols);
    for (std::size_t i = 0; i < z.rows; ++i) {
      const std::size_t y = static_cast<std::size_t>(in.batch.labeled_y[i]);
      std::vector<double> shifted(z.row(i).begin(), z.row(i).end());
      shifted[y] -= in.margins.alpha_t * in.margins.delta[y];
      const auto p = softmax(shifted);
      for (std::size_t k = 0; k < z.cols; ++k) dz(i, k) = (p[k] - (k == y ? 1.0 : 0.0)) / z.rows;
    }
    backprop_main(in.heads, f, dz, ref);

    for (std::size_t i = 0; i < ref.main_w.data.size(); ++i) {
      CHECK(std::abs(full.main_w.data[i] - ref.main_w.data[i]) <= 1e-12);
      CHECK(std::abs(sup.main_w.data[i] - ref.main_w.data[i]) <= 1e-12);
    }
    for (std::size_t i = 0; i < ref.adapter_w.data.size(); ++i) {
      CHECK(std::abs(full.adapter_w.data[i] - ref.adapter_w.data[i]) <= 1e-12);
    }
  }
}

TEST_CASE("grad reports the loss it differentiated") {
  std::mt19937_64 gen(14);
  const auto in = oracle::random_grad_instance(4, 5, 3, 3, true, gen);
  LossBundle l;
  const PseudoTargets targets = pseudo_targets(in.heads, in.batch, in.weights);
  grad(in.heads, in.batch, in.margins, in.weights, targets, kAllTerms, &l);
  const LossBundle direct = finessl_loss(in.heads, in.batch, in.margins, in.weights);
  CHECK(l.total == doctest::Approx(direct.total).epsilon(1e-14));
  CHECK(l.cons_aux == doctest::Approx(direct.cons_aux).epsilon(1e-14));
}
