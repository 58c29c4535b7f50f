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

#include "finessl/trainer.hpp"

#include <cmath>
#include <numbers>

#include "finessl/error.hpp"
#include "finessl/simd.hpp"

namespace finessl {

double cosine_lr(std::uint64_t t, std::uint64_t total, double base) {
  if (total == 0) return base;
  if (t > total) throw UsageError("cosine_lr: step beyond schedule");
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void sgd_step(Heads& heads, const GradBundle& grads, OptimizerState& opt, double lr, double momentum,
              double weight_decay) {
  if (opt.velocity.main_w.data.empty()) opt.velocity = heads.params.zeros_like();
  auto params = heads.params.blocks();
  const auto g = grads.blocks();
  auto vel = opt.velocity.blocks();
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (g[b].values.size() != params[b].values.size() || vel[b].values.size() != params[b].values.size()) {
      throw UsageError("sgd_step: shape mismatch in " + std::string(params[b].name));
    }
    for (double v : g[b].values) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite gradient in parameter block " + std::string(params[b].name),
                           static_cast<std::int64_t>(opt.step));
      }
    }
    // v <- momentum*v + grad (+ wd*param for weights)
    simd::axpby(1.0, g[b].values, momentum, vel[b].values);
    if (!params[b].is_bias && weight_decay != 0.0) simd::axpy(weight_decay, params[b].values, vel[b].values);
    simd::axpy(-lr, vel[b].values, params[b].values);
  }
  ++opt.step;
}

EvalSnapshot evaluate(const Heads& heads, const EmbeddingDataset& train, const EmbeddingDataset* test,
                      std::span<const std::int32_t> truth, double threshold, std::uint32_t ece_bins) {
  EvalSnapshot snap;
  if (test != nullptr && test->num_samples > 0) {
    const FeatureCache f = forward_features(heads, to_matrix(*test));
    const Matrix z = head_logits(heads, HeadKind::kMain, f.features);
    snap.test_acc = top1_accuracy(z, test->labels);
    Vector conf(z.rows);
    std::vector<std::uint8_t> hit(z.rows);
    for (std::size_t i = 0; i < z.rows; ++i) {
      const Vector p = softmax(z.row(i));
      const std::size_t k = argmax(p);
      conf[i] = p[k];
      hit[i] = static_cast<std::int32_t>(k) == test->labels[i] ? 1 : 0;
    }
    snap.ece = ece(conf, hit, ece_bins);
  }
  std::vector<std::uint32_t> rows;
  std::vector<std::int32_t> row_truth;
  for (std::uint32_t i = 0; i < train.num_samples; ++i) {
    if (train.labels[i] != kUnlabeled) continue;
    rows.push_back(i);
    if (!truth.empty()) row_truth.push_back(truth[i]);
  }
  const FeatureCache f = forward_features(heads, to_matrix(train, rows));
  const Matrix q = softmax_rows(head_logits(heads, HeadKind::kMain, f.features));
  snap.pl = pl_stats(q, row_truth, threshold);
  return snap;
}

namespace {

EpochRecord make_record(std::uint32_t epoch, double lr, const EvalSnapshot* snap, const PaceState* pace,
                        std::size_t num_classes) {
  EpochRecord r;
  r.epoch = epoch;
  r.lr = lr;
  if (snap != nullptr) {
    r.test_acc = snap->test_acc;
    r.ece = snap->ece;
    r.pl_acc = snap->pl.accuracy;
    r.pl_entropy = snap->pl.entropy;
    r.mean_conf = snap->pl.mean_conf;
    r.mean_conf_confident = snap->pl.mean_conf_confident;
    r.pseudo_label_hist = snap->pl.hist;
  }
  if (pace != nullptr) {
    r.alpha_t = pace->alpha_t();
    r.delta = pace->delta();
    r.beta = pace->beta();
  } else {
    r.delta.assign(num_classes, 0.0);
    r.beta.assign(num_classes, 0.0);
  }
  return r;
}

// Max-probability groups over the unlabeled rows for one head.
ConfidenceGroups unlabeled_groups(const Heads& heads, HeadKind head, const EmbeddingDataset& train,
                                  std::span<const std::int32_t> truth) {
  std::vector<std::uint32_t> rows;
  std::vector<std::int32_t> row_truth;
  std::vector<std::uint8_t> row_ood;
  for (std::uint32_t i = 0; i < train.num_samples; ++i) {
    if (train.labels[i] != kUnlabeled) continue;
    rows.push_back(i);
    row_truth.push_back(truth[i]);
    row_ood.push_back(train.ood_mask ? (*train.ood_mask)[i] : 0);
  }
  const FeatureCache f = forward_features(heads, to_matrix(train, rows));
  const Matrix q = softmax_rows(head_logits(heads, head, f.features));
  return conf_groups(q, row_truth, row_ood);
}

}  // namespace

RunReport run_training(const EmbeddingDataset& input, const EmbeddingDataset* test_input, const TrainConfig& config) {
  config.validate();
  input.validate(/*require_ssl_split=*/true);
  EmbeddingDataset dataset = input;
  std::optional<EmbeddingDataset> test;
  if (test_input != nullptr) {
    test_input->validate();
    if (test_input->dim != dataset.dim || test_input->num_classes != dataset.num_classes) {
      throw ConfigError("test split shape does not match the training data");
    }
    test = *test_input;
  }
  if (config.normalize) {
    normalize_features(dataset);
    if (test) normalize_features(*test);
  }
  const std::size_t c = dataset.num_classes;
  const auto truth_opt = ground_truth(dataset);
  const std::vector<std::int32_t> truth = truth_opt.value_or(std::vector<std::int32_t>{});

  const StrategySpec& spec = config.strategy;
  const bool is_finessl = spec.variant == Variant::kFineSsl;
  const double threshold = is_finessl ? config.zeta : spec.tau;

  RandomStream init_rng(config.seed, StreamId::kInit);
  RunReport report;
  report.strategy = variant_name(spec.variant);
  report.seed = config.seed;
  Heads heads = init_heads(dataset.num_classes, dataset.dim, config.init, dataset.prototypes, init_rng);

  std::optional<PaceState> pace;
  if (spec.uses_pace()) {
    pace.emplace(c, threshold, is_finessl ? config.alpha_base : 0.0, config.effective_window(), config.pace_estimator,
                 config.pace_ema_decay);
    pace->refresh_margins();
  }

  StrategyContext ctx;
  ctx.weights = {config.lambda, config.gamma};
  ctx.stats_threshold = threshold;
  ctx.truth = truth;
  ctx.margins = pace ? pace->margins() : Margins::none(c);

  const std::uint64_t total = config.total_steps();
  OptimizerState opt;
  opt.velocity = heads.params.zeros_like();
  opt.total = total;

  {
    const EvalSnapshot snap = evaluate(heads, dataset, test ? &*test : nullptr, truth, threshold, config.ece_bins);
    report.epochs.push_back(make_record(0, cosine_lr(0, total, config.lr), &snap, pace ? &*pace : nullptr, c));
  }

  if (config.epochs > 0) {
    BatchSampler sampler(dataset, config.batch_b, config.mu, config.augment, config.seed);
    std::uint64_t step = 0;
    for (std::uint32_t epoch = 1; epoch <= config.epochs; ++epoch) {
      double sup_sum = 0.0;
      double unsup_sum = 0.0;
      double lr = config.lr;
      for (std::uint32_t s = 0; s < config.steps_per_epoch; ++s, ++step) {
        const Batch batch = sampler.next();
        if (pace) {
          // Pace first, then margins, both from the current batch's weak view.
          const FeatureCache weak = forward_features(heads, batch.unlabeled_weak);
          pace->update_counts(softmax_rows(head_logits(heads, HeadKind::kMain, weak.features)));
          ctx.margins = pace->refresh_margins();
          ctx.pace_counts = pace->counts();
        }
        const StepResult r = compute_step(spec, heads, batch, ctx);
        if (!std::isfinite(r.sup_loss) || !std::isfinite(r.unsup_loss)) {
          throw NumericError("non-finite loss at step " + std::to_string(step), static_cast<std::int64_t>(step));
        }
        lr = cosine_lr(step, total, config.lr);
        sgd_step(heads, r.grad, opt, lr, config.momentum, config.weight_decay);
        heads.check_finite();
        sup_sum += r.sup_loss;
        unsup_sum += r.unsup_loss;
      }
      const bool do_eval = epoch % config.eval_every == 0 || epoch == config.epochs;
      std::optional<EvalSnapshot> snap;
      if (do_eval) snap = evaluate(heads, dataset, test ? &*test : nullptr, truth, threshold, config.ece_bins);
      EpochRecord rec = make_record(epoch, lr, snap ? &*snap : nullptr, pace ? &*pace : nullptr, c);
      rec.sup_loss = sup_sum / config.steps_per_epoch;
      rec.unsup_loss = unsup_sum / config.steps_per_epoch;
      report.epochs.push_back(std::move(rec));
    }
  }

  if (!truth.empty()) {
    report.groups_main = unlabeled_groups(heads, HeadKind::kMain, dataset, truth);
    report.groups_aux = unlabeled_groups(heads, HeadKind::kAux, dataset, truth);
  }
  report.heads = std::move(heads);
  return report;
}

}  // namespace finessl
