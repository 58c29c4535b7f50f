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

#include "finessl/pace.hpp"

#include <algorithm>

#include "finessl/error.hpp"

namespace finessl {

PaceState::PaceState(std::size_t num_classes, double zeta, double alpha_base, std::size_t window,
                     PaceEstimator estimator, double ema_decay)
    : num_classes_(num_classes),
      zeta_(zeta),
      alpha_base_(alpha_base),
      window_(window),
      estimator_(estimator),
      ema_decay_(ema_decay),
      counts_(num_classes, 0.0),
      beta_(num_classes, 0.0),
      delta_(num_classes, 1.0),
      alpha_t_(alpha_base) {
  if (num_classes < 1) throw ConfigError("pace: need at least one class");
  if (!(zeta > 0.0 && zeta <= 1.0)) throw ConfigError("pace: zeta must be in (0,1]");
  if (!(alpha_base >= 0.0)) throw ConfigError("pace: alpha must be >= 0");
  if (estimator == PaceEstimator::kWindow) {
    if (window < 1) throw ConfigError("pace: window must be >= 1");
    ring_.assign(window, Vector(num_classes, 0.0));
  } else if (!(ema_decay >= 0.0 && ema_decay < 1.0)) {
    throw ConfigError("pace: ema decay must be in [0,1)");
  }
}

void PaceState::update_counts(const Matrix& q_weak) {
  if (q_weak.cols != num_classes_) throw UsageError("pace: probability rows have wrong width");
  Vector inc(num_classes_, 0.0);
  for (std::size_t j = 0; j < q_weak.rows; ++j) {
    const auto q = q_weak.row(j);
    const std::size_t k = argmax(q);
    if (q[k] >= zeta_) inc[k] += 1.0;
  }
  push_increment(inc);
}

void PaceState::push_increment(const Vector& increment) {
  if (increment.size() != num_classes_) throw UsageError("pace: increment has wrong width");
  if (estimator_ == PaceEstimator::kEma) {
    for (std::size_t k = 0; k < num_classes_; ++k) counts_[k] = ema_decay_ * counts_[k] + increment[k];
    return;
  }
  ring_[head_] = increment;
  head_ = (head_ + 1) % window_;
  fill_ = std::min(fill_ + 1, window_);
  // Column sums recomputed oldest-to-newest so the order is fixed.
  std::fill(counts_.begin(), counts_.end(), 0.0);
  const std::size_t oldest = (head_ + window_ - fill_) % window_;
  for (std::size_t s = 0; s < fill_; ++s) {
    const Vector& row = ring_[(oldest + s) % window_];
    for (std::size_t k = 0; k < num_classes_; ++k) counts_[k] += row[k];
  }
}

Margins PaceState::refresh_margins() {
  const double top = *std::max_element(counts_.begin(), counts_.end());
  if (top > 0.0) {
    for (std::size_t k = 0; k < num_classes_; ++k) {
      beta_[k] = counts_[k] / top;
      delta_[k] = 1.0 - beta_[k];
    }
    const auto [lo, hi] = std::minmax_element(beta_.begin(), beta_.end());
    alpha_t_ = (*hi - *lo) * alpha_base_;
  } else {
    // Cold start: every class gets the full margin.
    std::fill(beta_.begin(), beta_.end(), 0.0);
    std::fill(delta_.begin(), delta_.end(), 1.0);
    alpha_t_ = alpha_base_;
  }
  return margins();
}

}  // namespace finessl
