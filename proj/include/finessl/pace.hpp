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

#include <cstddef>
#include <vector>

#include "finessl/numkit.hpp"
#include "finessl/objective.hpp"

namespace finessl {

enum class PaceEstimator { kWindow, kEma };

/// Per-class learning pace: how many unlabeled predictions per class clear
/// the confidence constant zeta, estimated online.
///
/// Window mode keeps the last `window` steps of per-class increments and
/// sums them. EMA mode keeps counts <- decay*counts + increment.
class PaceState {
 public:
  PaceState(std::size_t num_classes, double zeta, double alpha_base, std::size_t window,
            PaceEstimator estimator = PaceEstimator::kWindow, double ema_decay = 0.999);

  /// Counts rows of `q_weak` (probability vectors) whose max is >= zeta
  /// under their argmax class, pushes that increment, evicts the oldest.
  void update_counts(const Matrix& q_weak);

  /// Same, from a precomputed per-class increment.
  void push_increment(const Vector& increment);

  /// Recomputes beta, delta and alpha_t from the current counts.
  Margins refresh_margins();

  const Vector& counts() const { return counts_; }
  const Vector& beta() const { return beta_; }
  const Vector& delta() const { return delta_; }
  double alpha_t() const { return alpha_t_; }
  double zeta() const { return zeta_; }
  double alpha_base() const { return alpha_base_; }
  std::size_t window_capacity() const { return window_; }
  std::size_t window_fill() const { return fill_; }
  Margins margins() const { return {delta_, alpha_t_}; }

 private:
  std::size_t num_classes_;
  double zeta_;
  double alpha_base_;
  std::size_t window_;
  PaceEstimator estimator_;
  double ema_decay_;
  std::vector<Vector> ring_;
  std::size_t head_ = 0;
  std::size_t fill_ = 0;
  Vector counts_;
  Vector beta_;
  Vector delta_;
  double alpha_t_;
};

}  // namespace finessl
