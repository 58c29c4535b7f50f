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
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "finessl/numkit.hpp"

namespace finessl {

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double top1_accuracy(const Matrix& logits, std::span<const std::int32_t> labels);

/// Shannon entropy in nats of a histogram normalized to a distribution;
/// 0*ln0 = 0, and an all-zero histogram has entropy 0.
double histogram_entropy(std::span<const double> hist);

struct PseudoLabelStats {
  Vector hist;                    // confident pseudo-labels per class
  std::size_t confident = 0;
  std::optional<double> accuracy;  // among confident rows, when truth is known
  double entropy = 0.0;
  double mean_conf = 0.0;           // over all rows
  double mean_conf_confident = 0.0; // over confident rows (0 if none)
};

/// `truth` may be empty (unknown). Rows with truth < 0 (OOD) count as wrong.
PseudoLabelStats pl_stats(const Matrix& q, std::span<const std::int32_t> truth, double threshold);

/// Equal-width bins on (0,1]; bin b covers ((b)/n, (b+1)/n], confidence 0
/// falls in the first bin. Empty bins are skipped.
double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct, std::size_t n_bins = 15);

/// kappa * conf with kappa = accuracy / mean(conf), clamped to [0,1].
Vector rectified_conf(std::span<const double> confidences, double pl_accuracy);

struct ConfidenceGroups {
  Vector correct;
  Vector incorrect;
  Vector ood;
  static constexpr std::size_t kBins = 20;
  std::vector<std::uint32_t> hist_correct;
  std::vector<std::uint32_t> hist_incorrect;
  std::vector<std::uint32_t> hist_ood;
};

/// Splits max-probabilities of `q` by whether argmax matches truth, with OOD
/// rows (ood_mask set) in their own group. 20-bin histograms over [0,1].
ConfidenceGroups conf_groups(const Matrix& q, std::span<const std::int32_t> truth,
                             std::span<const std::uint8_t> ood_mask);

/// CSV with header "group,confidence".
void write_conf_groups_csv(const ConfidenceGroups& groups, const std::filesystem::path& path);

double median(Vector values);

}  // namespace finessl
