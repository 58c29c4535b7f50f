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

#include "finessl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "finessl/error.hpp"

namespace finessl {

namespace {

std::vector<std::uint32_t> histogram20(const Vector& values) {
  std::vector<std::uint32_t> hist(ConfidenceGroups::kBins, 0);
  for (double v : values) {
    auto b = static_cast<std::size_t>(v * ConfidenceGroups::kBins);
    hist[std::min(b, ConfidenceGroups::kBins - 1)]++;
  }
  return hist;
}

}  // namespace

double top1_accuracy(const Matrix& logits, std::span<const std::int32_t> labels) {
  if (logits.rows != labels.size()) throw UsageError("top1_accuracy: row mismatch");
  if (logits.rows == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    if (static_cast<std::int32_t>(argmax(logits.row(i))) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows);
}

double histogram_entropy(std::span<const double> hist) {
  double total = 0.0;
  for (double h : hist) total += h;
  if (total <= 0.0) return 0.0;
  double entropy = 0.0;
  for (double h : hist) {
    if (h <= 0.0) continue;
    const double p = h / total;
    entropy -= p * std::log(p);
  }
  return entropy;
}

PseudoLabelStats pl_stats(const Matrix& q, std::span<const std::int32_t> truth, double threshold) {
  if (!truth.empty() && truth.size() != q.rows) throw UsageError("pl_stats: truth length mismatch");
  PseudoLabelStats s;
  s.hist.assign(q.cols, 0.0);
  std::size_t correct = 0;
  double conf_sum = 0.0;
  double confident_sum = 0.0;
  for (std::size_t j = 0; j < q.rows; ++j) {
    const auto row = q.row(j);
    const std::size_t k = argmax(row);
    conf_sum += row[k];
    if (row[k] < threshold) continue;
    s.hist[k] += 1.0;
    ++s.confident;
    confident_sum += row[k];
    if (!truth.empty() && truth[j] == static_cast<std::int32_t>(k)) ++correct;
  }
  s.entropy = histogram_entropy(s.hist);
  if (q.rows > 0) s.mean_conf = conf_sum / static_cast<double>(q.rows);
  if (s.confident > 0) s.mean_conf_confident = confident_sum / static_cast<double>(s.confident);
  if (!truth.empty()) {
    s.accuracy = s.confident > 0 ? static_cast<double>(correct) / static_cast<double>(s.confident) : 0.0;
  }
  return s;
}

double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct, std::size_t n_bins) {
  if (confidences.size() != correct.size()) throw UsageError("ece: length mismatch");
  if (n_bins < 1) throw UsageError("ece: need at least one bin");
  if (confidences.empty()) return 0.0;
  std::vector<double> conf_sum(n_bins, 0.0);
  std::vector<double> hit_sum(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw UsageError("ece: confidence outside [0,1]");
    // Upper-inclusive bins: ceil(c*n)-1, with c=0 pinned to bin 0.
    std::size_t b = c <= 0.0 ? 0 : static_cast<std::size_t>(std::ceil(c * static_cast<double>(n_bins))) - 1;
    b = std::min(b, n_bins - 1);
    conf_sum[b] += c;
    hit_sum[b] += correct[i] ? 1.0 : 0.0;
    ++count[b];
  }
  const double n = static_cast<double>(confidences.size());
  double total = 0.0;
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (count[b] == 0) continue;
    const double nb = static_cast<double>(count[b]);
    total += (nb / n) * std::abs(hit_sum[b] / nb - conf_sum[b] / nb);
  }
  return total;
}

Vector rectified_conf(std::span<const double> confidences, double pl_accuracy) {
  double sum = 0.0;
  for (double c : confidences) sum += c;
  const double mean = confidences.empty() ? 0.0 : sum / static_cast<double>(confidences.size());
  if (!(mean > 0.0)) throw UsageError("rectified_conf: mean confidence must be positive");
  const double kappa = pl_accuracy / mean;
  Vector out(confidences.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(kappa * confidences[i], 0.0, 1.0);
  return out;
}

ConfidenceGroups conf_groups(const Matrix& q, std::span<const std::int32_t> truth,
                             std::span<const std::uint8_t> ood_mask) {
  if (truth.size() != q.rows) throw UsageError("conf_groups: truth length mismatch");
  if (!ood_mask.empty() && ood_mask.size() != q.rows) throw UsageError("conf_groups: ood mask length mismatch");
  ConfidenceGroups g;
  for (std::size_t j = 0; j < q.rows; ++j) {
    const auto row = q.row(j);
    const std::size_t k = argmax(row);
    if (!ood_mask.empty() && ood_mask[j]) {
      g.ood.push_back(row[k]);
    } else if (truth[j] == static_cast<std::int32_t>(k)) {
      g.correct.push_back(row[k]);
    } else {
      g.incorrect.push_back(row[k]);
    }
  }
  g.hist_correct = histogram20(g.correct);
  g.hist_incorrect = histogram20(g.incorrect);
  g.hist_ood = histogram20(g.ood);
  return g;
}

void write_conf_groups_csv(const ConfidenceGroups& groups, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "group,confidence\n";
  out.precision(17);
  for (double v : groups.correct) out << "correct," << v << '\n';
  for (double v : groups.incorrect) out << "incorrect," << v << '\n';
  for (double v : groups.ood) out << "ood," << v << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

double median(Vector values) {
  if (values.empty()) throw UsageError("median of empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace finessl
