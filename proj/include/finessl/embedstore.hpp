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

// Frozen-embedding datasets: in-memory model, the EMB1 file format,
// synthetic generators and the SSL batch sampler.
//
// EMB1 layout (little-endian, no padding):
//   "EMB1" | u32 version=1 | u32 N | u32 D | u32 C | u32 flags
//   N x i32 labels (-1 = unlabeled)
//   N*D x f32 features, row-major
//   [flags bit0] C*D x f32 prototypes
//   [flags bit1] N x u8 ood flags
// flags bit2 records that features are already L2-normalized.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "finessl/numkit.hpp"

namespace finessl {

inline constexpr std::int32_t kUnlabeled = -1;

struct EmbeddingDataset {
  std::uint32_t num_samples = 0;
  std::uint32_t dim = 0;
  std::uint32_t num_classes = 0;
  std::vector<float> features;  // num_samples x dim
  std::vector<std::int32_t> labels;
  std::optional<std::vector<float>> prototypes;  // num_classes x dim
  std::optional<std::vector<std::uint8_t>> ood_mask;
  bool normalized = false;

  // Ground-truth classes of unlabeled rows, known only for synthetic data.
  // Never serialized into EMB1; see write_label_sidecar().
  std::optional<std::vector<std::int32_t>> hidden_labels;

  std::span<const float> feature_row(std::size_t i) const {
    return {features.data() + i * dim, dim};
  }

  std::size_t count_labeled() const;
  std::size_t count_unlabeled() const;

  /// Checks the structural invariants; throws ConfigError.
  /// `require_ssl_split` additionally demands labeled and unlabeled rows.
  void validate(bool require_ssl_split = false) const;

  bool operator==(const EmbeddingDataset&) const = default;
};

void write_emb1(const EmbeddingDataset& dataset, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_emb1(const EmbeddingDataset& dataset);

/// Throws ParseError (with byte offset) on malformed input, IoError when the
/// file cannot be opened.
EmbeddingDataset read_emb1(const std::filesystem::path& path);
EmbeddingDataset decode_emb1(std::span<const std::uint8_t> bytes);

/// One integer per line; ground truth for every row (-1 for OOD rows).
void write_label_sidecar(const std::vector<std::int32_t>& truth, const std::filesystem::path& path);
std::vector<std::int32_t> read_label_sidecar(const std::filesystem::path& path);

/// Full per-row ground truth: labels where known, hidden_labels elsewhere.
std::optional<std::vector<std::int32_t>> ground_truth(const EmbeddingDataset& dataset);

/// L2-normalizes every feature row (and prototype row) in place and sets the
/// normalized flag. No-op when already normalized.
void normalize_features(EmbeddingDataset& dataset);

struct BlobParams {
  std::uint32_t classes = 10;
  std::uint32_t dim = 16;
  std::vector<std::uint32_t> labeled_per_class;    // size 1 (broadcast) or classes
  std::vector<std::uint32_t> unlabeled_per_class;  // size 1 (broadcast) or classes
  std::uint32_t test_per_class = 0;
  double class_sep = 6.0;
  double noise_sd = 1.0;
  std::vector<double> bias_profile;  // empty = all 1
  std::uint32_t n_ood = 0;
  bool with_prototypes = false;
};

struct GeneratedData {
  EmbeddingDataset train;
  std::optional<EmbeddingDataset> test;
  Matrix class_means;
};

/// Gaussian blobs around well-separated class means (pairwise distance at
/// least class_sep * noise_sd). OOD rows come from extra means placed with the
/// same separation and are appended as unlabeled rows.
GeneratedData gen_blobs(const BlobParams& params, RandomStream& rng);

/// N_k = n1 * rho^(-(k-1)/(c-1)), rounded to nearest, floored at 1.
std::vector<std::uint32_t> longtail_counts(std::uint32_t n1, std::uint32_t c, double rho);

enum class View { kWeak, kStrong };

struct AugmentConfig {
  double weak_noise_sd = 0.0;
  double strong_noise_sd = 0.05;
  double strong_drop_frac = 0.1;

  bool operator==(const AugmentConfig&) const = default;
};

/// weak: x + N(0, weak_sd^2). strong: zero floor(drop_frac*D) distinct dims
/// chosen uniformly, then add N(0, strong_sd^2).
Vector augment_view(std::span<const double> x, View view, const AugmentConfig& cfg, RandomStream& rng);

struct Batch {
  Matrix labeled_x;
  std::vector<std::int32_t> labeled_y;
  Matrix unlabeled_weak;
  Matrix unlabeled_strong;
  std::vector<std::uint32_t> unlabeled_index;  // source rows in the dataset
  std::vector<std::uint32_t> labeled_index;
};

/// Cycles shuffled labeled and unlabeled pools, reshuffling at each wrap.
/// Batch order and augmentation draw from separate streams.
class BatchSampler {
 public:
  BatchSampler(const EmbeddingDataset& dataset, std::uint32_t b, std::uint32_t mu, AugmentConfig aug,
               std::uint64_t seed);

  Batch next();

 private:
  const EmbeddingDataset& dataset_;
  std::uint32_t b_;
  std::uint32_t mu_;
  AugmentConfig aug_;
  RandomStream order_rng_;
  RandomStream aug_rng_;
  std::vector<std::uint32_t> labeled_pool_;
  std::vector<std::uint32_t> unlabeled_pool_;
  std::size_t labeled_pos_ = 0;
  std::size_t unlabeled_pos_ = 0;

  std::uint32_t draw(std::vector<std::uint32_t>& pool, std::size_t& pos);
};

std::vector<Batch> sample_batches(const EmbeddingDataset& dataset, std::uint32_t b, std::uint32_t mu,
                                  std::uint32_t epoch_steps, const AugmentConfig& aug, std::uint64_t seed);

/// Dataset rows (all, or a subset) widened to double.
Matrix to_matrix(const EmbeddingDataset& dataset);
Matrix to_matrix(const EmbeddingDataset& dataset, std::span<const std::uint32_t> rows);

}  // namespace finessl
