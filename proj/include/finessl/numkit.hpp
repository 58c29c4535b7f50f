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

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace finessl {

using Vector = std::vector<double>;

/// Row-major dense matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  bool operator==(const Matrix&) const = default;
};

/// log sum_k exp(v_k), shifted by the max. Throws UsageError on empty or
/// non-finite input.
double log_sum_exp(std::span<const double> v);

/// Writes softmax(v) into `out` (same length as v).
void softmax(std::span<const double> v, std::span<double> out);
Vector softmax(std::span<const double> v);

/// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

/// Lowest index of the maximum entry.
std::size_t argmax(std::span<const double> v);

/// Named sub-streams. Each consumer draws from its own stream so that, for
/// example, changing the augmentation settings never perturbs batch order.
enum class StreamId : std::uint64_t {
  kDataGen = 1,
  kAugmentation = 2,
  kBatchOrder = 3,
  kInit = 4,
};

/// xoshiro256** seeded through splitmix64 from (seed, stream_id).
///
/// Only integer arithmetic feeds the state, so a given (seed, stream_id, draw
/// sequence) reproduces on every platform. `normal()` goes through libm
/// log/sqrt/cos and is reproducible wherever those are correctly rounded.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream_id);
  RandomStream(std::uint64_t seed, StreamId id) : RandomStream(seed, static_cast<std::uint64_t>(id)) {}

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n);

  /// Standard normal via Box-Muller (one value per call, the pair's sine
  /// half is cached).
  double normal();

  /// Fisher-Yates; std::shuffle's sequence is implementation-defined.
  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// Independent child stream; does not advance this stream.
  RandomStream fork(std::uint64_t child_id) const;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace finessl
