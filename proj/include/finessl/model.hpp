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

// Trainable state over frozen embeddings:
//
//   x --[adapter: relu(A x + a), optional]--> h --+--> main head  W h + b
//                                                 +--> aux head   W' h + b'
//
// The aux head reads h through a gradient barrier: aux losses update only
// W' and b', never the adapter.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "finessl/numkit.hpp"

namespace finessl {

/// One named parameter array, viewed flat.
struct ParamBlock {
  std::string_view name;
  std::span<double> values;
  bool is_bias;
};

struct ConstParamBlock {
  std::string_view name;
  std::span<const double> values;
  bool is_bias;
};

/// The six parameter arrays in declaration order. Also the shape of
/// gradients and optimizer velocities. Adapter arrays are empty when the
/// adapter is disabled.
struct ParamSet {
  Matrix adapter_w;  // D' x D
  Vector adapter_b;  // D'
  Matrix main_w;     // C x D'
  Vector main_b;     // C
  Matrix aux_w;      // C x D'
  Vector aux_b;      // C

  std::vector<ParamBlock> blocks();
  std::vector<ConstParamBlock> blocks() const;

  /// Same shapes, all zeros.
  ParamSet zeros_like() const;

  bool operator==(const ParamSet&) const = default;
};

using GradBundle = ParamSet;

/// dst += a * src, block by block. Shapes must match.
void add_scaled(ParamSet& dst, double a, const ParamSet& src);

struct Heads {
  std::uint32_t num_classes = 0;
  std::uint32_t input_dim = 0;
  std::uint32_t feature_dim = 0;  // D'; equals input_dim when the adapter is off
  bool use_adapter = false;
  ParamSet params;

  /// Throws NumericError naming the first block holding a non-finite value.
  void check_finite() const;

  bool operator==(const Heads&) const = default;
};

enum class HeadKind { kMain, kAux };

/// Adapter output for a batch, plus the pre-activation needed by backprop.
struct FeatureCache {
  Matrix input;
  Matrix pre;       // empty when the adapter is off
  Matrix features;  // rows of h
};

Vector forward_features(const Heads& heads, std::span<const double> x);
Vector forward_main(const Heads& heads, std::span<const double> x);
Vector forward_aux(const Heads& heads, std::span<const double> x);

FeatureCache forward_features(const Heads& heads, const Matrix& x);
Matrix head_logits(const Heads& heads, HeadKind head, const Matrix& features);

/// Accumulate d(loss)/d(head params) given d(loss)/d(logits).
void accumulate_head_grad(HeadKind head, const Matrix& features, const Matrix& dlogits, ParamSet& grad);

/// d(loss)/d(features) for the main head: dlogits * W.
Matrix main_feature_grad(const Heads& heads, const Matrix& dlogits);

/// Backprop d(loss)/d(features) through the adapter into grad.adapter_*.
/// No-op when the adapter is off.
void accumulate_adapter_grad(const Heads& heads, const FeatureCache& cache, const Matrix& dfeatures,
                             ParamSet& grad);

enum class InitMode { kZeros, kGaussian, kPrototypes };

struct InitSpec {
  InitMode mode = InitMode::kZeros;
  double gaussian_sd = 0.01;
  double prototype_scale = 1.0;
  bool use_adapter = false;

  bool operator==(const InitSpec&) const = default;
};

/// Adapter (when on) always starts at N(0, 0.01^2) weights, zero bias.
/// Throws ConfigError when prototypes are requested but absent.
Heads init_heads(std::uint32_t num_classes, std::uint32_t dim, const InitSpec& spec,
                 const std::optional<std::vector<float>>& prototypes, RandomStream& rng);

// HDS1 checkpoint: "HDS1" | u32 version=1 | u32 C | u32 D | u32 D' |
// u8 adapter_flag | f32 arrays in ParamSet declaration order (adapter arrays
// only when the flag is set).
void write_hds1(const Heads& heads, const std::filesystem::path& path);
Heads read_hds1(const std::filesystem::path& path);

}  // namespace finessl
