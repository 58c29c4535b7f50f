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

#include "finessl/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "finessl/error.hpp"
#include "finessl/simd.hpp"

namespace finessl {

namespace {

const Matrix& head_weights(const ParamSet& p, HeadKind head) { return head == HeadKind::kMain ? p.main_w : p.aux_w; }
const Vector& head_bias(const ParamSet& p, HeadKind head) { return head == HeadKind::kMain ? p.main_b : p.aux_b; }

void check_input(const Heads& heads, std::size_t n) {
  if (n != heads.input_dim) {
    throw UsageError("input dim " + std::to_string(n) + " != heads dim " + std::to_string(heads.input_dim));
  }
}

Vector logits_for(const Heads& heads, HeadKind head, std::span<const double> h) {
  const Matrix& w = head_weights(heads.params, head);
  const Vector& b = head_bias(heads.params, head);
  Vector z(heads.num_classes);
  for (std::size_t k = 0; k < z.size(); ++k) z[k] = simd::dot(w.row(k), h) + b[k];
  return z;
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T take(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw ParseError("truncated checkpoint", pos);
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::vector<ParamBlock> ParamSet::blocks() {
  return {{"adapter_w", adapter_w.data, false}, {"adapter_b", adapter_b, true}, {"main_w", main_w.data, false},
          {"main_b", main_b, true},            {"aux_w", aux_w.data, false},   {"aux_b", aux_b, true}};
}

std::vector<ConstParamBlock> ParamSet::blocks() const {
  return {{"adapter_w", adapter_w.data, false}, {"adapter_b", adapter_b, true}, {"main_w", main_w.data, false},
          {"main_b", main_b, true},            {"aux_w", aux_w.data, false},   {"aux_b", aux_b, true}};
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  z.adapter_w = Matrix(adapter_w.rows, adapter_w.cols);
  z.adapter_b = Vector(adapter_b.size(), 0.0);
  z.main_w = Matrix(main_w.rows, main_w.cols);
  z.main_b = Vector(main_b.size(), 0.0);
  z.aux_w = Matrix(aux_w.rows, aux_w.cols);
  z.aux_b = Vector(aux_b.size(), 0.0);
  return z;
}

void add_scaled(ParamSet& dst, double a, const ParamSet& src) {
  auto d = dst.blocks();
  const auto s = src.blocks();
  for (std::size_t b = 0; b < d.size(); ++b) {
    if (d[b].values.size() != s[b].values.size()) throw UsageError("add_scaled: shape mismatch in " + std::string(d[b].name));
    simd::axpy(a, s[b].values, d[b].values);
  }
}

void Heads::check_finite() const {
  for (const auto& block : params.blocks()) {
    for (double v : block.values) {
      if (!std::isfinite(v)) throw NumericError("non-finite value in parameter block " + std::string(block.name), -1);
    }
  }
}

Vector forward_features(const Heads& heads, std::span<const double> x) {
  check_input(heads, x.size());
  if (!heads.use_adapter) return Vector(x.begin(), x.end());
  Vector h(heads.feature_dim);
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double pre = simd::dot(heads.params.adapter_w.row(i), x) + heads.params.adapter_b[i];
    h[i] = pre > 0.0 ? pre : 0.0;
  }
  return h;
}

Vector forward_main(const Heads& heads, std::span<const double> x) {
  return logits_for(heads, HeadKind::kMain, forward_features(heads, x));
}

Vector forward_aux(const Heads& heads, std::span<const double> x) {
  return logits_for(heads, HeadKind::kAux, forward_features(heads, x));
}

FeatureCache forward_features(const Heads& heads, const Matrix& x) {
  if (x.rows > 0) check_input(heads, x.cols);
  FeatureCache cache;
  cache.input = x;
  if (!heads.use_adapter) {
    cache.features = x;
    return cache;
  }
  cache.pre = Matrix(x.rows, heads.feature_dim);
  cache.features = Matrix(x.rows, heads.feature_dim);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t i = 0; i < heads.feature_dim; ++i) {
      const double pre = simd::dot(heads.params.adapter_w.row(i), x.row(r)) + heads.params.adapter_b[i];
      cache.pre(r, i) = pre;
      cache.features(r, i) = pre > 0.0 ? pre : 0.0;
    }
  }
  return cache;
}

Matrix head_logits(const Heads& heads, HeadKind head, const Matrix& features) {
  Matrix z(features.rows, heads.num_classes);
  const Matrix& w = head_weights(heads.params, head);
  const Vector& b = head_bias(heads.params, head);
  for (std::size_t r = 0; r < features.rows; ++r) {
    for (std::size_t k = 0; k < heads.num_classes; ++k) z(r, k) = simd::dot(w.row(k), features.row(r)) + b[k];
  }
  return z;
}

void accumulate_head_grad(HeadKind head, const Matrix& features, const Matrix& dlogits, ParamSet& grad) {
  Matrix& gw = head == HeadKind::kMain ? grad.main_w : grad.aux_w;
  Vector& gb = head == HeadKind::kMain ? grad.main_b : grad.aux_b;
  for (std::size_t r = 0; r < features.rows; ++r) {
    for (std::size_t k = 0; k < dlogits.cols; ++k) {
      const double g = dlogits(r, k);
      if (g == 0.0) continue;
      simd::axpy(g, features.row(r), gw.row(k));
      gb[k] += g;
    }
  }
}

Matrix main_feature_grad(const Heads& heads, const Matrix& dlogits) {
  Matrix dh(dlogits.rows, heads.feature_dim);
  for (std::size_t r = 0; r < dlogits.rows; ++r) {
    for (std::size_t k = 0; k < dlogits.cols; ++k) {
      const double g = dlogits(r, k);
      if (g != 0.0) simd::axpy(g, heads.params.main_w.row(k), dh.row(r));
    }
  }
  return dh;
}

void accumulate_adapter_grad(const Heads& heads, const FeatureCache& cache, const Matrix& dfeatures,
                             ParamSet& grad) {
  if (!heads.use_adapter) return;
  for (std::size_t r = 0; r < dfeatures.rows; ++r) {
    for (std::size_t i = 0; i < heads.feature_dim; ++i) {
      if (cache.pre(r, i) <= 0.0) continue;
      const double g = dfeatures(r, i);
      if (g == 0.0) continue;
      simd::axpy(g, cache.input.row(r), grad.adapter_w.row(i));
      grad.adapter_b[i] += g;
    }
  }
}

Heads init_heads(std::uint32_t num_classes, std::uint32_t dim, const InitSpec& spec,
                 const std::optional<std::vector<float>>& prototypes, RandomStream& rng) {
  if (num_classes < 1 || dim < 1) throw ConfigError("init_heads: C and D must be positive");
  Heads h;
  h.num_classes = num_classes;
  h.input_dim = dim;
  h.feature_dim = dim;
  h.use_adapter = spec.use_adapter;
  if (spec.use_adapter) {
    h.params.adapter_w = Matrix(dim, dim);
    h.params.adapter_b = Vector(dim, 0.0);
    for (double& w : h.params.adapter_w.data) w = 0.01 * rng.normal();
  }
  h.params.main_w = Matrix(num_classes, dim);
  h.params.main_b = Vector(num_classes, 0.0);
  h.params.aux_w = Matrix(num_classes, dim);
  h.params.aux_b = Vector(num_classes, 0.0);
  switch (spec.mode) {
    case InitMode::kZeros:
      break;
    case InitMode::kGaussian:
      if (!(spec.gaussian_sd > 0.0)) throw ConfigError("init_heads: gaussian sd must be positive");
      for (double& w : h.params.main_w.data) w = spec.gaussian_sd * rng.normal();
      for (double& w : h.params.aux_w.data) w = spec.gaussian_sd * rng.normal();
      break;
    case InitMode::kPrototypes: {
      if (!prototypes) throw ConfigError("init_heads: prototype init requested but dataset has no prototypes");
      if (prototypes->size() != static_cast<std::size_t>(num_classes) * dim) {
        throw ConfigError("init_heads: prototype block shape mismatch");
      }
      for (std::size_t k = 0; k < num_classes; ++k) {
        double sq = 0.0;
        for (std::size_t j = 0; j < dim; ++j) sq += static_cast<double>((*prototypes)[k * dim + j]) * (*prototypes)[k * dim + j];
        const double scale = sq > 0.0 ? spec.prototype_scale / std::sqrt(sq) : 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          h.params.main_w(k, j) = scale * (*prototypes)[k * dim + j];
        }
      }
      h.params.aux_w = h.params.main_w;
      break;
    }
  }
  return h;
}

void write_hds1(const Heads& heads, const std::filesystem::path& path) {
  std::vector<std::uint8_t> out{'H', 'D', 'S', '1'};
  put<std::uint32_t>(out, 1);
  put<std::uint32_t>(out, heads.num_classes);
  put<std::uint32_t>(out, heads.input_dim);
  put<std::uint32_t>(out, heads.feature_dim);
  put<std::uint8_t>(out, heads.use_adapter ? 1 : 0);
  for (const auto& block : heads.params.blocks()) {
    for (double v : block.values) put(out, static_cast<float>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

Heads read_hds1(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "HDS1", 4) != 0) throw ParseError("bad magic", 0);
  pos = 4;
  if (take<std::uint32_t>(bytes, pos) != 1) throw ParseError("unsupported version", 4);
  Heads h;
  h.num_classes = take<std::uint32_t>(bytes, pos);
  h.input_dim = take<std::uint32_t>(bytes, pos);
  h.feature_dim = take<std::uint32_t>(bytes, pos);
  h.use_adapter = take<std::uint8_t>(bytes, pos) != 0;
  if (!h.use_adapter && h.feature_dim != h.input_dim) throw ParseError("D' != D without adapter", 16);
  const std::size_t c = h.num_classes, d = h.input_dim, dp = h.feature_dim;
  if (h.use_adapter) {
    h.params.adapter_w = Matrix(dp, d);
    h.params.adapter_b = Vector(dp);
  }
  h.params.main_w = Matrix(c, dp);
  h.params.main_b = Vector(c);
  h.params.aux_w = Matrix(c, dp);
  h.params.aux_b = Vector(c);
  for (auto& block : h.params.blocks()) {
    for (double& v : block.values) v = take<float>(bytes, pos);
  }
  if (pos != bytes.size()) throw ParseError("trailing bytes", pos);
  return h;
}

}  // namespace finessl
