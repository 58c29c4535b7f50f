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

// Dense double-precision inner-loop kernels.
//
// Every kernel exists as a scalar reference and, where the build and the CPU
// allow, an AVX2/FMA variant. The active table is chosen once at first use:
// AVX2 when the CPU reports avx2+fma, scalar otherwise. Setting
// FINESSL_SIMD=scalar in the environment forces the reference path.
//
// Reduction order is fixed per table (scalar: left to right; avx2: four
// striped lanes combined as (l0+l1)+(l2+l3), then the tail left to right),
// so a given table is bit-reproducible run to run.

#pragma once

#include <cstddef>
#include <span>
#include <string_view>

namespace finessl::simd {

struct KernelTable {
  std::string_view name;
  /// sum_i a[i]*b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  /// y[i] += alpha*x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  /// y[i] = alpha*x[i] + beta*y[i]
  void (*axpby)(double alpha, const double* x, double beta, double* y, std::size_t n);
  /// max_i x[i]
  double (*max)(const double* x, std::size_t n);
};

const KernelTable& scalar_kernels();

/// nullptr when the AVX2 table was not compiled in or the CPU lacks avx2/fma.
const KernelTable* avx2_kernels();

/// The table every module uses.
const KernelTable& active();

/// Pin the active table (tests and benchmarks). Not thread-safe against
/// concurrent kernel calls.
void set_active(const KernelTable& table);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}

inline void axpby(double alpha, std::span<const double> x, double beta, std::span<double> y) {
  active().axpby(alpha, x.data(), beta, y.data(), x.size());
}

inline double max(std::span<const double> x) { return active().max(x.data(), x.size()); }

}  // namespace finessl::simd
