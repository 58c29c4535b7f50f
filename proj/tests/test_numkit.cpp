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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <set>

#include "finessl/error.hpp"
#include "finessl/numkit.hpp"

using namespace finessl;

TEST_CASE("log_sum_exp examples") {
  CHECK(log_sum_exp(std::vector<double>{0.0, 0.0}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  for (double x : {-1e4, -3.5, 0.0, 2.25, 1e4}) CHECK(log_sum_exp(std::vector<double>{x}) == x);
  // shift by hand: 1000 + log(e^0 + e^0)
  CHECK(log_sum_exp(std::vector<double>{1000.0, 1000.0}) == 1000.0 + std::log(2.0));
  CHECK(std::isfinite(log_sum_exp(std::vector<double>{1e4, -1e4, 1e4})));
}

TEST_CASE("log_sum_exp rejects empty and non-finite input") {
  CHECK_THROWS_AS(log_sum_exp(std::vector<double>{}), UsageError);
  CHECK_THROWS_AS(log_sum_exp(std::vector<double>{1.0, NAN}), UsageError);
  CHECK_THROWS_AS(log_sum_exp(std::vector<double>{INFINITY}), UsageError);
}

TEST_CASE("softmax examples") {
  auto p = softmax(std::vector<double>{0.0, 0.0});
  CHECK(p[0] == 0.5);
  CHECK(p[1] == 0.5);
  for (double c : {-700.0, 0.0, 3.0, 700.0}) {
    p = softmax(std::vector<double>{c, c, c, c});
    for (double v : p) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  }
  p = softmax(std::vector<double>{std::log(1.0), std::log(3.0)});
  CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-14));
  CHECK_THROWS_AS(softmax(std::vector<double>{}), UsageError);
}

TEST_CASE("log_sum_exp is shift-equivariant") {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int t = 0; t < 2000; ++t) {
    std::vector<double> v(1 + t % 17);
    for (double& x : v) x = u(gen);
    const double c = u(gen);
    std::vector<double> w = v;
    for (double& x : w) x += c;
    CHECK(std::abs(log_sum_exp(w) - (log_sum_exp(v) + c)) <= 1e-12 * std::max(1.0, std::abs(log_sum_exp(w))));
  }
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int t = 0; t < 10000; ++t) {
    std::vector<double> v(2 + t % 31);
    for (double& x : v) x = u(gen);
    const auto p = softmax(v);
    double s = 0.0;
    for (double x : p) {
      CHECK(x > 0.0);
      s += x;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
    if (t % 50 == 0) {
      std::vector<double> w = v;
      for (double& x : w) x += 12.5;
      const auto q = softmax(w);
      for (std::size_t k = 0; k < p.size(); ++k) CHECK(std::abs(p[k] - q[k]) <= 1e-12);
    }
  }
}

TEST_CASE("argmax takes the lowest index on ties") {
  CHECK(argmax(std::vector<double>{0.5, 0.5}) == 0);
  CHECK(argmax(std::vector<double>{0.2, 0.5, 0.3}) == 1);
  CHECK(argmax(std::vector<double>{1.0, 3.0, 3.0}) == 1);
}

TEST_CASE("softmax_rows matches the vector form") {
  Matrix z(3, 4);
  for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] = 0.37 * static_cast<double>(i) - 1.0;
  const Matrix p = softmax_rows(z);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto q = softmax(z.row(i));
    for (std::size_t k = 0; k < 4; ++k) CHECK(p(i, k) == q[k]);
  }
}

TEST_CASE("RandomStream reproduces draw sequences") {
  RandomStream a(42, StreamId::kDataGen), b(42, StreamId::kDataGen);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  for (int i = 0; i < 1000; ++i) {
    const double x = a.normal(), y = b.normal();
    CHECK(std::memcmp(&x, &y, sizeof x) == 0);
  }
}

TEST_CASE("RandomStream sub-streams are independent") {
  RandomStream alone(7, StreamId::kBatchOrder);
  std::vector<std::uint64_t> expected;
  for (int i = 0; i < 64; ++i) expected.push_back(alone.next_u64());

  RandomStream order(7, StreamId::kBatchOrder);
  RandomStream aug(7, StreamId::kAugmentation);
  std::vector<std::uint64_t> got;
  for (int i = 0; i < 64; ++i) {
    for (int k = 0; k < 3; ++k) aug.normal();  // interleaved traffic on another stream
    got.push_back(order.next_u64());
  }
  CHECK(got == expected);

  RandomStream other(7, StreamId::kAugmentation);
  RandomStream again(7, StreamId::kBatchOrder);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += other.next_u64() == again.next_u64();
  CHECK(same == 0);
}

TEST_CASE("RandomStream distributions") {
  RandomStream r(3, 99);
  double mean = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    mean += x;
    sq += x * x;
  }
  mean /= n;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.02);

  std::vector<int> hits(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto k = r.uniform_index(7);
    REQUIRE(k < 7);
    ++hits[k];
  }
  for (int h : hits) CHECK(std::abs(h - 10000) < 500);

  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("shuffle is a permutation and fork leaves the parent untouched") {
  RandomStream r(9, 1);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  r.shuffle(std::span<int>(v));
  std::set<int> s(v.begin(), v.end());
  CHECK(s.size() == 50);
  CHECK(*s.begin() == 0);
  CHECK(*s.rbegin() == 49);

  RandomStream p(9, 1), q(9, 1);
  RandomStream child = p.fork(5);
  child.next_u64();
  CHECK(p.next_u64() == q.next_u64());
  RandomStream child2 = q.fork(5);
  RandomStream child3 = RandomStream(9, 1).fork(5);
  CHECK(child2.next_u64() == child3.next_u64());
}
