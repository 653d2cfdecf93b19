// Copyright 2026 CFSR Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.

#ifndef CFSR_COMMON_HPP
#define CFSR_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cfsr {

// Error taxonomy; the CLI maps these to exit codes (usage 1, data 2, numeric 3).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Seeded RNG. The transforms on top of mt19937_64 are hand-rolled so that
// streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) {
    return lo + (hi - lo) * float(uniform());
  }

  // Inclusive bounds.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw UsageError("uniform_int: empty range");
    return lo + int(eng_() % uint64_t(int64_t(hi) - int64_t(lo) + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

  float normal() {
    // Box-Muller, one variate per call.
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    return float(std::sqrt(-2.0 * std::log(u1)) *
                 std::cos(2.0 * 3.14159265358979323846 * u2));
  }

  float normal(float mean, float stddev) { return mean + stddev * normal(); }

  // Derive an independent child seed.
  uint64_t fork() { return eng_(); }

 private:
  std::mt19937_64 eng_;
};

// Dense row-major boolean mask. Used both for TxT attention masks and for
// TxK convolution tap validity.
struct ByteMask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> m;

  ByteMask() = default;
  ByteMask(int r, int c, bool init = false)
      : rows(r), cols(c), m(size_t(r) * size_t(c), init ? 1 : 0) {}

  uint8_t& at(int r, int c) { return m[size_t(r) * cols + c]; }
  bool get(int r, int c) const { return m[size_t(r) * cols + c] != 0; }

  static ByteMask all_true(int r, int c) { return ByteMask(r, c, true); }

  bool operator==(const ByteMask& o) const {
    return rows == o.rows && cols == o.cols && m == o.m;
  }
};

// Global worker budget for op-internal parallelism. Work is split into
// disjoint output ranges so results are bit-identical for any thread count.
inline int& num_threads_ref() {
  static int n = 1;
  return n;
}
inline void set_num_threads(int n) { num_threads_ref() = n < 1 ? 1 : n; }
inline int num_threads() { return num_threads_ref(); }

inline void parallel_for(int64_t n, int64_t grain,
                         const std::function<void(int64_t, int64_t)>& fn) {
  int workers = num_threads();
  if (workers <= 1 || n < 2 * grain) {
    fn(0, n);
    return;
  }
  int64_t chunks = (n + grain - 1) / grain;
  if (chunks < workers) workers = int(chunks);
  int64_t per = (n + workers - 1) / workers;
  std::vector<std::thread> ts;
  ts.reserve(size_t(workers));
  for (int w = 0; w < workers; ++w) {
    int64_t lo = w * per;
    int64_t hi = std::min<int64_t>(n, lo + per);
    if (lo >= hi) break;
    ts.emplace_back([&fn, lo, hi]() { fn(lo, hi); });
  }
  for (auto& t : ts) t.join();
}

}  // namespace cfsr

#endif  // CFSR_COMMON_HPP
