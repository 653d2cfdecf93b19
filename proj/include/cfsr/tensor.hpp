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

#ifndef CFSR_TENSOR_HPP
#define CFSR_TENSOR_HPP

#include <algorithm>
#include <array>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>

#include "cfsr/common.hpp"

namespace cfsr {

namespace detail {

inline int64_t shape_numel(const std::vector<int>& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace detail

struct TensorData {
  std::vector<int> shape;
  std::vector<float> v;
  std::vector<float> g;  // empty until materialized
  bool requires_grad = false;
};

// Shared-storage handle. Copies alias the same buffer, which is what gives a
// parameter used in several places a single gradient accumulator.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, bool requires_grad = false) {
    if (shape.empty() || shape.size() > 4)
      throw UsageError("tensor rank must be in [1,4]");
    for (int d : shape)
      if (d <= 0) throw UsageError("tensor dims must be positive");
    d_ = std::make_shared<TensorData>();
    int64_t n = detail::shape_numel(shape);
    d_->shape = std::move(shape);
    d_->v.assign(size_t(n), 0.0f);
    d_->requires_grad = requires_grad;
  }

  static Tensor scalar(float x) {
    Tensor t(std::vector<int>{1});
    t.data()[0] = x;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<float> values) {
    Tensor t(std::move(shape));
    if (int64_t(values.size()) != t.numel())
      throw UsageError("tensor data length does not match shape");
    t.d_->v = std::move(values);
    return t;
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.d_->v.begin(), t.d_->v.end(), value);
    return t;
  }

  static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0f); }

  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                      float mean = 0.0f) {
    Tensor t(std::move(shape));
    for (auto& x : t.d_->v) x = rng.normal(mean, stddev);
    return t;
  }

  static Tensor uniform(std::vector<int> shape, Rng& rng, float lo, float hi) {
    Tensor t(std::move(shape));
    for (auto& x : t.d_->v) x = rng.uniform(lo, hi);
    return t;
  }

  bool defined() const { return bool(d_); }
  const std::vector<int>& shape() const { return d_->shape; }
  int rank() const { return int(d_->shape.size()); }
  int dim(int i) const { return d_->shape[size_t(i)]; }
  int64_t numel() const { return int64_t(d_->v.size()); }

  float* data() { return d_->v.data(); }
  const float* data() const { return d_->v.data(); }
  std::vector<float>& values() { return d_->v; }
  const std::vector<float>& values() const { return d_->v; }

  float value() const {
    if (numel() != 1) throw UsageError("value(): tensor is not a scalar");
    return d_->v[0];
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return d_ && !d_->g.empty(); }
  void ensure_grad() {
    if (d_->g.empty()) d_->g.assign(d_->v.size(), 0.0f);
  }
  float* grad() { return d_->g.data(); }
  const float* grad() const { return d_->g.data(); }
  void zero_grad() {
    if (!d_->g.empty()) std::fill(d_->g.begin(), d_->g.end(), 0.0f);
  }
  void clear_grad() { d_->g.clear(); }

  bool all_finite() const {
    for (float x : d_->v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  bool same_storage(const Tensor& o) const { return d_.get() == o.d_.get(); }

  Tensor detached_copy() const {
    Tensor t(d_->shape);
    t.d_->v = d_->v;
    return t;
  }

 private:
  std::shared_ptr<TensorData> d_;
};

// Reverse-mode tape. One Graph per forward pass; ops compute eagerly and
// record a backward closure when any input requires a gradient. Distinct
// graphs may live on distinct threads; a single graph is single-threaded.
class Graph {
 public:
  explicit Graph(bool training = false, uint64_t dropout_seed = 0)
      : training_(training), rng_(dropout_seed) {}

  bool training() const { return training_; }
  size_t tape_size() const { return tape_.size(); }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw UsageError("backward: loss must be a scalar tensor");
    if (!loss.requires_grad())
      throw UsageError("backward: loss does not depend on any requires_grad leaf");
    // Node outputs are intermediates owned by this graph; reset them so a
    // repeated backward deposits exactly one more unit into the leaves.
    for (auto& n : tape_) n.out.zero_grad();
    Tensor l = loss;
    l.ensure_grad();
    l.grad()[0] = 1.0f;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) it->back();
  }

  // Registers a node whose output values are already computed. Exposed so
  // modules with bespoke gradients (CTC) can participate in the tape.
  Tensor custom(Tensor out, const std::vector<Tensor>& inputs,
                std::function<void()> back) {
    bool rg = false;
    for (const auto& t : inputs) rg |= t.requires_grad();
    out.set_requires_grad(rg);
    if (rg) tape_.push_back(Node{out, std::move(back)});
    return out;
  }

  // ---- elementwise ----

  Tensor add(Tensor a, Tensor b) {
    bool bcast = false;
    if (a.shape() != b.shape()) {
      // b may be a suffix of a's shape (e.g. bias [D] onto [T,D]).
      if (b.rank() < a.rank() &&
          std::equal(b.shape().begin(), b.shape().end(),
                     a.shape().end() - b.rank()))
        bcast = true;
      else
        throw UsageError("add: shape mismatch " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
    }
    Tensor out(a.shape());
    const int64_t n = a.numel(), bn = b.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[bcast ? i % bn : i];
    return custom(out, {a, b}, [out, a, b, bcast]() mutable {
      if (!out.has_grad()) return;
      const float* go = out.grad();
      const int64_t n = out.numel(), bn = b.numel();
      if (a.requires_grad()) {
        a.ensure_grad();
        float* ga = a.grad();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        float* gb = b.grad();
        if (bcast)
          for (int64_t i = 0; i < n; ++i) gb[i % bn] += go[i];
        else
          for (int64_t i = 0; i < n; ++i) gb[i] += go[i];
      }
    });
  }

  Tensor mul(Tensor a, Tensor b) {
    if (a.shape() != b.shape())
      throw UsageError("mul: shape mismatch");
    Tensor out(a.shape());
    const int64_t n = a.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    return custom(out, {a, b}, [out, a, b]() mutable {
      if (!out.has_grad()) return;
      const float* go = out.grad();
      const int64_t n = out.numel();
      if (a.requires_grad()) {
        a.ensure_grad();
        float* ga = a.grad();
        const float* pb = b.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * pb[i];
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        float* gb = b.grad();
        const float* pa = a.data();
        for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * pa[i];
      }
    });
  }

  Tensor scale(Tensor a, float s) {
    Tensor out(a.shape());
    const int64_t n = a.numel();
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
    return custom(out, {a}, [out, a, s]() mutable {
      if (!out.has_grad() || !a.requires_grad()) return;
      a.ensure_grad();
      const float* go = out.grad();
      float* ga = a.grad();
      const int64_t n = out.numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * s;
    });
  }

  Tensor sub(Tensor a, Tensor b) { return add(a, scale(b, -1.0f)); }

  // ---- activations ----

  Tensor sigmoid(Tensor a) {
    Tensor out(a.shape());
    const int64_t n = a.numel();
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = 1.0f / (1.0f + std::exp(-pa[i]));
    return custom(out, {a}, [out, a]() mutable {
      if (!out.has_grad() || !a.requires_grad()) return;
      a.ensure_grad();
      const float* go = out.grad();
      const float* po = out.data();
      float* ga = a.grad();
      const int64_t n = out.numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * po[i] * (1.0f - po[i]);
    });
  }

  Tensor swish(Tensor a) {
    Tensor out(a.shape());
    const int64_t n = a.numel();
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
      float s = 1.0f / (1.0f + std::exp(-pa[i]));
      po[i] = pa[i] * s;
    }
    return custom(out, {a}, [out, a]() mutable {
      if (!out.has_grad() || !a.requires_grad()) return;
      a.ensure_grad();
      const float* go = out.grad();
      const float* pa = a.data();
      float* ga = a.grad();
      const int64_t n = out.numel();
      for (int64_t i = 0; i < n; ++i) {
        float s = 1.0f / (1.0f + std::exp(-pa[i]));
        ga[i] += go[i] * (s + pa[i] * s * (1.0f - s));
      }
    });
  }

  Tensor gelu(Tensor a) {
    Tensor out(a.shape());
    const int64_t n = a.numel();
    const float* pa = a.data();
    float* po = out.data();
    constexpr float kInvSqrt2 = 0.70710678118654752440f;
    for (int64_t i = 0; i < n; ++i)
      po[i] = 0.5f * pa[i] * (1.0f + std::erf(pa[i] * kInvSqrt2));
    return custom(out, {a}, [out, a]() mutable {
      if (!out.has_grad() || !a.requires_grad()) return;
      a.ensure_grad();
      const float* go = out.grad();
      const float* pa = a.data();
      float* ga = a.grad();
      const int64_t n = out.numel();
      constexpr float kInvSqrt2 = 0.70710678118654752440f;
      constexpr float kInvSqrt2Pi = 0.39894228040143267794f;
      for (int64_t i = 0; i < n; ++i) {
        float x = pa[i];
        float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
        float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
        ga[i] += go[i] * (cdf + x * pdf);
      }
    });
  }

  // ---- matmul ----

  // a: [..., M, K], b: [K, N] or [..., K, N] with identical batch dims.
  Tensor matmul(Tensor a, Tensor b) {
    if (a.rank() < 2 || b.rank() < 2)
      throw UsageError("matmul: operands must have rank >= 2");
    const int M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
    const int Kb = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
    if (K != Kb)
      throw UsageError("matmul: inner dims disagree " +
                       detail::shape_str(a.shape()) + " x " +
                       detail::shape_str(b.shape()));
    std::vector<int> batch(a.shape().begin(), a.shape().end() - 2);
    const bool b_batched = b.rank() > 2;
    if (b_batched) {
      std::vector<int> bb(b.shape().begin(), b.shape().end() - 2);
      if (bb != batch)
        throw UsageError("matmul: batch dims must match or b must be rank 2");
    }
    int64_t B = 1;
    for (int d : batch) B *= d;
    std::vector<int> oshape = batch;
    oshape.push_back(M);
    oshape.push_back(N);
    Tensor out(oshape);
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t bi = 0; bi < B; ++bi) {
      const float* A = pa + bi * int64_t(M) * K;
      const float* Bm = pb + (b_batched ? bi * int64_t(K) * N : 0);
      float* C = po + bi * int64_t(M) * N;
      parallel_for(M, 16, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
          float* crow = C + i * N;
          for (int k = 0; k < K; ++k) {
            float av = A[i * K + k];
            if (av == 0.0f) continue;
            const float* brow = Bm + int64_t(k) * N;
            for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
          }
        }
      });
    }
    return custom(out, {a, b}, [out, a, b, M, K, N, B, b_batched]() mutable {
      if (!out.has_grad()) return;
      const float* go = out.grad();
      if (a.requires_grad()) {
        a.ensure_grad();
        float* ga = a.grad();
        const float* pb = b.data();
        for (int64_t bi = 0; bi < B; ++bi) {
          const float* G = go + bi * int64_t(M) * N;
          const float* Bm = pb + (b_batched ? bi * int64_t(K) * N : 0);
          float* GA = ga + bi * int64_t(M) * K;
          parallel_for(M, 16, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
              const float* grow = G + i * N;
              for (int k = 0; k < K; ++k) {
                const float* brow = Bm + int64_t(k) * N;
                float acc = 0.0f;
                for (int j = 0; j < N; ++j) acc += grow[j] * brow[j];
                GA[i * K + k] += acc;
              }
            }
          });
        }
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        float* gb = b.grad();
        const float* pa = a.data();
        for (int64_t bi = 0; bi < B; ++bi) {
          const float* G = go + bi * int64_t(M) * N;
          const float* A = pa + bi * int64_t(M) * K;
          float* GB = gb + (b_batched ? bi * int64_t(K) * N : 0);
          parallel_for(K, 16, [&](int64_t lo, int64_t hi) {
            for (int64_t k = lo; k < hi; ++k) {
              float* gbrow = GB + k * N;
              for (int i = 0; i < M; ++i) {
                float av = A[int64_t(i) * K + k];
                if (av == 0.0f) continue;
                const float* grow = G + int64_t(i) * N;
                for (int j = 0; j < N; ++j) gbrow[j] += av * grow[j];
              }
            }
          });
        }
      }
    });
  }

  // ---- shape ops ----

  Tensor reshape(Tensor a, std::vector<int> shape) {
    if (detail::shape_numel(shape) != a.numel())
      throw UsageError("reshape: element count mismatch");
    Tensor out = Tensor::from(std::move(shape), a.values());
    return custom(out, {a}, [out, a]() mutable {
      if (!out.has_grad() || !a.requires_grad()) return;
      a.ensure_grad();
      const float* go = out.grad();
      float* ga = a.grad();
      const int64_t n = out.numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
    });
  }

  Tensor transpose(Tensor a, int d0, int d1) {
    const int r = a.rank();
    if (d0 < 0 || d1 < 0 || d0 >= r || d1 >= r)
      throw UsageError("transpose: axis out of range");
    std::vector<int> oshape = a.shape();
    std::swap(oshape[size_t(d0)], oshape[size_t(d1)]);
    Tensor out(oshape);
    permute_copy(a.data(), a.shape(), out.data(), d0, d1, /*accumulate=*/false);
    return custom(out, {a}, [out, a, d0, d1]() mutable {
      if (!out.has_grad() || !a.requires_grad()) return;
      a.ensure_grad();
      // accumulate path: dst (shape = 2nd arg) += permute(src)
      permute_copy(out.grad(), a.shape(), a.grad(), d0, d1, /*accumulate=*/true);
    });
  }

  Tensor slice(Tensor a, int axis, int start, int len) {
    const int r = a.rank();
    if (axis < 0 || axis >= r) throw UsageError("slice: axis out of range");
    if (start < 0 || len <= 0 || start + len > a.dim(axis))
      throw UsageError("slice: range out of bounds");
    std::vector<int> oshape = a.shape();
    oshape[size_t(axis)] = len;
    Tensor out(oshape);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);
    const int64_t abs_ax = a.dim(axis);
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(po + o * len * inner,
                  pa + (o * abs_ax + start) * inner,
                  size_t(len) * size_t(inner) * sizeof(float));
    return custom(out, {a}, [out, a, axis, start, len, outer, inner, abs_ax]() mutable {
      if (!out.has_grad() || !a.requires_grad()) return;
      a.ensure_grad();
      const float* go = out.grad();
      float* ga = a.grad();
      for (int64_t o = 0; o < outer; ++o) {
        const float* src = go + o * len * inner;
        float* dst = ga + (o * abs_ax + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }

  Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw UsageError("concat: empty input list");
    const int r = xs[0].rank();
    if (axis < 0 || axis >= r) throw UsageError("concat: axis out of range");
    int total = 0;
    for (const auto& x : xs) {
      if (x.rank() != r) throw UsageError("concat: rank mismatch");
      for (int i = 0; i < r; ++i)
        if (i != axis && x.dim(i) != xs[0].dim(i))
          throw UsageError("concat: non-axis dims must match");
      total += x.dim(axis);
    }
    std::vector<int> oshape = xs[0].shape();
    oshape[size_t(axis)] = total;
    Tensor out(oshape);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xs[0].dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= xs[0].dim(i);
    float* po = out.data();
    int64_t off = 0;
    for (const auto& x : xs) {
      const int64_t len = x.dim(axis);
      const float* px = x.data();
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(po + (o * total + off) * inner, px + o * len * inner,
                    size_t(len) * size_t(inner) * sizeof(float));
      off += len;
    }
    std::vector<Tensor> inputs = xs;
    return custom(out, inputs, [out, inputs, axis, outer, inner, total]() mutable {
      if (!out.has_grad()) return;
      const float* go = out.grad();
      int64_t off = 0;
      for (auto& x : inputs) {
        const int64_t len = x.dim(axis);
        if (x.requires_grad()) {
          x.ensure_grad();
          float* gx = x.grad();
          for (int64_t o = 0; o < outer; ++o) {
            const float* src = go + (o * total + off) * inner;
            float* dst = gx + o * len * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
          }
        }
        off += len;
      }
    });
  }

  // ---- normalization / softmax ----

  // Per-vector normalization over the last dim; statistics in f64.
  Tensor layer_norm(Tensor x, Tensor gain, Tensor bias,
                    float eps = 1e-5f) {
    const int D = x.dim(x.rank() - 1);
    if (gain.rank() != 1 || gain.dim(0) != D || bias.rank() != 1 ||
        bias.dim(0) != D)
      throw UsageError("layer_norm: gain/bias must be [D]");
    const int64_t rows = x.numel() / D;
    Tensor out(x.shape());
    auto xhat = std::make_shared<std::vector<float>>(size_t(x.numel()));
    auto inv_std = std::make_shared<std::vector<float>>(size_t(rows));
    const float* px = x.data();
    const float* pg = gain.data();
    const float* pb = bias.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
      const float* xr = px + r * D;
      double mean = 0.0;
      for (int d = 0; d < D; ++d) mean += xr[d];
      mean /= D;
      double var = 0.0;
      for (int d = 0; d < D; ++d) {
        double c = xr[d] - mean;
        var += c * c;
      }
      var /= D;
      float is = float(1.0 / std::sqrt(var + double(eps)));
      (*inv_std)[size_t(r)] = is;
      float* hr = xhat->data() + r * D;
      float* orow = po + r * D;
      for (int d = 0; d < D; ++d) {
        hr[d] = (xr[d] - float(mean)) * is;
        orow[d] = pg[d] * hr[d] + pb[d];
      }
    }
    return custom(out, {x, gain, bias},
                  [out, x, gain, bias, xhat, inv_std, rows, D]() mutable {
      if (!out.has_grad()) return;
      const float* go = out.grad();
      const float* pg = gain.data();
      if (gain.requires_grad()) gain.ensure_grad();
      if (bias.requires_grad()) bias.ensure_grad();
      if (x.requires_grad()) x.ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const float* grow = go + r * D;
        const float* hr = xhat->data() + r * D;
        if (gain.requires_grad()) {
          float* gg = gain.grad();
          for (int d = 0; d < D; ++d) gg[d] += grow[d] * hr[d];
        }
        if (bias.requires_grad()) {
          float* gb = bias.grad();
          for (int d = 0; d < D; ++d) gb[d] += grow[d];
        }
        if (x.requires_grad()) {
          float* gx = x.grad() + r * D;
          double m1 = 0.0, m2 = 0.0;
          for (int d = 0; d < D; ++d) {
            double gd = double(grow[d]) * pg[d];
            m1 += gd;
            m2 += gd * hr[d];
          }
          m1 /= D;
          m2 /= D;
          const float is = (*inv_std)[size_t(r)];
          for (int d = 0; d < D; ++d) {
            double gd = double(grow[d]) * pg[d];
            gx[d] += float((gd - m1 - double(hr[d]) * m2) * is);
          }
        }
      }
    });
  }

  Tensor softmax(Tensor x) { return softmax_impl(x, /*log=*/false); }
  Tensor log_softmax(Tensor x) { return softmax_impl(x, /*log=*/true); }

  // out = allowed ? x : fill, over the trailing two dims; leading dims share
  // the mask (per-head broadcast).
  Tensor masked_fill(Tensor x, const ByteMask& mask, float fill) {
    const int r = x.rank();
    if (r < 2 || x.dim(r - 2) != mask.rows || x.dim(r - 1) != mask.cols)
      throw UsageError("masked_fill: mask dims must match trailing dims");
    const int64_t plane = int64_t(mask.rows) * mask.cols;
    const int64_t planes = x.numel() / plane;
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    const uint8_t* pm = mask.m.data();
    for (int64_t p = 0; p < planes; ++p)
      for (int64_t i = 0; i < plane; ++i)
        po[p * plane + i] = pm[i] ? px[p * plane + i] : fill;
    auto keep = std::make_shared<std::vector<uint8_t>>(mask.m);
    return custom(out, {x}, [out, x, keep, plane, planes]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      x.ensure_grad();
      const float* go = out.grad();
      float* gx = x.grad();
      const uint8_t* pm = keep->data();
      for (int64_t p = 0; p < planes; ++p)
        for (int64_t i = 0; i < plane; ++i)
          if (pm[i]) gx[p * plane + i] += go[p * plane + i];
    });
  }

  // ---- convolutions ----

  // x: [T,D], kernel: [K,D], taps: [T,K]; invalid taps contribute zero and
  // receive no gradient.
  Tensor depthwise_conv1d_masked(Tensor x, Tensor kernel,
                                 const ByteMask& taps) {
    if (x.rank() != 2 || kernel.rank() != 2)
      throw UsageError("depthwise_conv1d_masked: x and kernel must be rank 2");
    const int T = x.dim(0), D = x.dim(1), K = kernel.dim(0);
    if (kernel.dim(1) != D)
      throw UsageError("depthwise_conv1d_masked: kernel channel mismatch");
    if (K % 2 == 0)
      throw UsageError("depthwise_conv1d_masked: kernel size must be odd");
    if (taps.rows != T || taps.cols != K)
      throw UsageError("depthwise_conv1d_masked: tap mask must be [T,K]");
    const int c = K / 2;
    Tensor out({T, D});
    const float* px = x.data();
    const float* pk = kernel.data();
    float* po = out.data();
    for (int t = 0; t < T; ++t) {
      float* orow = po + int64_t(t) * D;
      for (int k = 0; k < K; ++k) {
        if (!taps.get(t, k)) continue;
        const int j = t + k - c;
        if (j < 0 || j >= T) continue;  // mask should already exclude these
        const float* xrow = px + int64_t(j) * D;
        const float* krow = pk + int64_t(k) * D;
        for (int d = 0; d < D; ++d) orow[d] += krow[d] * xrow[d];
      }
    }
    auto keep = std::make_shared<ByteMask>(taps);
    return custom(out, {x, kernel}, [out, x, kernel, keep, T, D, K, c]() mutable {
      if (!out.has_grad()) return;
      const float* go = out.grad();
      const float* px = x.data();
      const float* pk = kernel.data();
      if (x.requires_grad()) x.ensure_grad();
      if (kernel.requires_grad()) kernel.ensure_grad();
      for (int t = 0; t < T; ++t) {
        const float* grow = go + int64_t(t) * D;
        for (int k = 0; k < K; ++k) {
          if (!keep->get(t, k)) continue;
          const int j = t + k - c;
          if (j < 0 || j >= T) continue;
          if (x.requires_grad()) {
            float* gx = x.grad() + int64_t(j) * D;
            const float* krow = pk + int64_t(k) * D;
            for (int d = 0; d < D; ++d) gx[d] += grow[d] * krow[d];
          }
          if (kernel.requires_grad()) {
            float* gk = kernel.grad() + int64_t(k) * D;
            const float* xrow = px + int64_t(j) * D;
            for (int d = 0; d < D; ++d) gk[d] += grow[d] * xrow[d];
          }
        }
      }
    });
  }

  // x: [Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout] (optional, pass
  // undefined Tensor to skip). Zero padding.
  Tensor conv2d(Tensor x, Tensor w, Tensor bias,
                int stride_h, int stride_w, int pad_h, int pad_w) {
    if (x.rank() != 3 || w.rank() != 4)
      throw UsageError("conv2d: x must be [Cin,H,W], w must be [Cout,Cin,kh,kw]");
    const int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != Cin) throw UsageError("conv2d: channel mismatch");
    const int Ho = (H + 2 * pad_h - kh) / stride_h + 1;
    const int Wo = (W + 2 * pad_w - kw) / stride_w + 1;
    if (Ho <= 0 || Wo <= 0) throw UsageError("conv2d: input too small");
    const bool has_bias = bias.defined();
    Tensor out({Cout, Ho, Wo});
    const float* px = x.data();
    const float* pw = w.data();
    float* po = out.data();
    parallel_for(Cout, 1, [&](int64_t lo, int64_t hi) {
      for (int64_t co = lo; co < hi; ++co) {
        float* oc = po + co * int64_t(Ho) * Wo;
        if (has_bias) {
          const float bv = bias.data()[co];
          for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) oc[i] = bv;
        }
        for (int ci = 0; ci < Cin; ++ci) {
          const float* xc = px + int64_t(ci) * H * W;
          const float* wc = pw + ((co * Cin + ci) * int64_t(kh)) * kw;
          for (int oh = 0; oh < Ho; ++oh) {
            for (int ow = 0; ow < Wo; ++ow) {
              float acc = 0.0f;
              for (int u = 0; u < kh; ++u) {
                const int ih = oh * stride_h - pad_h + u;
                if (ih < 0 || ih >= H) continue;
                for (int v = 0; v < kw; ++v) {
                  const int iw = ow * stride_w - pad_w + v;
                  if (iw < 0 || iw >= W) continue;
                  acc += wc[u * kw + v] * xc[ih * W + iw];
                }
              }
              oc[oh * int64_t(Wo) + ow] += acc;
            }
          }
        }
      }
    });
    return custom(out, has_bias ? std::vector<Tensor>{x, w, bias}
                                : std::vector<Tensor>{x, w},
                  [out, x, w, bias, has_bias, Cin, H, W, Cout, kh, kw, Ho, Wo,
                   stride_h, stride_w, pad_h, pad_w]() mutable {
      if (!out.has_grad()) return;
      const float* go = out.grad();
      const float* px = x.data();
      const float* pw = w.data();
      if (has_bias && bias.requires_grad()) {
        bias.ensure_grad();
        float* gb = bias.grad();
        for (int co = 0; co < Cout; ++co) {
          const float* gc = go + int64_t(co) * Ho * Wo;
          float acc = 0.0f;
          for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) acc += gc[i];
          gb[co] += acc;
        }
      }
      if (w.requires_grad()) {
        w.ensure_grad();
        float* gw = w.grad();
        parallel_for(Cout, 1, [&](int64_t lo, int64_t hi) {
          for (int64_t co = lo; co < hi; ++co) {
            const float* gc = go + co * int64_t(Ho) * Wo;
            for (int ci = 0; ci < Cin; ++ci) {
              const float* xc = px + int64_t(ci) * H * W;
              float* gwc = gw + ((co * Cin + ci) * int64_t(kh)) * kw;
              for (int u = 0; u < kh; ++u) {
                for (int v = 0; v < kw; ++v) {
                  float acc = 0.0f;
                  for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride_h - pad_h + u;
                    if (ih < 0 || ih >= H) continue;
                    for (int ow = 0; ow < Wo; ++ow) {
                      const int iw = ow * stride_w - pad_w + v;
                      if (iw < 0 || iw >= W) continue;
                      acc += gc[oh * int64_t(Wo) + ow] * xc[ih * W + iw];
                    }
                  }
                  gwc[u * kw + v] += acc;
                }
              }
            }
          }
        });
      }
      if (x.requires_grad()) {
        x.ensure_grad();
        float* gx = x.grad();
        parallel_for(Cin, 1, [&](int64_t lo, int64_t hi) {
          for (int64_t ci = lo; ci < hi; ++ci) {
            float* gxc = gx + ci * int64_t(H) * W;
            for (int co = 0; co < Cout; ++co) {
              const float* gc = go + int64_t(co) * Ho * Wo;
              const float* wc = pw + ((int64_t(co) * Cin + ci) * kh) * kw;
              for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow) {
                  const float g = gc[oh * int64_t(Wo) + ow];
                  if (g == 0.0f) continue;
                  for (int u = 0; u < kh; ++u) {
                    const int ih = oh * stride_h - pad_h + u;
                    if (ih < 0 || ih >= H) continue;
                    for (int v = 0; v < kw; ++v) {
                      const int iw = ow * stride_w - pad_w + v;
                      if (iw < 0 || iw >= W) continue;
                      gxc[ih * W + iw] += g * wc[u * kw + v];
                    }
                  }
                }
              }
            }
          }
        });
      }
    });
  }

  // ---- lookup / dropout / reductions ----

  Tensor embedding(Tensor table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw UsageError("embedding: table must be [N,D]");
    const int N = table.dim(0), D = table.dim(1);
    const int T = int(ids.size());
    if (T == 0) throw UsageError("embedding: empty id list");
    for (int id : ids)
      if (id < 0 || id >= N) throw UsageError("embedding: id out of range");
    Tensor out({T, D});
    const float* pt = table.data();
    float* po = out.data();
    for (int t = 0; t < T; ++t)
      std::memcpy(po + int64_t(t) * D, pt + int64_t(ids[size_t(t)]) * D,
                  size_t(D) * sizeof(float));
    auto keep = std::make_shared<std::vector<int>>(ids);
    return custom(out, {table}, [out, table, keep, D]() mutable {
      if (!out.has_grad() || !table.requires_grad()) return;
      table.ensure_grad();
      const float* go = out.grad();
      float* gt = table.grad();
      for (size_t t = 0; t < keep->size(); ++t) {
        float* dst = gt + int64_t((*keep)[t]) * D;
        const float* src = go + int64_t(t) * D;
        for (int d = 0; d < D; ++d) dst[d] += src[d];
      }
    });
  }

  // Inverted dropout driven by the graph's seeded rng; identity when the
  // graph is in eval mode.
  Tensor dropout(Tensor x, float p) {
    if (p < 0.0f || p >= 1.0f) throw UsageError("dropout: p must be in [0,1)");
    if (!training_ || p == 0.0f) return x;
    const int64_t n = x.numel();
    auto keep = std::make_shared<std::vector<uint8_t>>(size_t(n));
    const float inv = 1.0f / (1.0f - p);
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
      bool k = rng_.uniform() >= p;
      (*keep)[size_t(i)] = k;
      po[i] = k ? px[i] * inv : 0.0f;
    }
    return custom(out, {x}, [out, x, keep, inv]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      x.ensure_grad();
      const float* go = out.grad();
      float* gx = x.grad();
      const int64_t n = out.numel();
      for (int64_t i = 0; i < n; ++i)
        if ((*keep)[size_t(i)]) gx[i] += go[i] * inv;
    });
  }

  Tensor sum(Tensor x) {
    double acc = 0.0;
    const float* px = x.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor out = Tensor::scalar(float(acc));
    return custom(out, {x}, [out, x]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      x.ensure_grad();
      const float g = out.grad()[0];
      float* gx = x.grad();
      const int64_t n = x.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }

  Tensor mean(Tensor x) {
    return scale(sum(x), 1.0f / float(x.numel()));
  }

  // Mean negative log-likelihood over masked rows: logp [T,N], one target
  // per row, rows with mask==0 contribute nothing (and get no gradient).
  Tensor masked_nll(Tensor logp, const std::vector<int>& targets,
                    const std::vector<uint8_t>& mask) {
    if (logp.rank() != 2) throw UsageError("masked_nll: logp must be [T,N]");
    const int T = logp.dim(0), N = logp.dim(1);
    if (int(targets.size()) != T || int(mask.size()) != T)
      throw UsageError("masked_nll: targets/mask length mismatch");
    int64_t count = 0;
    double acc = 0.0;
    const float* pl = logp.data();
    for (int t = 0; t < T; ++t) {
      if (!mask[size_t(t)]) continue;
      const int y = targets[size_t(t)];
      if (y < 0 || y >= N) throw UsageError("masked_nll: target out of range");
      acc -= pl[int64_t(t) * N + y];
      ++count;
    }
    if (count == 0) throw UsageError("masked_nll: empty mask");
    Tensor out = Tensor::scalar(float(acc / double(count)));
    auto tg = std::make_shared<std::vector<int>>(targets);
    auto mk = std::make_shared<std::vector<uint8_t>>(mask);
    return custom(out, {logp}, [out, logp, tg, mk, T, N, count]() mutable {
      if (!out.has_grad() || !logp.requires_grad()) return;
      logp.ensure_grad();
      const float g = out.grad()[0] / float(count);
      float* gl = logp.grad();
      for (int t = 0; t < T; ++t)
        if ((*mk)[size_t(t)]) gl[int64_t(t) * N + (*tg)[size_t(t)]] -= g;
    });
  }

 private:
  static void permute_copy(const float* src, const std::vector<int>& sshape,
                           float* dst, int d0, int d1, bool accumulate) {
    const int r = int(sshape.size());
    std::array<int64_t, 4> sdim{1, 1, 1, 1}, sstr{0, 0, 0, 0};
    for (int i = 0; i < r; ++i) sdim[size_t(i)] = sshape[size_t(i)];
    int64_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
      sstr[size_t(i)] = acc;
      acc *= sdim[size_t(i)];
    }
    std::array<int, 4> perm{0, 1, 2, 3};
    std::swap(perm[size_t(d0)], perm[size_t(d1)]);
    std::array<int64_t, 4> odim{1, 1, 1, 1};
    for (int i = 0; i < r; ++i) odim[size_t(i)] = sdim[size_t(perm[size_t(i)])];
    int64_t idx = 0;
    for (int64_t i0 = 0; i0 < odim[0]; ++i0)
      for (int64_t i1 = 0; i1 < odim[1]; ++i1)
        for (int64_t i2 = 0; i2 < odim[2]; ++i2)
          for (int64_t i3 = 0; i3 < odim[3]; ++i3) {
            std::array<int64_t, 4> oidx{i0, i1, i2, i3};
            int64_t s = 0;
            for (int i = 0; i < r; ++i)
              s += oidx[size_t(i)] * sstr[size_t(perm[size_t(i)])];
            if (accumulate)
              dst[s] += src[idx++];
            else
              dst[idx++] = src[s];
          }
  }

  Tensor softmax_impl(Tensor x, bool log) {
    const int D = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / D;
    Tensor out(x.shape());
    const float* px = x.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
      const float* xr = px + r * D;
      float* orow = po + r * D;
      float m = xr[0];
      for (int d = 1; d < D; ++d) m = std::max(m, xr[d]);
      double s = 0.0;
      for (int d = 0; d < D; ++d) s += std::exp(double(xr[d]) - double(m));
      if (log) {
        const double ls = std::log(s);
        for (int d = 0; d < D; ++d)
          orow[d] = float(double(xr[d]) - double(m) - ls);
      } else {
        const double inv = 1.0 / s;
        for (int d = 0; d < D; ++d)
          orow[d] = float(std::exp(double(xr[d]) - double(m)) * inv);
      }
    }
    return custom(out, {x}, [out, x, rows, D, log]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      x.ensure_grad();
      const float* go = out.grad();
      const float* po = out.data();
      float* gx = x.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const float* grow = go + r * D;
        const float* orow = po + r * D;
        float* gxr = gx + r * D;
        if (log) {
          double gsum = 0.0;
          for (int d = 0; d < D; ++d) gsum += grow[d];
          for (int d = 0; d < D; ++d)
            gxr[d] += float(double(grow[d]) -
                            std::exp(double(orow[d])) * gsum);
        } else {
          double dot = 0.0;
          for (int d = 0; d < D; ++d) dot += double(grow[d]) * orow[d];
          for (int d = 0; d < D; ++d)
            gxr[d] += float(double(orow[d]) * (double(grow[d]) - dot));
        }
      }
    });
  }

  struct Node {
    Tensor out;
    std::function<void()> back;
  };

  bool training_;
  Rng rng_;
  std::vector<Node> tape_;
};

// Central-difference gradient checker. Returns the max over sampled
// coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
// Coordinates where both magnitudes fall below `noise_floor` are skipped:
// there the f32 finite difference itself is dominated by rounding and the
// comparison is meaningless.
struct GradCheckConfig {
  double h = 1e-3;
  int max_coords_per_param = 24;
  double noise_floor = 0.0;
  uint64_t seed = 0x243f6a8885a308d3ull;
};

inline double check_gradients(const std::function<Tensor(Graph&)>& build,
                              const std::vector<Tensor>& params,
                              GradCheckConfig cfg = {}) {
  for (const auto& p : params)
    if (!p.requires_grad())
      throw UsageError("check_gradients: param without requires_grad");
  for (const auto& p : params) const_cast<Tensor&>(p).clear_grad();
  std::vector<std::vector<float>> saved_grads;
  {
    Graph g(false);
    Tensor loss = build(g);
    g.backward(loss);
  }
  for (const auto& p : params) {
    Tensor& t = const_cast<Tensor&>(p);
    t.ensure_grad();
    saved_grads.emplace_back(t.grad(), t.grad() + t.numel());
    t.clear_grad();
  }
  Rng rng(cfg.seed);
  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& t = const_cast<Tensor&>(params[pi]);
    const int64_t n = t.numel();
    std::vector<int64_t> coords;
    if (n <= cfg.max_coords_per_param) {
      coords.resize(size_t(n));
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      for (int i = 0; i < cfg.max_coords_per_param; ++i)
        coords.push_back(int64_t(rng.next_u64() % uint64_t(n)));
    }
    for (int64_t c : coords) {
      const float orig = t.data()[c];
      t.data()[c] = orig + float(cfg.h);
      double lp;
      {
        Graph g(false);
        lp = double(build(g).value());
      }
      t.data()[c] = orig - float(cfg.h);
      double lm;
      {
        Graph g(false);
        lm = double(build(g).value());
      }
      t.data()[c] = orig;
      const double numeric = (lp - lm) / (2.0 * cfg.h);
      const double analytic = double(saved_grads[pi][size_t(c)]);
      if (std::abs(analytic) + std::abs(numeric) < cfg.noise_floor) continue;
      const double rel = std::abs(analytic - numeric) /
                         (std::abs(analytic) + std::abs(numeric) + 1e-8);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace cfsr

#endif  // CFSR_TENSOR_HPP
