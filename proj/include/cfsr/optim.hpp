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

#ifndef CFSR_OPTIM_HPP
#define CFSR_OPTIM_HPP

#include <vector>

#include "cfsr/tensor.hpp"

namespace cfsr {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay Adam. Parameter groups allow distinct learning
// rates (encoder vs probe during fine-tuning).
class AdamW {
 public:
  void add_group(std::vector<Tensor> params, AdamWOptions opt) {
    Group g;
    g.opt = opt;
    for (auto& p : params) {
      g.m.emplace_back(size_t(p.numel()), 0.0f);
      g.v.emplace_back(size_t(p.numel()), 0.0f);
    }
    g.params = std::move(params);
    groups_.push_back(std::move(g));
  }

  void step() {
    ++t_;
    for (auto& g : groups_) {
      const double bc1 = 1.0 - std::pow(g.opt.beta1, double(t_));
      const double bc2 = 1.0 - std::pow(g.opt.beta2, double(t_));
      for (size_t i = 0; i < g.params.size(); ++i) {
        Tensor& p = g.params[i];
        p.ensure_grad();
        float* w = p.data();
        const float* gr = p.grad();
        float* m = g.m[i].data();
        float* v = g.v[i].data();
        const int64_t n = p.numel();
        for (int64_t j = 0; j < n; ++j) {
          const double gj = double(gr[j]);
          m[j] = float(g.opt.beta1 * m[j] + (1.0 - g.opt.beta1) * gj);
          v[j] = float(g.opt.beta2 * v[j] + (1.0 - g.opt.beta2) * gj * gj);
          const double mhat = double(m[j]) / bc1;
          const double vhat = double(v[j]) / bc2;
          w[j] -= float(g.opt.lr * (mhat / (std::sqrt(vhat) + g.opt.eps) +
                                    g.opt.weight_decay * double(w[j])));
        }
      }
    }
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  int64_t step_count() const { return t_; }

 private:
  struct Group {
    std::vector<Tensor> params;
    AdamWOptions opt;
    std::vector<std::vector<float>> m, v;
  };
  std::vector<Group> groups_;
  int64_t t_ = 0;
};

}  // namespace cfsr

#endif  // CFSR_OPTIM_HPP
