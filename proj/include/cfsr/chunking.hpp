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

#ifndef CFSR_CHUNKING_HPP
#define CFSR_CHUNKING_HPP

#include <algorithm>
#include <limits>
#include <string>

#include "cfsr/common.hpp"

namespace cfsr {

// Milliseconds of audio represented by one encoder frame: 10 ms feature hop
// times the 4x subsampling factor.
inline constexpr double kEncoderFrameMs = 40.0;

// A context regime. Either unrestricted attention, or chunked attention
// with a left-context budget measured in chunks.
struct ChunkPolicy {
  enum class Mode { FullContext, Chunked };
  enum class Left { Full, Chunks };

  Mode mode = Mode::FullContext;
  int chunk_size = 0;    // encoder frames, Chunked only
  Left left = Left::Full;
  int left_chunks = 0;   // valid when left == Chunks

  static ChunkPolicy full_context() { return ChunkPolicy{}; }

  static ChunkPolicy chunked(int chunk, int left_chunks) {
    if (chunk < 1) throw UsageError("ChunkPolicy: chunk_size must be >= 1");
    if (left_chunks < 0) throw UsageError("ChunkPolicy: left_chunks must be >= 0");
    ChunkPolicy p;
    p.mode = Mode::Chunked;
    p.chunk_size = chunk;
    p.left = Left::Chunks;
    p.left_chunks = left_chunks;
    return p;
  }

  static ChunkPolicy chunked_full_left(int chunk) {
    if (chunk < 1) throw UsageError("ChunkPolicy: chunk_size must be >= 1");
    ChunkPolicy p;
    p.mode = Mode::Chunked;
    p.chunk_size = chunk;
    p.left = Left::Full;
    return p;
  }

  bool is_full_context() const { return mode == Mode::FullContext; }

  std::string describe() const {
    if (is_full_context()) return "full";
    std::string s = "chunk=" + std::to_string(chunk_size) + ",left=";
    s += left == Left::Full ? "full" : std::to_string(left_chunks);
    return s;
  }
};

// Mixed training schedule.
struct ScheduleConfig {
  double p_full = 0.40;
  int chunk_lo = 8, chunk_hi = 32;
  double p_limited_left = 0.75;
  int left_lo = 2, left_hi = 32;

  void validate() const {
    if (p_full < 0.0 || p_full > 1.0 || p_limited_left < 0.0 ||
        p_limited_left > 1.0)
      throw UsageError("ScheduleConfig: probabilities must be in [0,1]");
    if (chunk_lo < 1 || chunk_lo > chunk_hi || left_lo < 0 ||
        left_lo > left_hi)
      throw UsageError("ScheduleConfig: empty range");
  }
};

enum class TrainPhase { Pretrain, Finetune };

// One policy per batch. The pre-training schedule mixes full-context
// batches in with probability p_full; fine-tuning chunks every batch.
inline ChunkPolicy sample_policy(Rng& rng, const ScheduleConfig& sc,
                                 TrainPhase phase) {
  sc.validate();
  if (phase == TrainPhase::Pretrain && rng.bernoulli(sc.p_full))
    return ChunkPolicy::full_context();
  const int chunk = rng.uniform_int(sc.chunk_lo, sc.chunk_hi);
  if (rng.bernoulli(sc.p_limited_left))
    return ChunkPolicy::chunked(chunk, rng.uniform_int(sc.left_lo, sc.left_hi));
  return ChunkPolicy::chunked_full_left(chunk);
}

// allowed[i][j]: may query frame i attend to key frame j.
inline ByteMask attention_mask(int T, const ChunkPolicy& policy) {
  if (T < 1) throw UsageError("attention_mask: T must be >= 1");
  if (policy.is_full_context()) return ByteMask::all_true(T, T);
  const int C = policy.chunk_size;
  ByteMask mask(T, T, false);
  for (int i = 0; i < T; ++i) {
    const int ci = i / C;
    const int lo_chunk =
        policy.left == ChunkPolicy::Left::Full ? 0 : std::max(0, ci - policy.left_chunks);
    const int j_lo = lo_chunk * C;
    const int j_hi = std::min(T, (ci + 1) * C);
    for (int j = j_lo; j < j_hi; ++j) mask.at(i, j) = 1;
  }
  return mask;
}

// How convolution taps may reach across chunk boundaries.
enum class ConvContextMode {
  WithinChunk,  // taps restricted to the output frame's own chunk
  CausalPast,   // past taps may cross chunk boundaries; future taps may not
};

// Tap validity per output frame: [T, K]. Invalid taps contribute zero.
// The left-context budget never relaxes convolution.
inline ByteMask conv_validity(int T, const ChunkPolicy& policy, int K,
                              ConvContextMode conv_mode = ConvContextMode::WithinChunk) {
  if (T < 1) throw UsageError("conv_validity: T must be >= 1");
  if (K % 2 == 0) throw UsageError("conv_validity: kernel size must be odd");
  const int c = K / 2;
  ByteMask taps(T, K, false);
  for (int i = 0; i < T; ++i) {
    for (int k = 0; k < K; ++k) {
      const int j = i + k - c;
      if (j < 0 || j >= T) continue;
      bool ok = false;
      if (policy.is_full_context()) {
        ok = true;
      } else {
        const int C = policy.chunk_size;
        ok = conv_mode == ConvContextMode::WithinChunk ? (j / C == i / C)
                                                       : (j / C <= i / C);
      }
      if (ok) taps.at(i, k) = 1;
    }
  }
  return taps;
}

// Algorithmic latency: a frame's result is available once its chunk
// completes. Full context has no finite latency.
inline double latency_ms(const ChunkPolicy& policy,
                         double frame_ms = kEncoderFrameMs) {
  if (policy.is_full_context())
    return std::numeric_limits<double>::infinity();
  return policy.chunk_size * frame_ms;
}

}  // namespace cfsr

#endif  // CFSR_CHUNKING_HPP
