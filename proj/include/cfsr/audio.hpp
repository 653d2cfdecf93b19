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

#ifndef CFSR_AUDIO_HPP
#define CFSR_AUDIO_HPP

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cfsr/common.hpp"

namespace cfsr {

struct AudioBuffer {
  std::vector<float> samples;  // in [-1, 1]
  int sample_rate = 16000;
};

// 16 kHz mono, PCM16 or IEEE float32. Anything else is a format error;
// there is no silent resampling.
inline AudioBuffer load_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("load_wav: cannot open " + path);
  auto read_bytes = [&](void* dst, size_t n) {
    f.read(reinterpret_cast<char*>(dst), std::streamsize(n));
    if (size_t(f.gcount()) != n)
      throw DataError("load_wav: truncated file " + path);
  };
  auto read_u32 = [&]() {
    uint8_t b[4];
    read_bytes(b, 4);
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
           uint32_t(b[3]) << 24;
  };
  auto read_u16 = [&]() {
    uint8_t b[2];
    read_bytes(b, 2);
    return uint16_t(b[0] | b[1] << 8);
  };
  char tag[4];
  read_bytes(tag, 4);
  if (std::memcmp(tag, "RIFF", 4) != 0)
    throw DataError("load_wav: not a RIFF file: " + path);
  read_u32();  // riff size
  read_bytes(tag, 4);
  if (std::memcmp(tag, "WAVE", 4) != 0)
    throw DataError("load_wav: not a WAVE file: " + path);

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  AudioBuffer out;
  while (f.peek() != EOF) {
    read_bytes(tag, 4);
    uint32_t size = read_u32();
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (size < 16) throw DataError("load_wav: malformed fmt chunk");
      format = read_u16();
      channels = read_u16();
      rate = read_u32();
      read_u32();  // byte rate
      read_u16();  // block align
      bits = read_u16();
      if (size > 16) f.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw DataError("load_wav: data chunk before fmt");
      if (channels != 1)
        throw DataError("load_wav: expected mono, got " +
                        std::to_string(channels) + " channels");
      if (rate != 16000)
        throw DataError("load_wav: expected 16000 Hz, got " +
                        std::to_string(rate));
      if (format == 1 && bits == 16) {
        size_t n = size / 2;
        std::vector<uint8_t> raw(size);
        read_bytes(raw.data(), size);
        out.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
          int16_t s = int16_t(uint16_t(raw[2 * i]) | uint16_t(raw[2 * i + 1]) << 8);
          out.samples[i] = float(s) / 32768.0f;
        }
      } else if (format == 3 && bits == 32) {
        size_t n = size / 4;
        std::vector<uint8_t> raw(size);
        read_bytes(raw.data(), size);
        out.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
          uint32_t u = uint32_t(raw[4 * i]) | uint32_t(raw[4 * i + 1]) << 8 |
                       uint32_t(raw[4 * i + 2]) << 16 |
                       uint32_t(raw[4 * i + 3]) << 24;
          float v;
          std::memcpy(&v, &u, 4);
          out.samples[i] = v;
        }
      } else {
        throw DataError("load_wav: unsupported encoding (format " +
                        std::to_string(format) + ", " + std::to_string(bits) +
                        " bits); need PCM16 or float32");
      }
      out.sample_rate = int(rate);
      return out;
    } else {
      f.seekg(size + (size & 1), std::ios::cur);
      if (!f) throw DataError("load_wav: truncated chunk in " + path);
    }
  }
  throw DataError("load_wav: no data chunk in " + path);
}

inline void save_wav_pcm16(const std::string& path,
                           const std::vector<float>& samples,
                           int sample_rate = 16000) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("save_wav: cannot open " + path + " for writing");
  auto w32 = [&](uint32_t v) {
    uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16),
                    uint8_t(v >> 24)};
    f.write(reinterpret_cast<char*>(b), 4);
  };
  auto w16 = [&](uint16_t v) {
    uint8_t b[2] = {uint8_t(v), uint8_t(v >> 8)};
    f.write(reinterpret_cast<char*>(b), 2);
  };
  const uint32_t data_size = uint32_t(samples.size() * 2);
  f.write("RIFF", 4);
  w32(36 + data_size);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  w32(16);
  w16(1);  // PCM
  w16(1);  // mono
  w32(uint32_t(sample_rate));
  w32(uint32_t(sample_rate * 2));
  w16(2);
  w16(16);
  f.write("data", 4);
  w32(data_size);
  for (float v : samples) {
    float c = v < -1.0f ? -1.0f : (v > 1.0f ? 1.0f : v);
    int16_t s = int16_t(std::lround(c * 32767.0f));
    w16(uint16_t(s));
  }
}

// Time-major log-mel features; the common currency between the frontend,
// masking, and the encoder.
struct FeatureSequence {
  int frames = 0;
  int dim = 0;
  std::vector<float> data;  // frames x dim, row-major
  float frame_hop_ms = 10.0f;
  float frame_window_ms = 25.0f;
  bool normalized = false;

  float* row(int t) { return data.data() + size_t(t) * dim; }
  const float* row(int t) const { return data.data() + size_t(t) * dim; }
  float& at(int t, int d) { return data[size_t(t) * dim + d]; }
  float at(int t, int d) const { return data[size_t(t) * dim + d]; }
};

struct MelConfig {
  int n_mels = 80;
  int window = 400;  // 25 ms at 16 kHz
  int hop = 160;     // 10 ms
  int nfft = 512;
  float fmin = 0.0f;
  float fmax = 8000.0f;
  float log_floor = 1e-10f;
  int sample_rate = 16000;
};

inline double hz_to_mel(double hz) {
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}
inline double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

// Hann window, 512-pt FFT, power spectrum, triangular mel filters with
// mel-spaced corners, natural log with floor.
class MelExtractor {
 public:
  explicit MelExtractor(MelConfig cfg = {}) : cfg_(cfg) {
    if ((cfg_.nfft & (cfg_.nfft - 1)) != 0)
      throw UsageError("MelExtractor: nfft must be a power of two");
    window_.resize(size_t(cfg_.window));
    for (int i = 0; i < cfg_.window; ++i)
      window_[size_t(i)] = 0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 *
                                                double(i) / double(cfg_.window - 1));
    // bit-reversal permutation
    const int n = cfg_.nfft;
    bitrev_.resize(size_t(n));
    int bits = 0;
    while ((1 << bits) < n) ++bits;
    for (int i = 0; i < n; ++i) {
      int r = 0;
      for (int b = 0; b < bits; ++b)
        if (i & (1 << b)) r |= 1 << (bits - 1 - b);
      bitrev_[size_t(i)] = r;
    }
    // triangular filters; weight computed in the mel domain
    const int nbins = cfg_.nfft / 2 + 1;
    const double mel_lo = hz_to_mel(cfg_.fmin);
    const double mel_hi = hz_to_mel(cfg_.fmax);
    const double delta = (mel_hi - mel_lo) / double(cfg_.n_mels + 1);
    filters_.resize(size_t(cfg_.n_mels));
    for (int m = 0; m < cfg_.n_mels; ++m) {
      const double left = mel_lo + m * delta;
      const double center = left + delta;
      const double right = center + delta;
      Filter& flt = filters_[size_t(m)];
      flt.first_bin = -1;
      for (int k = 0; k < nbins; ++k) {
        const double mel_k =
            hz_to_mel(double(k) * cfg_.sample_rate / cfg_.nfft);
        double w = 0.0;
        if (mel_k > left && mel_k < right)
          w = mel_k <= center ? (mel_k - left) / delta
                              : (right - mel_k) / delta;
        if (w > 0.0) {
          if (flt.first_bin < 0) flt.first_bin = k;
          flt.weights.push_back(w);
        } else if (flt.first_bin >= 0) {
          break;
        }
      }
      if (flt.first_bin < 0) flt.first_bin = 0;
    }
  }

  const MelConfig& config() const { return cfg_; }

  int frame_count(int64_t n_samples) const {
    if (n_samples < cfg_.window) return 0;
    return int((n_samples - cfg_.window) / cfg_.hop) + 1;
  }

  // One frame from `window` samples starting at sample_offset.
  void extract_frame(const float* samples, float* out) const {
    const int n = cfg_.nfft;
    std::vector<double> re(size_t(n), 0.0), im(size_t(n), 0.0);
    for (int i = 0; i < cfg_.window; ++i)
      re[size_t(bitrev_[size_t(i)])] = double(samples[i]) * window_[size_t(i)];
    // also permute the zero-padded tail (zeros stay zeros, nothing to do)
    fft_inplace(re.data(), im.data(), n);
    const int nbins = n / 2 + 1;
    std::vector<double> power(size_t(nbins));
    for (int k = 0; k < nbins; ++k)
      power[size_t(k)] = re[size_t(k)] * re[size_t(k)] +
                         im[size_t(k)] * im[size_t(k)];
    for (int m = 0; m < cfg_.n_mels; ++m) {
      const Filter& flt = filters_[size_t(m)];
      double acc = 0.0;
      for (size_t j = 0; j < flt.weights.size(); ++j)
        acc += flt.weights[j] * power[size_t(flt.first_bin) + j];
      if (acc < double(cfg_.log_floor)) acc = double(cfg_.log_floor);
      out[m] = float(std::log(acc));
    }
  }

  FeatureSequence extract(const AudioBuffer& audio) const {
    if (audio.sample_rate != cfg_.sample_rate)
      throw DataError("log_mel: sample rate mismatch");
    const int T = frame_count(int64_t(audio.samples.size()));
    if (T <= 0)
      throw DataError("log_mel: audio shorter than one analysis window");
    FeatureSequence fs;
    fs.frames = T;
    fs.dim = cfg_.n_mels;
    fs.data.resize(size_t(T) * size_t(cfg_.n_mels));
    for (int t = 0; t < T; ++t)
      extract_frame(audio.samples.data() + int64_t(t) * cfg_.hop, fs.row(t));
    return fs;
  }

 private:
  struct Filter {
    int first_bin = 0;
    std::vector<double> weights;
  };

  static void fft_inplace(double* re, double* im, int n) {
    for (int len = 2; len <= n; len <<= 1) {
      const double ang = -2.0 * 3.14159265358979323846 / double(len);
      const double wr = std::cos(ang), wi = std::sin(ang);
      for (int i = 0; i < n; i += len) {
        double cr = 1.0, ci = 0.0;
        for (int j = 0; j < len / 2; ++j) {
          const int a = i + j, b = i + j + len / 2;
          const double tr = re[b] * cr - im[b] * ci;
          const double ti = re[b] * ci + im[b] * cr;
          re[b] = re[a] - tr;
          im[b] = im[a] - ti;
          re[a] += tr;
          im[a] += ti;
          const double ncr = cr * wr - ci * wi;
          ci = cr * wi + ci * wr;
          cr = ncr;
        }
      }
    }
  }

  MelConfig cfg_;
  std::vector<double> window_;
  std::vector<int> bitrev_;
  std::vector<Filter> filters_;
};

// Per-dimension statistics used for utterance normalization. inv_std is
// stored so offline and streaming paths share the exact same arithmetic.
struct CmvnStats {
  std::vector<float> mean;
  std::vector<float> inv_std;
};

inline CmvnStats compute_cmvn_stats(const FeatureSequence& fs) {
  if (fs.frames < 2) throw DataError("cmvn: need at least 2 frames");
  CmvnStats st;
  st.mean.resize(size_t(fs.dim));
  st.inv_std.resize(size_t(fs.dim));
  for (int d = 0; d < fs.dim; ++d) {
    double m = 0.0;
    for (int t = 0; t < fs.frames; ++t) m += fs.at(t, d);
    m /= fs.frames;
    double var = 0.0;
    for (int t = 0; t < fs.frames; ++t) {
      const double c = fs.at(t, d) - m;
      var += c * c;
    }
    var /= fs.frames;
    if (var < 1e-8) var = 1e-8;
    st.mean[size_t(d)] = float(m);
    st.inv_std[size_t(d)] = float(1.0 / std::sqrt(var));
  }
  return st;
}

inline void normalize_row(const float* in, float* out, int dim,
                          const CmvnStats& st) {
  for (int d = 0; d < dim; ++d)
    out[d] = (in[d] - st.mean[size_t(d)]) * st.inv_std[size_t(d)];
}

inline FeatureSequence apply_cmvn(const FeatureSequence& fs,
                                  const CmvnStats& st) {
  FeatureSequence out = fs;
  for (int t = 0; t < fs.frames; ++t)
    normalize_row(fs.row(t), out.row(t), fs.dim, st);
  out.normalized = true;
  return out;
}

inline FeatureSequence cmvn(const FeatureSequence& fs) {
  return apply_cmvn(fs, compute_cmvn_stats(fs));
}

// Test-fixture dump format: u32 T, u32 D, then T*D little-endian f32.
inline void write_feature_dump(const std::string& path,
                               const FeatureSequence& fs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_feature_dump: cannot open " + path);
  const uint32_t t = uint32_t(fs.frames), d = uint32_t(fs.dim);
  uint8_t hdr[8] = {uint8_t(t),       uint8_t(t >> 8), uint8_t(t >> 16),
                    uint8_t(t >> 24), uint8_t(d),      uint8_t(d >> 8),
                    uint8_t(d >> 16), uint8_t(d >> 24)};
  f.write(reinterpret_cast<char*>(hdr), 8);
  f.write(reinterpret_cast<const char*>(fs.data.data()),
          std::streamsize(fs.data.size() * 4));
}

inline FeatureSequence read_feature_dump(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_feature_dump: cannot open " + path);
  uint8_t hdr[8];
  f.read(reinterpret_cast<char*>(hdr), 8);
  if (f.gcount() != 8) throw DataError("read_feature_dump: truncated header");
  const uint32_t t = uint32_t(hdr[0]) | uint32_t(hdr[1]) << 8 |
                     uint32_t(hdr[2]) << 16 | uint32_t(hdr[3]) << 24;
  const uint32_t d = uint32_t(hdr[4]) | uint32_t(hdr[5]) << 8 |
                     uint32_t(hdr[6]) << 16 | uint32_t(hdr[7]) << 24;
  FeatureSequence fs;
  fs.frames = int(t);
  fs.dim = int(d);
  fs.data.resize(size_t(t) * size_t(d));
  f.read(reinterpret_cast<char*>(fs.data.data()),
         std::streamsize(fs.data.size() * 4));
  if (size_t(f.gcount()) != fs.data.size() * 4)
    throw DataError("read_feature_dump: truncated payload");
  return fs;
}

}  // namespace cfsr

#endif  // CFSR_AUDIO_HPP
