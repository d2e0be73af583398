/*
 * Copyright 2026 The MetaDrug Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace metadrug {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Error taxonomy maps onto CLI exit codes: config/schema -> 2, data -> 3,
// numeric/runtime -> 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  // log(1 + e^x) without overflow for large |x|.
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

/// Deterministic RNG. All sampling goes through explicit formulas so that
/// streams are reproducible across standard libraries (std::*_distribution
/// is implementation-defined and must not be used anywhere in this project).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive range. Modulo bias is irrelevant for the small ranges used here.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(gen_() % span);
  }

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in draw order.
  std::vector<int> sample_indices(int n, int k) {
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      const int j = uniform_int(i, n - 1);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      out.push_back(pool[static_cast<std::size_t>(i)]);
    }
    return out;
  }

 private:
  std::mt19937_64 gen_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

/// Flat view over one named parameter array. Eigen matrices are dense and
/// column-major, so (data, rows, cols) is enough for serialization and for
/// element-wise parameter arithmetic.
struct ParamView {
  std::string name;
  double* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
};

inline Eigen::Index total_size(const std::vector<ParamView>& views) {
  Eigen::Index n = 0;
  for (const auto& v : views) n += v.size();
  return n;
}

// dst += a * src, matched view-by-view.
inline void axpy_params(const std::vector<ParamView>& dst, double a,
                        const std::vector<ParamView>& src) {
  if (dst.size() != src.size()) throw NumericError("parameter view mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].size() != src[i].size()) throw NumericError("parameter shape mismatch");
    for (Eigen::Index j = 0; j < dst[i].size(); ++j) dst[i].data[j] += a * src[i].data[j];
  }
}

inline void copy_params(const std::vector<ParamView>& dst,
                        const std::vector<ParamView>& src) {
  if (dst.size() != src.size()) throw NumericError("parameter view mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].size() != src[i].size()) throw NumericError("parameter shape mismatch");
    for (Eigen::Index j = 0; j < dst[i].size(); ++j) dst[i].data[j] = src[i].data[j];
  }
}

inline void zero_params(const std::vector<ParamView>& views) {
  for (const auto& v : views)
    for (Eigen::Index j = 0; j < v.size(); ++j) v.data[j] = 0.0;
}

inline Vec flatten_params(const std::vector<ParamView>& views) {
  Vec out(total_size(views));
  Eigen::Index at = 0;
  for (const auto& v : views)
    for (Eigen::Index j = 0; j < v.size(); ++j) out[at++] = v.data[j];
  return out;
}

inline void unflatten_params(const std::vector<ParamView>& views, const Vec& flat) {
  if (flat.size() != total_size(views)) throw NumericError("flat size mismatch");
  Eigen::Index at = 0;
  for (const auto& v : views)
    for (Eigen::Index j = 0; j < v.size(); ++j) v.data[j] = flat[at++];
}

/// Flat Adam state over a parameter view set; the view layout must not change
/// between steps.
struct AdamState {
  Vec m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int t = 0;

  explicit AdamState(Eigen::Index n) : m(Vec::Zero(n)), v(Vec::Zero(n)) {}

  void step(const std::vector<ParamView>& params, const std::vector<ParamView>& grads,
            double lr) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (Eigen::Index j = 0; j < params[i].size(); ++j, ++at) {
        const double g = grads[i].data[j];
        m[at] = beta1 * m[at] + (1.0 - beta1) * g;
        v[at] = beta2 * v[at] + (1.0 - beta2) * g * g;
        params[i].data[j] -= lr * (m[at] / c1) / (std::sqrt(v[at] / c2) + eps);
      }
    }
  }
};

/// Nearest-rank index into a sorted ascending sequence of n values:
/// rank = ceil(p/100 * n), clamped to [1, n], returned 0-based.
inline std::size_t nearest_rank_index(std::size_t n, double percentile) {
  if (n == 0) throw DataError("percentile of empty sequence");
  double rank = std::ceil(percentile * static_cast<double>(n) / 100.0);
  if (rank < 1.0) rank = 1.0;
  if (rank > static_cast<double>(n)) rank = static_cast<double>(n);
  return static_cast<std::size_t>(rank) - 1;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<std::uint64_t>(p[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

}  // namespace metadrug
