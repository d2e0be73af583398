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

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "metadrug/common.hpp"

namespace metadrug {

// One standard encoder block: single-head scaled dot-product attention with
// residual + layer norm, followed by a two-layer position-wise feed-forward
// sublayer with residual + layer norm. Row-vector convention throughout
// (inputs are n x d, one token per row). No positional encodings, so the
// block is permutation-equivariant over rows.
//
// Masked (false) positions neither attend nor are attended to, and their
// output rows are forced to zero; unmasked outputs are unaffected by the
// content of masked rows.

constexpr double kLayerNormEps = 1e-5;

struct AttentionBlockParams {
  Mat wq, wk, wv, wo;        // d x d
  Mat ff1;                   // d x f
  Vec ffb1;                  // f
  Mat ff2;                   // f x d
  Vec ffb2;                  // d
  Vec ln1_gain, ln1_bias;    // d
  Vec ln2_gain, ln2_bias;    // d

  int dim() const { return static_cast<int>(wq.rows()); }
  int ffn_dim() const { return static_cast<int>(ff1.cols()); }

  static AttentionBlockParams zeros(int d, int f = -1) {
    if (f < 0) f = 2 * d;
    AttentionBlockParams p;
    p.wq = Mat::Zero(d, d);
    p.wk = Mat::Zero(d, d);
    p.wv = Mat::Zero(d, d);
    p.wo = Mat::Zero(d, d);
    p.ff1 = Mat::Zero(d, f);
    p.ffb1 = Vec::Zero(f);
    p.ff2 = Mat::Zero(f, d);
    p.ffb2 = Vec::Zero(d);
    p.ln1_gain = Vec::Zero(d);
    p.ln1_bias = Vec::Zero(d);
    p.ln2_gain = Vec::Zero(d);
    p.ln2_bias = Vec::Zero(d);
    return p;
  }

  static AttentionBlockParams init(int d, Rng& rng, int f = -1) {
    AttentionBlockParams p = zeros(d, f);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (Mat* m : {&p.wq, &p.wk, &p.wv, &p.wo, &p.ff1, &p.ff2}) {
      for (Eigen::Index i = 0; i < m->size(); ++i)
        m->data()[i] = rng.uniform(-bound, bound);
    }
    p.ln1_gain.setOnes();
    p.ln2_gain.setOnes();
    return p;
  }

  void views(const std::string& prefix, std::vector<ParamView>& out) {
    auto add = [&](const char* name, Mat& m) {
      out.push_back({prefix + name, m.data(), m.rows(), m.cols()});
    };
    auto addv = [&](const char* name, Vec& v) {
      out.push_back({prefix + name, v.data(), v.rows(), 1});
    };
    add("wq", wq);
    add("wk", wk);
    add("wv", wv);
    add("wo", wo);
    add("ff1", ff1);
    addv("ffb1", ffb1);
    add("ff2", ff2);
    addv("ffb2", ffb2);
    addv("ln1_gain", ln1_gain);
    addv("ln1_bias", ln1_bias);
    addv("ln2_gain", ln2_gain);
    addv("ln2_bias", ln2_bias);
  }
};

struct AttentionCache {
  Mat x;                       // input, n x d
  std::vector<std::uint8_t> mask;
  int n_real = 0;
  Mat q, k, v;                 // n x d
  Mat probs;                   // n x n, zero at masked rows/keys
  Mat attn;                    // probs * v, n x d
  Mat r1, x1_hat, x1;          // residual 1, normalized, post-LN1
  Vec inv_std1;                // per-row
  Mat ff_hidden;               // relu(x1*ff1 + b1), n x f
  Mat r2, x2_hat;              // residual 2, normalized
  Vec inv_std2;
  Mat out;                     // n x d, masked rows zeroed
};

namespace detail {

// Row-wise layer norm. Returns post-norm matrix; fills x_hat and inv_std.
inline Mat layer_norm(const Mat& x, const Vec& gain, const Vec& bias, Mat& x_hat,
                      Vec& inv_std) {
  const Eigen::Index n = x.rows(), d = x.cols();
  x_hat.resize(n, d);
  inv_std.resize(n);
  Mat y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = inv;
    x_hat.row(i) = (x.row(i).array() - mu) * inv;
    y.row(i) = x_hat.row(i).array() * gain.transpose().array() +
               bias.transpose().array();
  }
  return y;
}

// Backward through layer norm; accumulates gain/bias grads, returns dx.
inline Mat layer_norm_backward(const Mat& dy, const Mat& x_hat, const Vec& inv_std,
                               const Vec& gain, Vec& d_gain, Vec& d_bias) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  Mat dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    d_gain.array() += dy.row(i).transpose().array() * x_hat.row(i).transpose().array();
    d_bias += dy.row(i).transpose();
    const Eigen::ArrayXd dxhat = dy.row(i).transpose().array() * gain.array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat * x_hat.row(i).transpose().array()).mean();
    dx.row(i) =
        (inv_std[i] * (dxhat - m1 - x_hat.row(i).transpose().array() * m2)).transpose();
  }
  return dx;
}

}  // namespace detail

/// Forward pass of one encoder block. `mask[i]` marks row i as a real token;
/// at least one entry must be true.
inline Mat attention_block(const Mat& x, const AttentionBlockParams& p,
                           const std::vector<std::uint8_t>& mask,
                           AttentionCache* cache = nullptr) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (static_cast<Eigen::Index>(mask.size()) != n)
    throw std::invalid_argument("mask length does not match row count");
  int n_real = 0;
  for (auto m : mask) n_real += m ? 1 : 0;
  if (n_real == 0) throw std::invalid_argument("attention mask has no active positions");
  if (p.wq.rows() != d) throw NumericError("attention block dimension mismatch");

  AttentionCache local;
  AttentionCache& c = cache ? *cache : local;
  c.x = x;
  c.mask = mask;
  c.n_real = n_real;

  c.q = x * p.wq;
  c.k = x * p.wk;
  c.v = x * p.wv;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Mat scores = c.q * c.k.transpose() * scale;

  c.probs = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (mask[static_cast<std::size_t>(j)]) mx = std::max(mx, scores(i, j));
    double z = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!mask[static_cast<std::size_t>(j)]) continue;
      const double e = std::exp(scores(i, j) - mx);
      c.probs(i, j) = e;
      z += e;
    }
    c.probs.row(i) /= z;
  }

  c.attn = c.probs * c.v;
  c.r1 = x + c.attn * p.wo;
  c.x1 = detail::layer_norm(c.r1, p.ln1_gain, p.ln1_bias, c.x1_hat, c.inv_std1);
  c.ff_hidden = ((c.x1 * p.ff1).rowwise() + p.ffb1.transpose()).cwiseMax(0.0);
  const Mat f2 = (c.ff_hidden * p.ff2).rowwise() + p.ffb2.transpose();
  c.r2 = c.x1 + f2;
  c.out = detail::layer_norm(c.r2, p.ln2_gain, p.ln2_bias, c.x2_hat, c.inv_std2);
  for (Eigen::Index i = 0; i < n; ++i)
    if (!mask[static_cast<std::size_t>(i)]) c.out.row(i).setZero();
  return c.out;
}

/// Backward pass. Accumulates parameter gradients into `grad` and returns
/// the gradient with respect to the input rows. Gradients at masked rows are
/// exactly zero, matching the forward contract.
inline Mat attention_block_backward(const Mat& d_out, const AttentionCache& c,
                                    const AttentionBlockParams& p,
                                    AttentionBlockParams& grad) {
  const Eigen::Index n = c.x.rows(), d = c.x.cols();
  Mat dx2 = d_out;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!c.mask[static_cast<std::size_t>(i)]) dx2.row(i).setZero();

  Mat dr2 = detail::layer_norm_backward(dx2, c.x2_hat, c.inv_std2, p.ln2_gain,
                                        grad.ln2_gain, grad.ln2_bias);
  Mat dx1 = dr2;  // residual
  // feed-forward
  Mat d_hid = dr2 * p.ff2.transpose();
  grad.ff2 += c.ff_hidden.transpose() * dr2;
  grad.ffb2 += dr2.colwise().sum().transpose();
  Mat d_hpre = (c.ff_hidden.array() > 0.0).select(d_hid, 0.0);
  grad.ff1 += c.x1.transpose() * d_hpre;
  grad.ffb1 += d_hpre.colwise().sum().transpose();
  dx1 += d_hpre * p.ff1.transpose();

  Mat dr1 = detail::layer_norm_backward(dx1, c.x1_hat, c.inv_std1, p.ln1_gain,
                                        grad.ln1_gain, grad.ln1_bias);
  Mat dx = dr1;  // residual
  // attention output projection
  Mat d_ao = dr1;
  Mat d_attn = d_ao * p.wo.transpose();
  grad.wo += c.attn.transpose() * d_ao;
  // through probs * v
  Mat d_probs = d_attn * c.v.transpose();
  Mat dv = c.probs.transpose() * d_attn;
  // softmax jacobian, row-wise over unmasked keys
  Mat ds = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!c.mask[static_cast<std::size_t>(i)]) continue;
    const double dot = (d_probs.row(i).array() * c.probs.row(i).array()).sum();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!c.mask[static_cast<std::size_t>(j)]) continue;
      ds(i, j) = c.probs(i, j) * (d_probs(i, j) - dot);
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Mat dq = ds * c.k * scale;
  Mat dk = ds.transpose() * c.q * scale;

  dx += dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
  grad.wq += c.x.transpose() * dq;
  grad.wk += c.x.transpose() * dk;
  grad.wv += c.x.transpose() * dv;
  return dx;
}

}  // namespace metadrug
