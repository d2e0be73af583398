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

// Prediction head: a preference gate derived from the patient embedding
// rescales the rows of the first predictive layer, which maps the
// concatenated (patient, visit) embedding through two affine layers to
// per-medication probabilities. These are the only parameters touched by
// inner-loop adaptation.

constexpr double kProbClamp = 1e-7;

struct Prediction {
  Vec probs;  // length H, clamped to [kProbClamp, 1 - kProbClamp]
};

struct HeadParams {
  Mat wg;  // d x d
  Vec bg;  // d
  Mat w1;  // d x 2d
  Vec b1;  // d
  Mat w2;  // H x d
  Vec b2;  // H

  int dim() const { return static_cast<int>(wg.rows()); }
  int num_medications() const { return static_cast<int>(w2.rows()); }

  static HeadParams zeros(int d, int H) {
    HeadParams p;
    p.wg = Mat::Zero(d, d);
    p.bg = Vec::Zero(d);
    p.w1 = Mat::Zero(d, 2 * d);
    p.b1 = Vec::Zero(d);
    p.w2 = Mat::Zero(H, d);
    p.b2 = Vec::Zero(H);
    return p;
  }

  static HeadParams init(int d, int H, Rng& rng) {
    HeadParams p = zeros(d, H);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (Mat* m : {&p.wg, &p.w1, &p.w2})
      for (Eigen::Index i = 0; i < m->size(); ++i)
        m->data()[i] = rng.uniform(-bound, bound);
    return p;
  }

  std::vector<ParamView> views() {
    return {
        {"head.wg", wg.data(), wg.rows(), wg.cols()},
        {"head.bg", bg.data(), bg.rows(), 1},
        {"head.w1", w1.data(), w1.rows(), w1.cols()},
        {"head.b1", b1.data(), b1.rows(), 1},
        {"head.w2", w2.data(), w2.rows(), w2.cols()},
        {"head.b2", b2.data(), b2.rows(), 1},
    };
  }
};

/// Preference gate g = sigmoid(wg * e_p + bg); entries strictly in (0,1).
inline Vec gate(const Vec& patient_emb, const HeadParams& p) {
  Vec pre = p.wg * patient_emb + p.bg;
  for (Eigen::Index i = 0; i < pre.size(); ++i) pre[i] = sigmoid(pre[i]);
  return pre;
}

/// Patient-specific first-layer weight: row r of the result is g[r] * row r
/// of w1 (diag(g) * w1).
inline Mat personalize(const Vec& g, const Mat& w1) {
  return g.asDiagonal() * w1;
}

struct HeadCache {
  Vec ep, ev;        // inputs
  Vec gate_pre;      // wg*ep + bg
  Vec g;             // sigmoid(gate_pre)
  Vec a;             // w1 * [ep; ev]
  Vec z;             // g .* a + b1
  Vec logits;        // w2 * z + b2
  Vec prob_raw;      // sigmoid(logits), before clamping
  Vec prob;          // clamped
};

inline Prediction predict(const Vec& patient_emb, const Vec& visit_emb,
                          const HeadParams& p, HeadCache* cache = nullptr) {
  HeadCache local;
  HeadCache& c = cache ? *cache : local;
  c.ep = patient_emb;
  c.ev = visit_emb;
  c.gate_pre = p.wg * patient_emb + p.bg;
  c.g = c.gate_pre;
  for (Eigen::Index i = 0; i < c.g.size(); ++i) c.g[i] = sigmoid(c.g[i]);
  Vec concat(patient_emb.size() + visit_emb.size());
  concat << patient_emb, visit_emb;
  c.a = p.w1 * concat;
  c.z = c.g.cwiseProduct(c.a) + p.b1;
  c.logits = p.w2 * c.z + p.b2;
  c.prob_raw = c.logits;
  for (Eigen::Index i = 0; i < c.prob_raw.size(); ++i)
    c.prob_raw[i] = sigmoid(c.prob_raw[i]);
  c.prob = c.prob_raw.cwiseMax(kProbClamp).cwiseMin(1.0 - kProbClamp);
  return Prediction{c.prob};
}

/// Binary cross entropy summed over all candidate medications. Inputs come
/// from predict(), whose clamping keeps every term finite.
inline double bce_loss(const Prediction& pred, const std::vector<std::uint8_t>& labels) {
  if (static_cast<std::size_t>(pred.probs.size()) != labels.size())
    throw NumericError("bce_loss: label/prediction length mismatch");
  double loss = 0.0;
  for (Eigen::Index j = 0; j < pred.probs.size(); ++j) {
    const double p = pred.probs[j];
    if (labels[static_cast<std::size_t>(j)])
      loss -= std::log(p);
    else
      loss -= std::log(1.0 - p);
  }
  return loss;
}

/// Accumulates scale * d(BCE o predict)/d(params) into `grad`, and the input
/// gradients into d_ep / d_ev when non-null. Positions where the raw sigmoid
/// output left the clamp interval contribute zero, matching the loss.
inline void predict_bce_backward(const HeadCache& c, const HeadParams& p,
                                 const std::vector<std::uint8_t>& labels, double scale,
                                 HeadParams& grad, Vec* d_ep = nullptr,
                                 Vec* d_ev = nullptr) {
  const Eigen::Index H = c.logits.size();
  const Eigen::Index d = c.z.size();
  Vec d_logits(H);
  for (Eigen::Index j = 0; j < H; ++j) {
    const double pr = c.prob_raw[j];
    if (pr <= kProbClamp || pr >= 1.0 - kProbClamp) {
      d_logits[j] = 0.0;
    } else {
      d_logits[j] = scale * (pr - static_cast<double>(labels[static_cast<std::size_t>(j)]));
    }
  }
  grad.b2 += d_logits;
  grad.w2 += d_logits * c.z.transpose();
  const Vec dz = p.w2.transpose() * d_logits;
  grad.b1 += dz;
  const Vec da = c.g.cwiseProduct(dz);
  const Vec dg = c.a.cwiseProduct(dz);
  Vec concat(2 * d);
  concat << c.ep, c.ev;
  grad.w1 += da * concat.transpose();
  const Vec d_concat = p.w1.transpose() * da;
  const Vec d_gate_pre = dg.cwiseProduct(c.g.cwiseProduct(Vec::Ones(d) - c.g));
  grad.bg += d_gate_pre;
  grad.wg += d_gate_pre * c.ep.transpose();
  if (d_ep) *d_ep += d_concat.head(d) + p.wg.transpose() * d_gate_pre;
  if (d_ev) *d_ev += d_concat.tail(d);
}

}  // namespace metadrug
