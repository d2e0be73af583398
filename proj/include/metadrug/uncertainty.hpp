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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metadrug/attention.hpp"
#include "metadrug/common.hpp"
#include "metadrug/ehr.hpp"
#include "metadrug/encoder.hpp"
#include "metadrug/head.hpp"

namespace metadrug {

// Per-visit uncertainty scoring and filtering. Scores come from one of three
// variants (auxiliary error, stochastic dropout, deep ensemble); a small
// self-attention regressor learns to predict visit scores from the visit
// embedding sequence so that unreliable support visits can be filtered at
// meta-test time, when labels of the target are unknown.

enum class UqMethod { aux_error, dropout, ensemble, none };

inline std::string uq_method_name(UqMethod m) {
  switch (m) {
    case UqMethod::aux_error: return "aux_error";
    case UqMethod::dropout: return "dropout";
    case UqMethod::ensemble: return "ensemble";
    case UqMethod::none: return "none";
  }
  return "none";
}

inline UqMethod uq_method_from_name(const std::string& s) {
  if (s == "aux_error") return UqMethod::aux_error;
  if (s == "dropout") return UqMethod::dropout;
  if (s == "ensemble") return UqMethod::ensemble;
  if (s == "none") return UqMethod::none;
  throw ConfigError("unknown uq.method '" + s + "'");
}

struct UqConfig {
  UqMethod method = UqMethod::aux_error;
  double beta = 20.0;        // percentile separating the top scores
  int dropout_passes = 10;   // K
  double dropout_rate = 0.5;
  int ensemble_size = 3;
  int fit_epochs = 300;
  double fit_lr = 0.01;
  std::uint64_t seed = 99;
};

/// S_j = |Y_j - yhat_j|, one score per candidate medication.
inline Vec auxiliary_error_scores(const std::vector<std::uint8_t>& labels,
                                  const Prediction& pred) {
  if (static_cast<std::size_t>(pred.probs.size()) != labels.size())
    throw NumericError("auxiliary_error_scores: length mismatch");
  Vec s(pred.probs.size());
  for (Eigen::Index j = 0; j < s.size(); ++j)
    s[j] = std::abs(static_cast<double>(labels[static_cast<std::size_t>(j)]) - pred.probs[j]);
  return s;
}

/// One stochastic forward pass with inverted dropout on the head's hidden
/// layer (the z vector feeding the second predictive layer).
inline Prediction predict_with_hidden_dropout(const Vec& patient_emb, const Vec& visit_emb,
                                              const HeadParams& p, double rate, Rng& rng) {
  HeadCache c;
  predict(patient_emb, visit_emb, p, &c);
  Vec z = c.z;
  if (rate > 0.0) {
    const double keep = 1.0 - rate;
    for (Eigen::Index i = 0; i < z.size(); ++i)
      z[i] = rng.uniform() < rate ? 0.0 : z[i] / keep;
  }
  Vec logits = p.w2 * z + p.b2;
  Vec prob(logits.size());
  for (Eigen::Index i = 0; i < prob.size(); ++i) prob[i] = sigmoid(logits[i]);
  return Prediction{prob.cwiseMax(kProbClamp).cwiseMin(1.0 - kProbClamp)};
}

namespace detail {

inline Vec prediction_std(const std::vector<Vec>& preds) {
  const auto k = static_cast<double>(preds.size());
  Vec mean = Vec::Zero(preds.front().size());
  for (const auto& p : preds) mean += p;
  mean /= k;
  Vec var = Vec::Zero(mean.size());
  for (const auto& p : preds) var += (p - mean).cwiseProduct(p - mean);
  var /= k;
  return var.cwiseSqrt();
}

}  // namespace detail

/// Standard deviation of K dropout passes at the given visit (1-based t).
/// Deterministic in the seed.
inline Vec dropout_scores(const PatientRecord& record, int visit_t,
                          const EncoderParams& enc, const HeadParams& head, int passes,
                          double rate, std::uint64_t seed) {
  if (passes < 2) throw ConfigError("dropout passes must be >= 2");
  const Vec ep = patient_encode(record, enc);
  const Vec ev = visit_encode(record.visits[static_cast<std::size_t>(visit_t - 1)], enc);
  Rng rng(seed);
  std::vector<Vec> preds;
  preds.reserve(static_cast<std::size_t>(passes));
  for (int k = 0; k < passes; ++k)
    preds.push_back(predict_with_hidden_dropout(ep, ev, head, rate, rng).probs);
  return detail::prediction_std(preds);
}

/// Standard deviation of predictions across independently initialized models.
inline Vec ensemble_scores(const PatientRecord& record, int visit_t,
                           const std::vector<std::pair<const EncoderParams*,
                                                       const HeadParams*>>& models) {
  if (models.size() < 2) throw ConfigError("ensemble requires at least 2 models");
  std::vector<Vec> preds;
  preds.reserve(models.size());
  for (const auto& [enc, head] : models) {
    const Vec ep = patient_encode(record, *enc);
    const Vec ev = visit_encode(record.visits[static_cast<std::size_t>(visit_t - 1)], *enc);
    preds.push_back(predict(ep, ev, *head).probs);
  }
  return detail::prediction_std(preds);
}

/// Visit-level score: mean of S over predicted-positive medications
/// (yhat > 0.5); mean over all medications when nothing is predicted
/// positive.
inline double visit_uncertainty(const Vec& scores, const Prediction& pred) {
  if (scores.size() != pred.probs.size())
    throw NumericError("visit_uncertainty: length mismatch");
  double sum = 0.0;
  int n = 0;
  for (Eigen::Index j = 0; j < scores.size(); ++j) {
    if (pred.probs[j] > 0.5) {
      sum += scores[j];
      ++n;
    }
  }
  if (n == 0) return scores.mean();
  return sum / static_cast<double>(n);
}

struct FilterThreshold {
  double gamma = std::numeric_limits<double>::infinity();
  double beta = 20.0;
};

/// gamma is the nearest-rank (100-beta)-th percentile of the training visit
/// scores; the top beta percent of values lie above it (up to ties).
inline FilterThreshold fit_threshold(std::vector<double> scores, double beta) {
  if (scores.empty()) throw DataError("fit_threshold: empty score list");
  if (!(beta > 0.0 && beta < 100.0)) throw ConfigError("uq.beta must be in (0,100)");
  std::sort(scores.begin(), scores.end());
  FilterThreshold t;
  t.beta = beta;
  t.gamma = scores[nearest_rank_index(scores.size(), 100.0 - beta)];
  return t;
}

/// Self-attention regressor over the sequence of per-visit embeddings; one
/// non-negative score per position via a softplus output head.
struct UqPredictorParams {
  AttentionBlockParams block;
  Vec w_out;
  double b_out = 0.0;

  static UqPredictorParams init(int d, Rng& rng) {
    UqPredictorParams p;
    p.block = AttentionBlockParams::init(d, rng);
    p.w_out.resize(d);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (Eigen::Index i = 0; i < d; ++i) p.w_out[i] = rng.uniform(-bound, bound);
    p.b_out = 0.0;
    return p;
  }

  static UqPredictorParams zeros(int d, int f = -1) {
    UqPredictorParams p;
    p.block = AttentionBlockParams::zeros(d, f);
    p.w_out = Vec::Zero(d);
    p.b_out = 0.0;
    return p;
  }

  std::vector<ParamView> views() {
    std::vector<ParamView> out;
    block.views("uq.block.", out);
    out.push_back({"uq.w_out", w_out.data(), w_out.rows(), 1});
    out.push_back({"uq.b_out", &b_out, 1, 1});
    return out;
  }
};

inline Vec uq_predict_scores(const std::vector<Vec>& visit_embs,
                             const UqPredictorParams& p, AttentionCache* cache = nullptr,
                             Vec* pre_out = nullptr) {
  if (visit_embs.empty()) throw DataError("uq predictor needs at least one visit");
  const Eigen::Index n = static_cast<Eigen::Index>(visit_embs.size());
  const Eigen::Index d = visit_embs.front().size();
  Mat x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = visit_embs[static_cast<std::size_t>(i)].transpose();
  const std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 1);
  AttentionCache local;
  AttentionCache& c = cache ? *cache : local;
  const Mat h = attention_block(x, p.block, mask, &c);
  Vec pre = h * p.w_out + Vec::Constant(n, p.b_out);
  if (pre_out) *pre_out = pre;
  Vec s(n);
  for (Eigen::Index i = 0; i < n; ++i) s[i] = softplus(pre[i]);
  return s;
}

/// Per-patient regression data: the support-visit embedding sequence and its
/// target scores.
struct UqTrainData {
  std::vector<std::vector<Vec>> sequences;
  std::vector<std::vector<double>> targets;

  std::vector<double> all_targets() const {
    std::vector<double> out;
    for (const auto& t : targets) out.insert(out.end(), t.begin(), t.end());
    return out;
  }
};

/// Computes target visit scores U for every training support visit using the
/// configured variant. Never touches the base model parameters.
inline UqTrainData uq_targets(const Cohort& train, const EncoderParams& enc,
                              const HeadParams& head, const UqConfig& cfg,
                              const std::vector<std::pair<EncoderParams, HeadParams>>*
                                  ensemble_extras = nullptr) {
  UqTrainData data;
  std::vector<std::pair<const EncoderParams*, const HeadParams*>> models;
  if (cfg.method == UqMethod::ensemble) {
    if (!ensemble_extras || ensemble_extras->size() + 1 < 2)
      throw ConfigError("ensemble uq requires extra trained models");
    models.emplace_back(&enc, &head);
    for (const auto& [e, h] : *ensemble_extras) models.emplace_back(&e, &h);
  }
  std::uint64_t visit_counter = 0;
  for (const auto& patient : train.patients) {
    const Vec ep = patient_encode(patient, enc);
    std::vector<Vec> seq;
    std::vector<double> target;
    for (int t = 1; t < patient.num_visits(); ++t) {
      const Visit& v = patient.visits[static_cast<std::size_t>(t - 1)];
      const Vec ev = visit_encode(v, enc);
      const Prediction pred = predict(ep, ev, head);
      Vec s;
      switch (cfg.method) {
        case UqMethod::aux_error:
          s = auxiliary_error_scores(v.labels, pred);
          break;
        case UqMethod::dropout:
          s = dropout_scores(patient, t, enc, head, cfg.dropout_passes, cfg.dropout_rate,
                             cfg.seed + visit_counter);
          break;
        case UqMethod::ensemble:
          s = ensemble_scores(patient, t, models);
          break;
        case UqMethod::none:
          throw ConfigError("uq targets requested with method=none");
      }
      seq.push_back(ev);
      target.push_back(visit_uncertainty(s, pred));
      ++visit_counter;
    }
    data.sequences.push_back(std::move(seq));
    data.targets.push_back(std::move(target));
  }
  return data;
}

/// Full-batch Adam on mean squared error over all support visits.
inline UqPredictorParams fit_uq_predictor(const UqTrainData& data, int d,
                                          const UqConfig& cfg) {
  if (data.sequences.empty()) throw DataError("uq predictor training set is empty");
  Rng rng(cfg.seed);
  UqPredictorParams params = UqPredictorParams::init(d, rng);
  std::size_t total = 0;
  for (const auto& t : data.targets) total += t.size();
  if (total == 0) throw DataError("uq predictor training set is empty");

  AdamState adam(total_size(params.views()));
  for (int epoch = 0; epoch < cfg.fit_epochs; ++epoch) {
    UqPredictorParams grad = UqPredictorParams::zeros(d, params.block.ffn_dim());
    for (std::size_t i = 0; i < data.sequences.size(); ++i) {
      AttentionCache cache;
      Vec pre;
      const Vec s = uq_predict_scores(data.sequences[i], params, &cache, &pre);
      const Eigen::Index n = s.size();
      Vec d_pre(n);
      for (Eigen::Index t = 0; t < n; ++t) {
        const double diff = s[t] - data.targets[i][static_cast<std::size_t>(t)];
        // d softplus = sigmoid
        d_pre[t] = 2.0 * diff * sigmoid(pre[t]) / static_cast<double>(total);
      }
      grad.w_out += cache.out.transpose() * d_pre;
      grad.b_out += d_pre.sum();
      const Mat d_h = d_pre * params.w_out.transpose();
      attention_block_backward(d_h, cache, params.block, grad.block);
    }
    adam.step(params.views(), grad.views(), cfg.fit_lr);
  }
  return params;
}

struct UqFilter {
  bool enabled = false;
  UqMethod method = UqMethod::aux_error;
  UqPredictorParams predictor;
  FilterThreshold threshold;
};

struct FilterResult {
  std::vector<int> retained;  // 1-based visit positions, ascending
  bool fallback_used = false;
};

/// Keeps support visits whose predicted score is <= gamma. If that would
/// remove everything, keeps the single lowest-score visit (adaptation always
/// needs at least one support visit) and flags the fallback.
inline FilterResult filter_support_visits(const std::vector<Vec>& support_embs,
                                          const UqPredictorParams& predictor,
                                          const FilterThreshold& threshold) {
  FilterResult result;
  if (support_embs.empty()) throw DataError("filter_support_visits: no support visits");
  const Vec predicted = uq_predict_scores(support_embs, predictor);
  for (Eigen::Index t = 0; t < predicted.size(); ++t)
    if (predicted[t] <= threshold.gamma) result.retained.push_back(static_cast<int>(t) + 1);
  if (result.retained.empty()) {
    Eigen::Index best = 0;
    predicted.minCoeff(&best);
    result.retained.push_back(static_cast<int>(best) + 1);
    result.fallback_used = true;
  }
  return result;
}

}  // namespace metadrug
