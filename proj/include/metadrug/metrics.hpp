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
#include <cstdint>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "metadrug/common.hpp"
#include "metadrug/ehr.hpp"
#include "metadrug/head.hpp"

namespace metadrug {

struct MetricReport {
  double prauc = 0.0;
  double f1 = 0.0;
  double jaccard = 0.0;
  double ddi = 0.0;
  int n_patients = 0;
  std::string subset_label;
};

using LabelVec = std::vector<std::uint8_t>;

/// Y_j = 1 iff yhat_j > eta (strict).
inline LabelVec binarize(const Prediction& pred, double eta) {
  if (eta < 0.0 || eta > 1.0) throw ConfigError("eval.eta must be in [0,1]");
  LabelVec out(static_cast<std::size_t>(pred.probs.size()), 0);
  for (Eigen::Index j = 0; j < pred.probs.size(); ++j)
    if (pred.probs[j] > eta) out[static_cast<std::size_t>(j)] = 1;
  return out;
}

namespace detail {

struct SetCounts {
  int inter = 0, true_count = 0, pred_count = 0;
};

inline SetCounts count_sets(const LabelVec& truth, const LabelVec& pred) {
  if (truth.size() != pred.size()) throw NumericError("label length mismatch");
  SetCounts c;
  for (std::size_t j = 0; j < truth.size(); ++j) {
    c.true_count += truth[j] ? 1 : 0;
    c.pred_count += pred[j] ? 1 : 0;
    c.inter += (truth[j] && pred[j]) ? 1 : 0;
  }
  return c;
}

}  // namespace detail

/// Mean over patients of |Y n Yhat| / |Y u Yhat|; 0 for a patient where both
/// sets are empty.
inline double jaccard_metric(const std::vector<LabelVec>& truths,
                             const std::vector<LabelVec>& preds) {
  if (truths.size() != preds.size() || truths.empty())
    throw DataError("jaccard_metric: empty or mismatched inputs");
  double sum = 0.0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const auto c = detail::count_sets(truths[i], preds[i]);
    const int uni = c.true_count + c.pred_count - c.inter;
    if (uni > 0) sum += static_cast<double>(c.inter) / static_cast<double>(uni);
  }
  return sum / static_cast<double>(truths.size());
}

/// Mean per-patient F1 = 2PR/(P+R); 0 when the predicted set is empty or when
/// P + R = 0.
inline double f1_metric(const std::vector<LabelVec>& truths,
                        const std::vector<LabelVec>& preds) {
  if (truths.size() != preds.size() || truths.empty())
    throw DataError("f1_metric: empty or mismatched inputs");
  double sum = 0.0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const auto c = detail::count_sets(truths[i], preds[i]);
    if (c.pred_count == 0 || c.true_count == 0) continue;
    const double precision = static_cast<double>(c.inter) / c.pred_count;
    const double recall = static_cast<double>(c.inter) / c.true_count;
    if (precision + recall > 0.0) sum += 2.0 * precision * recall / (precision + recall);
  }
  return sum / static_cast<double>(truths.size());
}

/// Per-patient area under the precision-recall curve over the ranked
/// medication list (rank by probability descending, ties by medication
/// index), averaged over patients. Patients with no positive label are
/// excluded; the count is reported via `excluded`.
inline double prauc_metric(const std::vector<LabelVec>& truths,
                           const std::vector<Prediction>& raw_preds,
                           int* excluded = nullptr) {
  if (truths.size() != raw_preds.size() || truths.empty())
    throw DataError("prauc_metric: empty or mismatched inputs");
  double sum = 0.0;
  int used = 0, skipped = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const auto& truth = truths[i];
    const auto& probs = raw_preds[i].probs;
    const int H = static_cast<int>(truth.size());
    const int n_pos = static_cast<int>(std::count(truth.begin(), truth.end(), 1));
    if (n_pos == 0) {
      ++skipped;
      continue;
    }
    std::vector<int> rank(static_cast<std::size_t>(H));
    std::iota(rank.begin(), rank.end(), 0);
    std::sort(rank.begin(), rank.end(), [&](int a, int b) {
      if (probs[a] != probs[b]) return probs[a] > probs[b];
      return a < b;
    });
    // Recall only moves at positive ranks, by 1/n_pos each time, so the
    // rank-walk sum collapses to the average precision at positive hits.
    double prauc = 0.0;
    int tp = 0;
    for (int k = 1; k <= H; ++k) {
      if (truth[static_cast<std::size_t>(rank[static_cast<std::size_t>(k - 1)])]) {
        ++tp;
        prauc += (static_cast<double>(tp) / k) / n_pos;
      }
    }
    sum += prauc;
    ++used;
  }
  if (excluded) *excluded = skipped;
  if (skipped > 0)
    std::cerr << "note: prauc excluded " << skipped << " patient(s) with no positive label\n";
  if (used == 0) throw DataError("prauc_metric: no patient has a positive label");
  return sum / static_cast<double>(used);
}

/// Fraction of predicted unordered medication pairs that are known
/// interactions: sum over patients of interacting pairs divided by the sum of
/// all predicted pairs; 0 when no patient predicts 2+ medications.
inline double ddi_rate(const std::vector<LabelVec>& preds, const DdiGraph& graph) {
  long long bad = 0, all = 0;
  for (const auto& pred : preds) {
    std::vector<int> meds;
    for (std::size_t j = 0; j < pred.size(); ++j)
      if (pred[j]) meds.push_back(static_cast<int>(j));
    for (std::size_t a = 0; a < meds.size(); ++a) {
      for (std::size_t b = a + 1; b < meds.size(); ++b) {
        ++all;
        if (graph.n > 0 && graph.edge(meds[a], meds[b])) ++bad;
      }
    }
  }
  if (all == 0) return 0.0;
  return static_cast<double>(bad) / static_cast<double>(all);
}

/// All four metrics over aligned truth/prediction lists.
inline MetricReport compute_metrics(const std::vector<LabelVec>& truths,
                                    const std::vector<Prediction>& raw_preds,
                                    const DdiGraph& graph, double eta,
                                    const std::string& subset_label) {
  MetricReport r;
  r.subset_label = subset_label;
  r.n_patients = static_cast<int>(truths.size());
  std::vector<LabelVec> binarized;
  binarized.reserve(raw_preds.size());
  for (const auto& p : raw_preds) binarized.push_back(binarize(p, eta));
  r.jaccard = jaccard_metric(truths, binarized);
  r.f1 = f1_metric(truths, binarized);
  r.prauc = prauc_metric(truths, raw_preds);
  r.ddi = ddi_rate(binarized, graph);
  return r;
}

}  // namespace metadrug
