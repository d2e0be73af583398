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

#include <cstdint>
#include <utility>
#include <vector>

#include "metadrug/common.hpp"
#include "metadrug/ehr.hpp"
#include "metadrug/encoder.hpp"
#include "metadrug/head.hpp"
#include "metadrug/peer_index.hpp"
#include "metadrug/uncertainty.hpp"

namespace metadrug {

// Two-level inner-loop adaptation. Each patient is a task: one gradient step
// on the head from the patient's own prior visits (self-adaptation), one more
// from the top-lambda Jaccard-similar peer visits (peer-adaptation), then the
// query loss at the last visit drives the outer update of all parameters.
// The encoder is frozen during both inner steps.

struct MetaConfig {
  double alpha = 0.01;       // inner adaptation rate; also the default outer rate
  double outer_lr = -1.0;    // < 0 means "use alpha"
  int lambda_peers = 3;
  int batch_size = 32;
  int epochs = 30;
  bool first_order = true;
  bool use_self = true;
  bool use_peer = true;
  std::uint64_t seed = 1;

  double effective_outer_lr() const { return outer_lr < 0.0 ? alpha : outer_lr; }

  void validate() const {
    if (alpha < 0.0) throw ConfigError("meta.alpha must be >= 0");
    if (lambda_peers < 1) throw ConfigError("meta.lambda must be >= 1");
    if (batch_size < 1) throw ConfigError("meta.batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("meta.epochs must be >= 0");
  }
};

namespace detail {

// A support set ready for head-level loss/gradient work: a shared patient
// embedding paired with per-visit embeddings and their label vectors.
// Encoder caches are only needed when gradients w.r.t. theta are requested.
struct SupportSet {
  const Vec* ep = nullptr;
  const EncodeCache* ep_cache = nullptr;
  struct Item {
    const Vec* ev = nullptr;
    const EncodeCache* ev_cache = nullptr;
    const std::vector<std::uint8_t>* labels = nullptr;
  };
  std::vector<Item> items;
};

// Mean BCE over the support set. Accumulates d_phi (already divided by the
// item count) and, when d_theta is given, the gradients through both encoder
// paths.
inline double support_loss_and_grads(const SupportSet& set, const EncoderParams& enc,
                                     const HeadParams& phi, HeadParams* d_phi,
                                     EncoderParams* d_theta = nullptr) {
  if (set.items.empty()) throw DataError("support set is empty");
  const double scale = 1.0 / static_cast<double>(set.items.size());
  double loss = 0.0;
  Vec d_ep = Vec::Zero(set.ep->size());
  for (const auto& item : set.items) {
    HeadCache cache;
    const Prediction pred = predict(*set.ep, *item.ev, phi, &cache);
    loss += bce_loss(pred, *item.labels);
    if (d_phi) {
      Vec d_ev = Vec::Zero(item.ev->size());
      predict_bce_backward(cache, phi, *item.labels, scale, *d_phi,
                           d_theta ? &d_ep : nullptr, d_theta ? &d_ev : nullptr);
      if (d_theta)
        pooled_encode_backward(d_ev, *item.ev_cache, enc.visit_block,
                               d_theta->visit_block, d_theta->embedding);
    }
  }
  if (d_theta)
    pooled_encode_backward(d_ep, *set.ep_cache, enc.patient_block,
                           d_theta->patient_block, d_theta->embedding);
  return loss * scale;
}

inline HeadParams gradient_step(const HeadParams& phi, const HeadParams& grad, double alpha) {
  HeadParams out = phi;
  if (alpha != 0.0) axpy_params(out.views(), -alpha, const_cast<HeadParams&>(grad).views());
  return out;
}

}  // namespace detail

/// Mean BCE over the patient's support visits (1..T-1), optionally restricted
/// to a retained subset of 1-based visit positions.
inline double self_support_loss(const PatientRecord& record, const EncoderParams& enc,
                                const HeadParams& phi,
                                const std::vector<int>* retained = nullptr) {
  if (record.num_visits() < 2) throw DataError("patient needs at least 2 visits");
  const Vec ep = patient_encode(record, enc);
  std::vector<Vec> evs;
  detail::SupportSet set;
  set.ep = &ep;
  std::vector<int> all;
  if (!retained) {
    for (int t = 1; t < record.num_visits(); ++t) all.push_back(t);
    retained = &all;
  }
  evs.reserve(retained->size());
  for (int t : *retained) {
    const Visit& v = record.visits[static_cast<std::size_t>(t - 1)];
    evs.push_back(visit_encode(v, enc));
    set.items.push_back({&evs.back(), nullptr, &v.labels});
  }
  return detail::support_loss_and_grads(set, enc, phi, nullptr);
}

/// phi1 = phi - alpha * grad(self support loss); the encoder is untouched.
inline HeadParams self_adapt(const PatientRecord& record, const EncoderParams& enc,
                             const HeadParams& phi, double alpha,
                             const std::vector<int>* retained = nullptr) {
  if (alpha == 0.0) return phi;
  const Vec ep = patient_encode(record, enc);
  std::vector<Vec> evs;
  detail::SupportSet set;
  set.ep = &ep;
  std::vector<int> all;
  if (!retained) {
    for (int t = 1; t < record.num_visits(); ++t) all.push_back(t);
    retained = &all;
  }
  evs.reserve(retained->size());
  for (int t : *retained) {
    const Visit& v = record.visits[static_cast<std::size_t>(t - 1)];
    evs.push_back(visit_encode(v, enc));
    set.items.push_back({&evs.back(), nullptr, &v.labels});
  }
  HeadParams grad = HeadParams::zeros(phi.dim(), phi.num_medications());
  detail::support_loss_and_grads(set, enc, phi, &grad);
  return detail::gradient_step(phi, grad, alpha);
}

/// phi2 = phi1 - alpha * grad(peer loss). The target patient's own embedding
/// is paired with each retrieved peer visit.
inline HeadParams peer_adapt(const PatientRecord& record, const std::vector<VisitRef>& peers,
                             const EncoderParams& enc, const HeadParams& phi1, double alpha) {
  if (peers.empty()) throw DataError("peer_adapt: empty peer list");
  if (alpha == 0.0) return phi1;
  const Vec ep = patient_encode(record, enc);
  std::vector<Vec> evs;
  detail::SupportSet set;
  set.ep = &ep;
  evs.reserve(peers.size());
  for (const auto& peer : peers) {
    evs.push_back(visit_encode_codes(peer.codes, enc));
    set.items.push_back({&evs.back(), nullptr, &peer.labels});
  }
  HeadParams grad = HeadParams::zeros(phi1.dim(), phi1.num_medications());
  detail::support_loss_and_grads(set, enc, phi1, &grad);
  return detail::gradient_step(phi1, grad, alpha);
}

/// BCE of the adapted head's prediction at the last (query) visit.
inline double query_loss(const PatientRecord& record, const EncoderParams& enc,
                         const HeadParams& phi2) {
  const Vec ep = patient_encode(record, enc);
  const Vec ev = visit_encode(record.last_visit(), enc);
  return bce_loss(predict(ep, ev, phi2), record.last_visit().labels);
}

namespace detail {

struct PatientForward {
  Vec ep;
  EncodeCache ep_cache;
  std::vector<Vec> support_evs;             // t = 1..T-1
  std::vector<EncodeCache> support_caches;
  Vec query_ev;
  EncodeCache query_cache;
};

inline PatientForward forward_patient(const PatientRecord& record, const EncoderParams& enc) {
  PatientForward fw;
  fw.ep = patient_encode(record, enc, &fw.ep_cache);
  const int T = record.num_visits();
  fw.support_evs.resize(static_cast<std::size_t>(T - 1));
  fw.support_caches.resize(static_cast<std::size_t>(T - 1));
  for (int t = 1; t < T; ++t) {
    fw.support_evs[static_cast<std::size_t>(t - 1)] =
        visit_encode(record.visits[static_cast<std::size_t>(t - 1)], enc,
                     &fw.support_caches[static_cast<std::size_t>(t - 1)]);
  }
  fw.query_ev = visit_encode(record.last_visit(), enc, &fw.query_cache);
  return fw;
}

inline SupportSet self_set(const PatientRecord& record, const PatientForward& fw) {
  SupportSet set;
  set.ep = &fw.ep;
  set.ep_cache = &fw.ep_cache;
  for (std::size_t t = 0; t + 1 < static_cast<std::size_t>(record.num_visits()); ++t) {
    set.items.push_back({&fw.support_evs[t], &fw.support_caches[t],
                         &record.visits[t].labels});
  }
  return set;
}

// Central-difference Hessian-vector and cross-derivative products through an
// inner support loss, used by the exact (non-first-order) outer gradient.
// Embeddings stay fixed (theta is frozen inside the inner step), so only the
// head forward/backward is re-evaluated at phi +- eps*v.
struct InnerCurvature {
  HeadParams hvp;          // H_phi(loss) * v
  EncoderParams cross;     // d/dtheta (v . grad_phi loss)
};

inline InnerCurvature inner_curvature(const SupportSet& set, const EncoderParams& enc,
                                      const HeadParams& phi, const HeadParams& v) {
  const int d = phi.dim(), H = phi.num_medications();
  HeadParams phi_shift = phi;
  auto v_views = const_cast<HeadParams&>(v).views();
  auto phi_views = const_cast<HeadParams&>(phi).views();
  double phi_inf = 0.0, v_inf = 0.0;
  for (const auto& view : phi_views)
    for (Eigen::Index i = 0; i < view.size(); ++i)
      phi_inf = std::max(phi_inf, std::abs(view.data[i]));
  for (const auto& view : v_views)
    for (Eigen::Index i = 0; i < view.size(); ++i)
      v_inf = std::max(v_inf, std::abs(view.data[i]));
  const double eps = 1e-5 * (1.0 + phi_inf) / std::max(v_inf, 1e-12);

  HeadParams g_plus = HeadParams::zeros(d, H), g_minus = HeadParams::zeros(d, H);
  EncoderParams t_plus = EncoderParams::zeros_like(enc);
  EncoderParams t_minus = EncoderParams::zeros_like(enc);

  copy_params(phi_shift.views(), phi_views);
  axpy_params(phi_shift.views(), eps, v_views);
  support_loss_and_grads(set, enc, phi_shift, &g_plus, &t_plus);

  copy_params(phi_shift.views(), phi_views);
  axpy_params(phi_shift.views(), -eps, v_views);
  support_loss_and_grads(set, enc, phi_shift, &g_minus, &t_minus);

  InnerCurvature out{HeadParams::zeros(d, H), EncoderParams::zeros_like(enc)};
  axpy_params(out.hvp.views(), 0.5 / eps, g_plus.views());
  axpy_params(out.hvp.views(), -0.5 / eps, g_minus.views());
  axpy_params(out.cross.views(), 0.5 / eps, t_plus.views());
  axpy_params(out.cross.views(), -0.5 / eps, t_minus.views());
  return out;
}

}  // namespace detail

struct StepStats {
  double mean_query_loss = 0.0;
};

/// One outer update over a batch of patients: per patient self-adapt, peer
/// retrieval + peer-adapt, query loss; then a single gradient-descent step of
/// the batch-mean query loss on (theta, phi).
///
/// With first_order=true the adapted head is treated as a constant w.r.t.
/// (theta, phi) when differentiating the query loss (the query forward still
/// sees theta). With first_order=false, differentiation additionally flows
/// through both inner gradient steps via curvature products.
inline StepStats meta_train_step(const std::vector<const PatientRecord*>& batch,
                                 EncoderParams& enc, HeadParams& head,
                                 const PeerIndex& index, const MetaConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw DataError("meta_train_step: empty batch");
  const int d = head.dim(), H = head.num_medications();
  const double bscale = 1.0 / static_cast<double>(batch.size());
  EncoderParams enc_grad = EncoderParams::zeros_like(enc);
  HeadParams head_grad = HeadParams::zeros(d, H);
  double loss_sum = 0.0;

  for (const PatientRecord* rec : batch) {
    detail::PatientForward fw = detail::forward_patient(*rec, enc);
    const detail::SupportSet self = detail::self_set(*rec, fw);

    HeadParams phi1 = head;
    if (cfg.use_self && cfg.alpha != 0.0) {
      HeadParams g = HeadParams::zeros(d, H);
      detail::support_loss_and_grads(self, enc, head, &g);
      phi1 = detail::gradient_step(head, g, cfg.alpha);
    }

    detail::SupportSet peer_set;
    std::vector<Vec> peer_evs;
    std::vector<EncodeCache> peer_caches;
    std::vector<VisitRef> peers;
    HeadParams phi2 = phi1;
    if (cfg.use_peer) {
      peers = top_similar(index, rec->last_visit().codes, rec->patient_id, cfg.lambda_peers);
      peer_evs.reserve(peers.size());
      peer_caches.resize(peers.size());
      peer_set.ep = &fw.ep;
      peer_set.ep_cache = &fw.ep_cache;
      for (std::size_t i = 0; i < peers.size(); ++i) {
        peer_evs.push_back(visit_encode_codes(peers[i].codes, enc, &peer_caches[i]));
      }
      for (std::size_t i = 0; i < peers.size(); ++i)
        peer_set.items.push_back({&peer_evs[i], &peer_caches[i], &peers[i].labels});
      if (cfg.alpha != 0.0) {
        HeadParams g = HeadParams::zeros(d, H);
        detail::support_loss_and_grads(peer_set, enc, phi1, &g);
        phi2 = detail::gradient_step(phi1, g, cfg.alpha);
      }
    }

    HeadCache qcache;
    const Prediction pred = predict(fw.ep, fw.query_ev, phi2, &qcache);
    const auto& qlabels = rec->last_visit().labels;
    loss_sum += bce_loss(pred, qlabels);

    // Query-path gradients. d_phi2 lands directly in the outer head gradient
    // (first-order identity Jacobian); encoder gradients flow through both
    // the visit and patient encoders.
    Vec d_ep = Vec::Zero(d), d_ev = Vec::Zero(d);
    predict_bce_backward(qcache, phi2, qlabels, bscale, head_grad, &d_ep, &d_ev);
    pooled_encode_backward(d_ev, fw.query_cache, enc.visit_block, enc_grad.visit_block,
                           enc_grad.embedding);
    pooled_encode_backward(d_ep, fw.ep_cache, enc.patient_block, enc_grad.patient_block,
                           enc_grad.embedding);

    if (!cfg.first_order && cfg.alpha != 0.0 && (cfg.use_self || cfg.use_peer)) {
      // v = grad of the query loss w.r.t. phi2, unscaled.
      HeadParams v = HeadParams::zeros(d, H);
      predict_bce_backward(qcache, phi2, qlabels, 1.0, v);

      HeadParams v1 = v;
      if (cfg.use_peer && !peer_set.items.empty()) {
        const auto curv = detail::inner_curvature(peer_set, enc, phi1, v);
        axpy_params(v1.views(), -cfg.alpha,
                    const_cast<HeadParams&>(curv.hvp).views());
        axpy_params(enc_grad.views(), -cfg.alpha * bscale,
                    const_cast<EncoderParams&>(curv.cross).views());
      }
      HeadParams v0 = v1;
      if (cfg.use_self) {
        const auto curv = detail::inner_curvature(self, enc, head, v1);
        axpy_params(v0.views(), -cfg.alpha,
                    const_cast<HeadParams&>(curv.hvp).views());
        axpy_params(enc_grad.views(), -cfg.alpha * bscale,
                    const_cast<EncoderParams&>(curv.cross).views());
      }
      // Replace the first-order phi contribution v with the corrected v0.
      axpy_params(head_grad.views(), bscale, v0.views());
      axpy_params(head_grad.views(), -bscale, v.views());
    }
  }

  const double lr = cfg.effective_outer_lr();
  if (lr != 0.0) {
    axpy_params(enc.views(), -lr, enc_grad.views());
    axpy_params(head.views(), -lr, head_grad.views());
  }
  return StepStats{loss_sum * bscale};
}

struct TrainLog {
  std::vector<double> epoch_losses;  // mean query loss per epoch
  std::vector<double> step_losses;   // mean query loss per outer step
};

/// Epoch loop: shuffles patient order each epoch and walks consecutive
/// batches. Deterministic in cfg.seed.
inline TrainLog meta_train(const Cohort& train, EncoderParams& enc, HeadParams& head,
                           const PeerIndex& index, const MetaConfig& cfg) {
  cfg.validate();
  if (train.patients.empty()) throw DataError("meta_train: empty training cohort");
  TrainLog log;
  Rng order_rng(cfg.seed + 1);
  const std::size_t n = train.patients.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double weighted = 0.0;
    for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const PatientRecord*> batch;
      for (std::size_t i = at; i < std::min(n, at + static_cast<std::size_t>(cfg.batch_size)); ++i)
        batch.push_back(&train.patients[order[i]]);
      const StepStats stats = meta_train_step(batch, enc, head, index, cfg);
      log.step_losses.push_back(stats.mean_query_loss);
      weighted += stats.mean_query_loss * static_cast<double>(batch.size());
    }
    log.epoch_losses.push_back(weighted / static_cast<double>(n));
  }
  return log;
}

/// Meta-testing for one record: filter support visits (when a fitted filter
/// is enabled), self-adapt on the survivors, peer-adapt on retrieved peers,
/// and predict at the last visit. The global parameters are never mutated.
inline Prediction meta_test_predict(const PatientRecord& record, const EncoderParams& enc,
                                    const HeadParams& head, const PeerIndex& index,
                                    const UqFilter* filter, const MetaConfig& cfg,
                                    FilterResult* filter_out = nullptr) {
  if (record.num_visits() < 2) throw DataError("patient needs at least 2 visits");
  const Vec ep = patient_encode(record, enc);
  const int T = record.num_visits();
  std::vector<Vec> support_evs;
  support_evs.reserve(static_cast<std::size_t>(T - 1));
  for (int t = 1; t < T; ++t)
    support_evs.push_back(visit_encode(record.visits[static_cast<std::size_t>(t - 1)], enc));

  FilterResult filt;
  if (filter && filter->enabled) {
    filt = filter_support_visits(support_evs, filter->predictor, filter->threshold);
  } else {
    for (int t = 1; t < T; ++t) filt.retained.push_back(t);
  }
  if (filter_out) *filter_out = filt;

  HeadParams phi1 = head;
  if (cfg.use_self && cfg.alpha != 0.0) {
    detail::SupportSet set;
    set.ep = &ep;
    for (int t : filt.retained)
      set.items.push_back({&support_evs[static_cast<std::size_t>(t - 1)], nullptr,
                           &record.visits[static_cast<std::size_t>(t - 1)].labels});
    HeadParams g = HeadParams::zeros(head.dim(), head.num_medications());
    detail::support_loss_and_grads(set, enc, head, &g);
    phi1 = detail::gradient_step(head, g, cfg.alpha);
  }

  HeadParams phi2 = phi1;
  if (cfg.use_peer && cfg.alpha != 0.0) {
    const auto peers =
        top_similar(index, record.last_visit().codes, record.patient_id, cfg.lambda_peers);
    phi2 = peer_adapt(record, peers, enc, phi1, cfg.alpha);
  }

  const Vec ev = visit_encode(record.last_visit(), enc);
  return predict(ep, ev, phi2);
}

}  // namespace metadrug
