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

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "metadrug/checkpoint.hpp"
#include "metadrug/config.hpp"
#include "metadrug/ehr.hpp"
#include "metadrug/encoder.hpp"
#include "metadrug/head.hpp"
#include "metadrug/meta.hpp"
#include "metadrug/metrics.hpp"
#include "metadrug/peer_index.hpp"
#include "metadrug/svgplot.hpp"
#include "metadrug/uncertainty.hpp"

namespace metadrug {

// Experiment orchestration: each CLI stage is a function over files, so
// pipelines are testable without a shell. Every command is deterministic
// given (config, seed, checkpoint).

struct EvalFlags {
  bool no_filter = false;
  bool no_self = false;
  bool no_peer = false;
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open file '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw DataError("failed writing '" + path + "'");
}

inline double round6(double v) { return std::round(v * 1e6) / 1e6; }

inline std::string hash_hex(std::uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detail

/// Exclusive-create lockfile; no two commands may write one output directory
/// concurrently. Released on scope exit.
class OutputLock {
 public:
  explicit OutputLock(const std::string& dir) {
    std::filesystem::create_directories(dir);
    path_ = dir + "/.lock";
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw DataError("output directory '" + dir +
                      "' is locked (stale .lock from a crashed run? remove it)");
  }
  ~OutputLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  int fd_ = -1;
  std::string path_;
};

struct LoadedData {
  Cohort full;
  Cohort train;
  Cohort test;
  std::uint64_t fingerprint = 0;
};

inline std::string cohort_path(const std::string& data_dir) { return data_dir + "/cohort.jsonl"; }

inline LoadedData load_split_data(const std::string& data_dir, const RunConfig& cfg) {
  LoadedData data;
  const std::string path = cohort_path(data_dir);
  const std::string bytes = detail::read_file(path);
  data.fingerprint = fnv1a64(bytes);
  data.full = parse_cohort_jsonl(bytes);
  const std::string ddi_path = ddi_sidecar_path(path);
  if (std::filesystem::exists(ddi_path))
    data.full.ddi = parse_ddi_text(detail::read_file(ddi_path), data.full.num_medications);
  else
    data.full.ddi = DdiGraph(data.full.num_medications);
  auto [train, test] = split_cohort(data.full, cfg.train_frac, cfg.split_seed);
  data.train = std::move(train);
  data.test = std::move(test);
  return data;
}

struct TrainedModel {
  ModelBundle bundle;
  TrainLog log;
};

/// Meta-training followed by the UQ fitting stage. Ensemble scoring trains
/// extra models with different initialization seeds; those are used only to
/// compute uncertainty targets.
inline TrainedModel train_model(const Cohort& train_cohort, const RunConfig& cfg,
                                std::uint64_t data_fingerprint) {
  cfg.validate();
  TrainedModel out;
  const int d = cfg.model_d;
  const int H = train_cohort.num_medications;
  const int vocab = train_cohort.vocab_size();
  const PeerIndex index = PeerIndex::build(train_cohort);

  Rng init_rng(cfg.meta.seed);
  out.bundle.encoder = EncoderParams::init(vocab, d, init_rng);
  out.bundle.head = HeadParams::init(d, H, init_rng);
  out.log = meta_train(train_cohort, out.bundle.encoder, out.bundle.head, index, cfg.meta);

  if (cfg.uq.method != UqMethod::none) {
    std::vector<std::pair<EncoderParams, HeadParams>> extras;
    if (cfg.uq.method == UqMethod::ensemble) {
      for (int i = 1; i < cfg.uq.ensemble_size; ++i) {
        MetaConfig mc = cfg.meta;
        mc.seed = cfg.meta.seed + 1000 * static_cast<std::uint64_t>(i);
        Rng extra_rng(mc.seed);
        EncoderParams enc_i = EncoderParams::init(vocab, d, extra_rng);
        HeadParams head_i = HeadParams::init(d, H, extra_rng);
        meta_train(train_cohort, enc_i, head_i, index, mc);
        extras.emplace_back(std::move(enc_i), std::move(head_i));
      }
    }
    const UqTrainData targets =
        uq_targets(train_cohort, out.bundle.encoder, out.bundle.head, cfg.uq,
                   extras.empty() ? nullptr : &extras);
    out.bundle.uq.enabled = true;
    out.bundle.uq.method = cfg.uq.method;
    out.bundle.uq.predictor = fit_uq_predictor(targets, d, cfg.uq);
    out.bundle.uq.threshold = fit_threshold(targets.all_targets(), cfg.uq.beta);
  } else {
    out.bundle.uq.enabled = false;
    out.bundle.uq.method = UqMethod::none;
  }

  out.bundle.config = cfg;
  out.bundle.config_text = dump_config(cfg);
  out.bundle.data_fingerprint = data_fingerprint;
  return out;
}

/// Meta-test every patient and compute the four metrics. Flags select the
/// ablation paths at evaluation time.
inline MetricReport evaluate_patients(const std::vector<PatientRecord>& patients,
                                      const ModelBundle& bundle, const PeerIndex& index,
                                      const DdiGraph& ddi, const EvalFlags& flags,
                                      const std::string& label) {
  if (patients.empty()) throw DataError("evaluation subset is empty");
  MetaConfig mc = bundle.config.meta;
  if (flags.no_self) mc.use_self = false;
  if (flags.no_peer) mc.use_peer = false;
  const bool use_filter = bundle.uq.enabled && !flags.no_filter;
  std::vector<LabelVec> truths;
  std::vector<Prediction> preds;
  truths.reserve(patients.size());
  preds.reserve(patients.size());
  for (const auto& p : patients) {
    preds.push_back(meta_test_predict(p, bundle.encoder, bundle.head, index,
                                      use_filter ? &bundle.uq : nullptr, mc));
    truths.push_back(p.last_visit().labels);
  }
  return compute_metrics(truths, preds, ddi, bundle.config.eval_eta, label);
}

inline MetricReport evaluate_model(const ModelBundle& bundle, const Cohort& test,
                                   const PeerIndex& index, const EvalFlags& flags,
                                   const std::string& label) {
  return evaluate_patients(test.patients, bundle, index, test.ddi, flags, label);
}

/// One report per percentile over the nested cold-start subsets of the test
/// cohort. Empty subsets are skipped with a warning (cannot happen for
/// percentiles in (0,100] on a non-empty cohort, but the contract is kept).
inline std::vector<MetricReport> cold_start_curve(const ModelBundle& bundle,
                                                  const Cohort& test, const PeerIndex& index,
                                                  const std::vector<double>& percentiles,
                                                  const EvalFlags& flags = {}) {
  std::vector<MetricReport> reports;
  for (double p : percentiles) {
    const auto subset = cold_start_subset(test, p);
    if (subset.empty()) {
      std::cerr << "warning: cold-start subset at percentile " << p << " is empty, skipped\n";
      continue;
    }
    char label[32];
    std::snprintf(label, sizeof(label), "p%g", p);
    reports.push_back(evaluate_patients(subset, bundle, index, test.ddi, flags, label));
  }
  return reports;
}

/// The five ablation variants, trained and evaluated under a shared seed.
/// "full" and "no_uf" share one trained model (filtering only acts at test
/// time); the three adaptation ablations train without the UQ stage.
inline std::vector<MetricReport> ablation_suite(const Cohort& train, const Cohort& test,
                                                const RunConfig& cfg,
                                                std::uint64_t data_fingerprint = 0) {
  const PeerIndex index = PeerIndex::build(train);
  std::vector<MetricReport> reports;

  const TrainedModel full = train_model(train, cfg, data_fingerprint);
  reports.push_back(evaluate_model(full.bundle, test, index, {}, "full"));
  reports.push_back(
      evaluate_model(full.bundle, test, index, {.no_filter = true}, "no_uf"));

  auto ablated = [&](bool use_self, bool use_peer, const std::string& label) {
    RunConfig vc = cfg;
    vc.meta.use_self = use_self;
    vc.meta.use_peer = use_peer;
    vc.uq.method = UqMethod::none;
    const TrainedModel tm = train_model(train, vc, data_fingerprint);
    reports.push_back(evaluate_model(tm.bundle, test, index, {}, label));
  };
  ablated(false, true, "peer_only");
  ablated(true, false, "self_only");
  ablated(false, false, "none");
  return reports;
}

// --- JSON / file emission --------------------------------------------------

inline nlohmann::json report_json(const MetricReport& r) {
  nlohmann::json j;
  j["prauc"] = detail::round6(r.prauc);
  j["f1"] = detail::round6(r.f1);
  j["jaccard"] = detail::round6(r.jaccard);
  j["ddi"] = detail::round6(r.ddi);
  j["n_patients"] = r.n_patients;
  j["subset_label"] = r.subset_label;
  return j;
}

inline void check_fingerprint(const ModelBundle& bundle, const LoadedData& data) {
  if (bundle.data_fingerprint != data.fingerprint)
    throw DataError("checkpoint/data mismatch: the data directory does not contain the "
                    "cohort this checkpoint was trained on");
}

inline void cmd_generate(const RunConfig& cfg, const std::string& out_dir) {
  OutputLock lock(out_dir);
  const Cohort cohort = generate_synthetic_cohort(cfg.gen, cfg.data_seed);
  save_cohort(cohort, cohort_path(out_dir));
  std::cerr << "generated " << cohort.patients.size() << " patients -> "
            << cohort_path(out_dir) << "\n";
}

inline void cmd_train(const RunConfig& cfg, const std::string& data_dir,
                      const std::string& out_dir) {
  OutputLock lock(out_dir);
  const LoadedData data = load_split_data(data_dir, cfg);
  TrainedModel tm = train_model(data.train, cfg, data.fingerprint);
  save_checkpoint(tm.bundle, out_dir + "/checkpoint.bin");
  detail::write_file(out_dir + "/effective_config.txt", dump_config(cfg));
  std::string log_text;
  for (std::size_t e = 0; e < tm.log.epoch_losses.size(); ++e) {
    nlohmann::json j;
    j["epoch"] = e + 1;
    j["query_loss"] = tm.log.epoch_losses[e];
    log_text += j.dump();
    log_text.push_back('\n');
  }
  detail::write_file(out_dir + "/training_log.jsonl", log_text);
  std::cerr << "trained " << cfg.meta.epochs << " epoch(s) on " << data.train.patients.size()
            << " patients -> " << out_dir << "/checkpoint.bin\n";
}

inline nlohmann::json cmd_evaluate(const std::string& ckpt_path, const std::string& data_dir,
                                   const EvalFlags& flags, const std::string& out_dir) {
  OutputLock lock(out_dir);
  const ModelBundle bundle = load_checkpoint(ckpt_path);
  const LoadedData data = load_split_data(data_dir, bundle.config);
  check_fingerprint(bundle, data);
  const PeerIndex index = PeerIndex::build(data.train);
  const MetricReport report = evaluate_model(bundle, data.test, index, flags, "full_test");
  nlohmann::json j;
  j["config_hash"] = detail::hash_hex(config_hash(bundle.config));
  j["seed"] = bundle.config.data_seed;
  j["report"] = report_json(report);
  detail::write_file(out_dir + "/metrics.json", j.dump(2) + "\n");
  return j;
}

inline nlohmann::json cmd_coldstart(const std::string& ckpt_path, const std::string& data_dir,
                                    const std::vector<double>& percentiles_override,
                                    const std::string& out_dir) {
  OutputLock lock(out_dir);
  const ModelBundle bundle = load_checkpoint(ckpt_path);
  const LoadedData data = load_split_data(data_dir, bundle.config);
  check_fingerprint(bundle, data);
  const PeerIndex index = PeerIndex::build(data.train);
  const std::vector<double>& percentiles =
      percentiles_override.empty() ? bundle.config.percentiles : percentiles_override;
  const auto reports = cold_start_curve(bundle, data.test, index, percentiles);

  nlohmann::json j;
  j["config_hash"] = detail::hash_hex(config_hash(bundle.config));
  j["seed"] = bundle.config.data_seed;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < reports.size(); ++i) {
    nlohmann::json row = report_json(reports[i]);
    row["percentile"] = percentiles[i];
    rows.push_back(std::move(row));
  }
  j["reports"] = std::move(rows);
  detail::write_file(out_dir + "/coldstart.json", j.dump(2) + "\n");

  std::vector<svg::LinePanel> panels;
  const char* names[4] = {"PRAUC", "F1", "Jaccard", "DDI"};
  for (int m = 0; m < 4; ++m) {
    svg::LinePanel panel;
    panel.title = names[m];
    panel.x_label = "cold-start percentile";
    svg::Series s;
    s.label = "metadrug";
    for (std::size_t i = 0; i < reports.size(); ++i) {
      s.x.push_back(percentiles[i]);
      const MetricReport& r = reports[i];
      s.y.push_back(m == 0 ? r.prauc : m == 1 ? r.f1 : m == 2 ? r.jaccard : r.ddi);
    }
    panel.series.push_back(std::move(s));
    panels.push_back(std::move(panel));
  }
  detail::write_file(out_dir + "/coldstart.svg", svg::render_line_panels(panels));
  return j;
}

inline nlohmann::json cmd_ablate(const RunConfig& cfg, const std::string& data_dir,
                                 const std::string& out_dir) {
  OutputLock lock(out_dir);
  const LoadedData data = load_split_data(data_dir, cfg);
  const auto reports = ablation_suite(data.train, data.test, cfg, data.fingerprint);

  nlohmann::json j;
  j["config_hash"] = detail::hash_hex(config_hash(cfg));
  j["seed"] = cfg.data_seed;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : reports) rows.push_back(report_json(r));
  j["reports"] = std::move(rows);
  detail::write_file(out_dir + "/ablation.json", j.dump(2) + "\n");

  std::vector<svg::BarPanel> panels;
  const char* names[4] = {"PRAUC", "F1", "Jaccard", "DDI"};
  for (int m = 0; m < 4; ++m) {
    svg::BarPanel panel;
    panel.title = names[m];
    for (const auto& r : reports) {
      panel.labels.push_back(r.subset_label);
      panel.values.push_back(m == 0 ? r.prauc : m == 1 ? r.f1 : m == 2 ? r.jaccard : r.ddi);
    }
    panels.push_back(std::move(panel));
  }
  detail::write_file(out_dir + "/ablation.svg", svg::render_bar_panels(panels));
  return j;
}

/// One row per patient: id, cold-start flag (lowest 20th percentile by code
/// count), the raw patient embedding, and the gated embedding after full
/// adaptation of the head.
inline void cmd_export_embeddings(const std::string& ckpt_path, const std::string& data_dir,
                                  const std::string& out_file) {
  const ModelBundle bundle = load_checkpoint(ckpt_path);
  const LoadedData data = load_split_data(data_dir, bundle.config);
  check_fingerprint(bundle, data);
  const PeerIndex index = PeerIndex::build(data.train);
  const MetaConfig& mc = bundle.config.meta;

  std::set<std::string> cold_ids;
  for (const auto& p : cold_start_subset(data.full, 20.0)) cold_ids.insert(p.patient_id);

  const int d = bundle.encoder.d;
  std::ostringstream os;
  os.precision(17);
  os << "patient_id\tcold_start";
  for (int i = 0; i < d; ++i) os << "\tpre_" << i;
  for (int i = 0; i < d; ++i) os << "\tpost_" << i;
  os << "\n";
  for (const auto& p : data.full.patients) {
    const Vec ep = patient_encode(p, bundle.encoder);

    // Recreate the meta-test adaptation to obtain the personalized gate.
    std::vector<Vec> support_evs;
    for (int t = 1; t < p.num_visits(); ++t)
      support_evs.push_back(visit_encode(p.visits[static_cast<std::size_t>(t - 1)], bundle.encoder));
    FilterResult filt;
    if (bundle.uq.enabled) {
      filt = filter_support_visits(support_evs, bundle.uq.predictor, bundle.uq.threshold);
    } else {
      for (int t = 1; t < p.num_visits(); ++t) filt.retained.push_back(t);
    }
    HeadParams phi1 = mc.use_self ? self_adapt(p, bundle.encoder, bundle.head, mc.alpha, &filt.retained)
                                  : bundle.head;
    HeadParams phi2 = phi1;
    if (mc.use_peer && mc.alpha != 0.0) {
      const auto peers = top_similar(index, p.last_visit().codes, p.patient_id, mc.lambda_peers);
      phi2 = peer_adapt(p, peers, bundle.encoder, phi1, mc.alpha);
    }
    const Vec g = gate(ep, phi2);
    const Vec post = g.cwiseProduct(ep);

    os << p.patient_id << "\t" << (cold_ids.count(p.patient_id) ? 1 : 0);
    for (int i = 0; i < d; ++i) os << "\t" << ep[i];
    for (int i = 0; i < d; ++i) os << "\t" << post[i];
    os << "\n";
  }
  detail::write_file(out_file, os.str());
}

}  // namespace metadrug
