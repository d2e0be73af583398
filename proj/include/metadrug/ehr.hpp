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
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "metadrug/common.hpp"

namespace metadrug {

constexpr int kCohortSchemaVersion = 1;

struct MedicalCode {
  enum class Kind { diagnosis, procedure };
  std::string id;
  Kind kind = Kind::diagnosis;
  int index = 0;

  bool operator==(const MedicalCode&) const = default;
};

/// One hospital admission: an (unordered) set of medical-code indices plus
/// the H-length 0/1 medication vector prescribed at that visit. Codes are
/// normalized to sorted-unique order on construction, which gives set
/// semantics to everything downstream.
struct Visit {
  int t = 0;  // 1-based position in the patient's sequence
  std::vector<int> codes;
  std::vector<std::uint8_t> labels;

  void normalize_codes() {
    std::sort(codes.begin(), codes.end());
    codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
  }

  bool operator==(const Visit&) const = default;
};

struct PatientRecord {
  std::string patient_id;
  std::vector<Visit> visits;

  int num_visits() const { return static_cast<int>(visits.size()); }

  int total_code_count() const {
    int n = 0;
    for (const auto& v : visits) n += static_cast<int>(v.codes.size());
    return n;
  }

  const Visit& last_visit() const { return visits.back(); }

  bool operator==(const PatientRecord&) const = default;
};

/// Symmetric drug-drug interaction adjacency with empty diagonal.
struct DdiGraph {
  int n = 0;
  std::vector<std::uint8_t> adj;  // n*n, row-major

  explicit DdiGraph(int size = 0) : n(size), adj(static_cast<std::size_t>(size) * size, 0) {}

  bool edge(int i, int j) const {
    return adj[static_cast<std::size_t>(i) * n + j] != 0;
  }
  void add_edge(int i, int j) {
    if (i == j) return;
    adj[static_cast<std::size_t>(i) * n + j] = 1;
    adj[static_cast<std::size_t>(j) * n + i] = 1;
  }
  std::vector<std::pair<int, int>> edges() const {
    std::vector<std::pair<int, int>> out;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (edge(i, j)) out.emplace_back(i, j);
    return out;
  }

  bool operator==(const DdiGraph&) const = default;
};

struct Cohort {
  std::vector<PatientRecord> patients;
  std::vector<MedicalCode> code_vocab;
  int num_medications = 0;
  DdiGraph ddi;

  int vocab_size() const { return static_cast<int>(code_vocab.size()); }

  bool operator==(const Cohort&) const = default;
};

namespace detail {

inline const char* kind_name(MedicalCode::Kind k) {
  return k == MedicalCode::Kind::diagnosis ? "diagnosis" : "procedure";
}

inline MedicalCode::Kind kind_from_name(const std::string& s, int line_no) {
  if (s == "diagnosis") return MedicalCode::Kind::diagnosis;
  if (s == "procedure") return MedicalCode::Kind::procedure;
  throw DataError("line " + std::to_string(line_no) + ": unknown code kind '" + s + "'");
}

}  // namespace detail

/// Validates everything the downstream model relies on: code indices in
/// range, label vectors of length H with 0/1 entries, visit positions
/// contiguous from 1, codes non-empty, ddi graph symmetric with empty
/// diagonal. Patients with fewer than two visits are NOT handled here;
/// loaders drop them before validation.
inline void validate_cohort(const Cohort& c) {
  const int H = c.num_medications;
  const int V = c.vocab_size();
  for (int i = 0; i < V; ++i) {
    if (c.code_vocab[static_cast<std::size_t>(i)].index != i)
      throw DataError("code_vocab index mismatch at position " + std::to_string(i));
  }
  std::set<std::string> seen_ids;
  for (const auto& p : c.patients) {
    if (!seen_ids.insert(p.patient_id).second)
      throw DataError("duplicate patient_id '" + p.patient_id + "'");
    if (p.num_visits() < 2)
      throw DataError("patient '" + p.patient_id + "' has fewer than 2 visits");
    for (int t = 0; t < p.num_visits(); ++t) {
      const Visit& v = p.visits[static_cast<std::size_t>(t)];
      if (v.t != t + 1)
        throw DataError("patient '" + p.patient_id + "': visit positions not contiguous");
      if (v.codes.empty())
        throw DataError("patient '" + p.patient_id + "': empty code set at visit " +
                        std::to_string(v.t));
      for (int code : v.codes)
        if (code < 0 || code >= V)
          throw DataError("patient '" + p.patient_id + "': code index " +
                          std::to_string(code) + " out of range");
      if (static_cast<int>(v.labels.size()) != H)
        throw DataError("patient '" + p.patient_id + "': label length " +
                        std::to_string(v.labels.size()) + " != H=" + std::to_string(H));
      for (auto y : v.labels)
        if (y > 1) throw DataError("patient '" + p.patient_id + "': non-binary label");
    }
  }
  if (c.ddi.n != 0 && c.ddi.n != H) throw DataError("ddi graph size != H");
  for (int i = 0; i < c.ddi.n; ++i) {
    if (c.ddi.edge(i, i)) throw DataError("ddi graph has self-loop");
    for (int j = 0; j < c.ddi.n; ++j)
      if (c.ddi.edge(i, j) != c.ddi.edge(j, i)) throw DataError("ddi graph not symmetric");
  }
}

// --- JSONL serialization -------------------------------------------------
//
// First line is a header object {"schema_version","H","code_vocab"}; each
// following line is one patient. The DDI graph lives in a sidecar file of
// "i j" edge pairs, one per line.

inline std::string ddi_sidecar_path(const std::string& cohort_path) {
  const auto dot = cohort_path.rfind('.');
  const auto slash = cohort_path.rfind('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return cohort_path + ".ddi";
  return cohort_path.substr(0, dot) + ".ddi";
}

inline std::string cohort_to_jsonl(const Cohort& c) {
  nlohmann::json header;
  header["schema_version"] = kCohortSchemaVersion;
  header["H"] = c.num_medications;
  nlohmann::json vocab = nlohmann::json::array();
  for (const auto& code : c.code_vocab) {
    vocab.push_back({{"id", code.id}, {"kind", detail::kind_name(code.kind)}, {"index", code.index}});
  }
  header["code_vocab"] = std::move(vocab);

  std::string out = header.dump();
  out.push_back('\n');
  for (const auto& p : c.patients) {
    nlohmann::json jp;
    jp["patient_id"] = p.patient_id;
    nlohmann::json visits = nlohmann::json::array();
    for (const auto& v : p.visits) {
      nlohmann::json jv;
      jv["t"] = v.t;
      jv["codes"] = v.codes;
      jv["labels"] = v.labels;
      visits.push_back(std::move(jv));
    }
    jp["visits"] = std::move(visits);
    out += jp.dump();
    out.push_back('\n');
  }
  return out;
}

inline std::string ddi_to_text(const DdiGraph& g) {
  std::string out;
  for (const auto& [i, j] : g.edges()) {
    out += std::to_string(i);
    out.push_back(' ');
    out += std::to_string(j);
    out.push_back('\n');
  }
  return out;
}

inline void save_cohort(const Cohort& c, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f << cohort_to_jsonl(c);
  std::ofstream d(ddi_sidecar_path(path), std::ios::binary);
  if (!d) throw DataError("cannot open ddi sidecar for writing");
  d << ddi_to_text(c.ddi);
}

/// Parses a cohort from JSONL text. Patients with fewer than two visits are
/// dropped; the count is reported through `dropped` and logged to stderr.
inline Cohort parse_cohort_jsonl(const std::string& text, int* dropped = nullptr) {
  Cohort c;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  int drop_count = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": JSON parse error: " + e.what());
    }
    try {
      if (!have_header) {
        const int version = j.at("schema_version").get<int>();
        if (version != kCohortSchemaVersion)
          throw DataError("line 1: unsupported schema_version " + std::to_string(version));
        c.num_medications = j.at("H").get<int>();
        for (const auto& jc : j.at("code_vocab")) {
          MedicalCode code;
          code.id = jc.at("id").get<std::string>();
          code.kind = detail::kind_from_name(jc.at("kind").get<std::string>(), line_no);
          code.index = jc.at("index").get<int>();
          c.code_vocab.push_back(std::move(code));
        }
        have_header = true;
        continue;
      }
      PatientRecord p;
      p.patient_id = j.at("patient_id").get<std::string>();
      for (const auto& jv : j.at("visits")) {
        Visit v;
        v.t = jv.at("t").get<int>();
        v.codes = jv.at("codes").get<std::vector<int>>();
        v.labels = jv.at("labels").get<std::vector<std::uint8_t>>();
        v.normalize_codes();
        if (static_cast<int>(v.labels.size()) != c.num_medications)
          throw DataError("line " + std::to_string(line_no) + ": label length " +
                          std::to_string(v.labels.size()) + " != H=" +
                          std::to_string(c.num_medications));
        p.visits.push_back(std::move(v));
      }
      if (p.num_visits() < 2) {
        ++drop_count;
        continue;
      }
      c.patients.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": schema error: " + e.what());
    }
  }
  if (!have_header) throw DataError("cohort file has no header record");
  if (drop_count > 0)
    std::cerr << "note: dropped " << drop_count << " patient(s) with fewer than 2 visits\n";
  if (dropped) *dropped = drop_count;
  validate_cohort(c);
  return c;
}

inline DdiGraph parse_ddi_text(const std::string& text, int H) {
  DdiGraph g(H);
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    int i = -1, j = -1;
    if (!(ls >> i >> j))
      throw DataError("ddi line " + std::to_string(line_no) + ": expected 'i j'");
    if (i < 0 || j < 0 || i >= H || j >= H || i == j)
      throw DataError("ddi line " + std::to_string(line_no) + ": invalid edge");
    g.add_edge(i, j);
  }
  return g;
}

inline Cohort load_cohort(const std::string& path, int* dropped = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open cohort file '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  Cohort c = parse_cohort_jsonl(buf.str(), dropped);
  std::ifstream d(ddi_sidecar_path(path), std::ios::binary);
  if (d) {
    std::stringstream dbuf;
    dbuf << d.rdbuf();
    c.ddi = parse_ddi_text(dbuf.str(), c.num_medications);
  } else {
    c.ddi = DdiGraph(c.num_medications);
  }
  validate_cohort(c);
  return c;
}

// --- Synthetic cohort generation ------------------------------------------
//
// Stand-in for access-restricted clinical data. Patients are drawn from a
// small number of latent phenotypes; a phenotype biases both which codes
// appear in visits and which medications are prescribed, so patients who
// share codes also tend to share medications. Each patient additionally
// carries a couple of "personal" medications that recur across their own
// visits, which is the signal self-adaptation can exploit. A designated
// cold-start fraction of patients gets short, code-poor histories.

struct GeneratorSpec {
  int patients = 300;
  int num_medications = 20;
  int vocab_size = 120;
  int phenotypes = 5;
  double cold_start_fraction = 0.2;
  int visits_min = 2, visits_max = 5;
  int codes_per_visit_min = 3, codes_per_visit_max = 8;
  int cold_visits_min = 2, cold_visits_max = 3;
  int cold_codes_per_visit_min = 1, cold_codes_per_visit_max = 2;
  double ddi_edge_prob = 0.08;
  double phenotype_code_affinity = 0.8;
  double core_med_prob = 0.8;
  double personal_med_prob = 0.9;
  double background_med_prob = 0.05;
  int personal_meds = 2;

  void validate() const {
    if (patients < 1) throw ConfigError("gen.patients must be >= 1");
    if (num_medications < 1) throw ConfigError("gen.medications must be >= 1");
    if (vocab_size < 1) throw ConfigError("gen.vocab must be >= 1");
    if (phenotypes < 1) throw ConfigError("gen.phenotypes must be >= 1");
    if (cold_start_fraction < 0.0 || cold_start_fraction > 1.0)
      throw ConfigError("gen.cold_fraction must be in [0,1]");
    if (visits_min < 2 || cold_visits_min < 2)
      throw ConfigError("visit count minimum must be >= 2");
    if (visits_max < visits_min || cold_visits_max < cold_visits_min)
      throw ConfigError("visit count range is empty");
    if (codes_per_visit_min < 1 || cold_codes_per_visit_min < 1)
      throw ConfigError("codes-per-visit minimum must be >= 1");
    if (codes_per_visit_max < codes_per_visit_min ||
        cold_codes_per_visit_max < cold_codes_per_visit_min)
      throw ConfigError("codes-per-visit range is empty");
    if (codes_per_visit_max > vocab_size || cold_codes_per_visit_max > vocab_size)
      throw ConfigError("codes-per-visit exceeds vocabulary size");
    if (personal_meds > num_medications)
      throw ConfigError("gen.personal_meds exceeds number of medications");
  }
};

struct SyntheticCohort {
  Cohort cohort;
  std::vector<int> phenotype;        // per patient
  std::vector<std::uint8_t> cold;    // per patient, 1 = designated cold-start
};

inline SyntheticCohort generate_synthetic_cohort_detail(const GeneratorSpec& spec,
                                                        std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  SyntheticCohort out;
  Cohort& c = out.cohort;
  c.num_medications = spec.num_medications;

  int diag_count = 0, proc_count = 0;
  for (int i = 0; i < spec.vocab_size; ++i) {
    MedicalCode code;
    code.kind = rng.uniform() < 0.7 ? MedicalCode::Kind::diagnosis
                                    : MedicalCode::Kind::procedure;
    char buf[16];
    if (code.kind == MedicalCode::Kind::diagnosis)
      std::snprintf(buf, sizeof(buf), "D%04d", diag_count++);
    else
      std::snprintf(buf, sizeof(buf), "P%04d", proc_count++);
    code.id = buf;
    code.index = i;
    c.code_vocab.push_back(std::move(code));
  }

  // Phenotype structure: a preferred code pool and a core medication set.
  const int pool_size =
      std::max(spec.codes_per_visit_max, (spec.vocab_size + 4) / 5);
  const int core_size = std::max(2, spec.num_medications / 5);
  std::vector<std::vector<int>> code_pool(static_cast<std::size_t>(spec.phenotypes));
  std::vector<std::vector<std::uint8_t>> is_core(
      static_cast<std::size_t>(spec.phenotypes),
      std::vector<std::uint8_t>(static_cast<std::size_t>(spec.num_medications), 0));
  std::vector<int> first_core(static_cast<std::size_t>(spec.phenotypes), 0);
  for (int k = 0; k < spec.phenotypes; ++k) {
    code_pool[static_cast<std::size_t>(k)] = rng.sample_indices(spec.vocab_size, pool_size);
    const auto core = rng.sample_indices(spec.num_medications, core_size);
    for (int m : core) is_core[static_cast<std::size_t>(k)][static_cast<std::size_t>(m)] = 1;
    first_core[static_cast<std::size_t>(k)] = core.front();
  }

  const int n_cold = static_cast<int>(spec.cold_start_fraction * spec.patients);
  std::vector<int> order(static_cast<std::size_t>(spec.patients));
  for (int i = 0; i < spec.patients; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  std::vector<std::uint8_t> cold_of(static_cast<std::size_t>(spec.patients), 0);
  for (int i = 0; i < n_cold; ++i) cold_of[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;

  for (int i = 0; i < spec.patients; ++i) {
    const bool cold = cold_of[static_cast<std::size_t>(i)] != 0;
    const int k = rng.uniform_int(0, spec.phenotypes - 1);
    PatientRecord p;
    char buf[32];
    std::snprintf(buf, sizeof(buf), cold ? "synth-cold-%04d" : "synth-%04d", i);
    p.patient_id = buf;

    std::vector<std::uint8_t> personal(static_cast<std::size_t>(spec.num_medications), 0);
    for (int m : rng.sample_indices(spec.num_medications, spec.personal_meds))
      personal[static_cast<std::size_t>(m)] = 1;

    const int T = cold ? rng.uniform_int(spec.cold_visits_min, spec.cold_visits_max)
                       : rng.uniform_int(spec.visits_min, spec.visits_max);
    for (int t = 1; t <= T; ++t) {
      Visit v;
      v.t = t;
      const int want = cold ? rng.uniform_int(spec.cold_codes_per_visit_min,
                                              spec.cold_codes_per_visit_max)
                            : rng.uniform_int(spec.codes_per_visit_min,
                                              spec.codes_per_visit_max);
      std::set<int> codes;
      const auto& pool = code_pool[static_cast<std::size_t>(k)];
      while (static_cast<int>(codes.size()) < want) {
        int code;
        if (rng.uniform() < spec.phenotype_code_affinity)
          code = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
        else
          code = rng.uniform_int(0, spec.vocab_size - 1);
        codes.insert(code);
      }
      v.codes.assign(codes.begin(), codes.end());
      v.labels.resize(static_cast<std::size_t>(spec.num_medications), 0);
      bool any = false;
      for (int m = 0; m < spec.num_medications; ++m) {
        double prob = spec.background_med_prob;
        if (is_core[static_cast<std::size_t>(k)][static_cast<std::size_t>(m)]) prob = spec.core_med_prob;
        if (personal[static_cast<std::size_t>(m)]) prob = spec.personal_med_prob;
        const bool on = rng.uniform() < prob;
        v.labels[static_cast<std::size_t>(m)] = on ? 1 : 0;
        any = any || on;
      }
      // Every visit must carry at least one prescription.
      if (!any) v.labels[static_cast<std::size_t>(first_core[static_cast<std::size_t>(k)])] = 1;
      p.visits.push_back(std::move(v));
    }
    c.patients.push_back(std::move(p));
    out.phenotype.push_back(k);
    out.cold.push_back(cold ? 1 : 0);
  }

  c.ddi = DdiGraph(spec.num_medications);
  for (int i = 0; i < spec.num_medications; ++i)
    for (int j = i + 1; j < spec.num_medications; ++j)
      if (rng.uniform() < spec.ddi_edge_prob) c.ddi.add_edge(i, j);

  validate_cohort(c);
  return out;
}

inline Cohort generate_synthetic_cohort(const GeneratorSpec& spec, std::uint64_t seed) {
  return generate_synthetic_cohort_detail(spec, seed).cohort;
}

/// Deterministic disjoint split; both sides share the vocabulary and DDI
/// graph. Patient order within each side follows the input cohort.
inline std::pair<Cohort, Cohort> split_cohort(const Cohort& cohort, double train_frac,
                                              std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0))
    throw ConfigError("train_frac must be in (0,1)");
  const int n = static_cast<int>(cohort.patients.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const int n_train = static_cast<int>(train_frac * n);
  std::vector<std::uint8_t> in_train(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n_train; ++i) in_train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;

  Cohort train, test;
  train.code_vocab = test.code_vocab = cohort.code_vocab;
  train.num_medications = test.num_medications = cohort.num_medications;
  train.ddi = test.ddi = cohort.ddi;
  for (int i = 0; i < n; ++i) {
    if (in_train[static_cast<std::size_t>(i)])
      train.patients.push_back(cohort.patients[static_cast<std::size_t>(i)]);
    else
      test.patients.push_back(cohort.patients[static_cast<std::size_t>(i)]);
  }
  return {std::move(train), std::move(test)};
}

/// Patients whose total code count is <= the nearest-rank p-th percentile of
/// the cohort's per-patient counts, sorted ascending by (count, patient_id).
inline std::vector<PatientRecord> cold_start_subset(const Cohort& cohort, double percentile) {
  if (cohort.patients.empty()) throw DataError("cold_start_subset of empty cohort");
  if (!(percentile > 0.0 && percentile <= 100.0))
    throw ConfigError("percentile must be in (0,100]");
  std::vector<int> counts;
  counts.reserve(cohort.patients.size());
  for (const auto& p : cohort.patients) counts.push_back(p.total_code_count());
  std::vector<int> sorted = counts;
  std::sort(sorted.begin(), sorted.end());
  const int cutoff = sorted[nearest_rank_index(sorted.size(), percentile)];

  std::vector<PatientRecord> out;
  for (const auto& p : cohort.patients)
    if (p.total_code_count() <= cutoff) out.push_back(p);
  std::sort(out.begin(), out.end(), [](const PatientRecord& a, const PatientRecord& b) {
    const int ca = a.total_code_count(), cb = b.total_code_count();
    if (ca != cb) return ca < cb;
    return a.patient_id < b.patient_id;
  });
  return out;
}

}  // namespace metadrug
