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
#include <string>
#include <vector>

#include "metadrug/common.hpp"
#include "metadrug/ehr.hpp"

namespace metadrug {

/// One candidate support visit from a training patient. Last visits are never
/// candidates (visit_t < the owner's visit count).
struct VisitRef {
  std::string patient_id;
  int visit_t = 0;
  std::vector<int> codes;  // sorted unique
  std::vector<std::uint8_t> labels;
};

/// |a n b| / |a u b| over sorted-unique index sets; 0 when both are empty.
inline double jaccard_sim(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Exhaustive-scan similarity index over all eligible support visits of the
/// training cohort. Immutable after build; entries follow cohort order. An
/// empty cohort yields an empty index (queries against it fail).
struct PeerIndex {
  std::vector<VisitRef> entries;

  static PeerIndex build(const Cohort& train) {
    PeerIndex index;
    for (const auto& p : train.patients) {
      for (int m = 1; m < p.num_visits(); ++m) {  // visits 1..T-1
        const Visit& v = p.visits[static_cast<std::size_t>(m - 1)];
        index.entries.push_back(VisitRef{p.patient_id, v.t, v.codes, v.labels});
      }
    }
    return index;
  }

  std::size_t size() const { return entries.size(); }
};

// On-disk cache of the index: a header line with the cohort schema version
// and H, then one VisitRef per line. Purely an avoid-rebuild convenience;
// the cache must match the cohort's schema version to load.

inline std::string peer_index_to_jsonl(const PeerIndex& index, int num_medications) {
  nlohmann::json header;
  header["schema_version"] = kCohortSchemaVersion;
  header["H"] = num_medications;
  std::string out = header.dump();
  out.push_back('\n');
  for (const auto& e : index.entries) {
    nlohmann::json j;
    j["patient_id"] = e.patient_id;
    j["visit_t"] = e.visit_t;
    j["codes"] = e.codes;
    j["labels"] = e.labels;
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

inline void save_peer_index(const PeerIndex& index, int num_medications,
                            const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open peer index cache '" + path + "' for writing");
  f << peer_index_to_jsonl(index, num_medications);
}

inline PeerIndex parse_peer_index_jsonl(const std::string& text, int expected_medications) {
  PeerIndex index;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("peer index line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (!have_header) {
        const int version = j.at("schema_version").get<int>();
        if (version != kCohortSchemaVersion)
          throw DataError("peer index cache schema_version " + std::to_string(version) +
                          " does not match cohort schema " +
                          std::to_string(kCohortSchemaVersion));
        if (j.at("H").get<int>() != expected_medications)
          throw DataError("peer index cache was built for a different medication space");
        have_header = true;
        continue;
      }
      VisitRef ref;
      ref.patient_id = j.at("patient_id").get<std::string>();
      ref.visit_t = j.at("visit_t").get<int>();
      ref.codes = j.at("codes").get<std::vector<int>>();
      ref.labels = j.at("labels").get<std::vector<std::uint8_t>>();
      if (static_cast<int>(ref.labels.size()) != expected_medications)
        throw DataError("peer index line " + std::to_string(line_no) + ": bad label length");
      index.entries.push_back(std::move(ref));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("peer index line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw DataError("peer index cache has no header record");
  return index;
}

inline PeerIndex load_peer_index(const std::string& path, int expected_medications) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open peer index cache '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_peer_index_jsonl(buf.str(), expected_medications);
}

/// Top-lambda entries by Jaccard similarity to the query code set, skipping
/// the excluded patient. Ties break by (higher similarity, lexicographic
/// patient_id, smaller visit_t). Returns fewer than lambda only when fewer
/// candidates exist; zero candidates is a retrieval error.
inline std::vector<VisitRef> top_similar(const PeerIndex& index,
                                         const std::vector<int>& query_codes,
                                         const std::string& exclude_patient, int lambda) {
  if (lambda < 1) throw ConfigError("lambda must be >= 1");
  struct Scored {
    double sim;
    const VisitRef* ref;
  };
  std::vector<Scored> candidates;
  candidates.reserve(index.entries.size());
  for (const auto& e : index.entries) {
    if (e.patient_id == exclude_patient) continue;
    candidates.push_back({jaccard_sim(query_codes, e.codes), &e});
  }
  if (candidates.empty())
    throw DataError("peer retrieval found no candidate visits after exclusion");
  const auto cmp = [](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    if (a.ref->patient_id != b.ref->patient_id) return a.ref->patient_id < b.ref->patient_id;
    return a.ref->visit_t < b.ref->visit_t;
  };
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(lambda), candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                    candidates.end(), cmp);
  std::vector<VisitRef> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(*candidates[i].ref);
  return out;
}

}  // namespace metadrug
