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
#include <gtest/gtest.h>

#include "metadrug/peer_index.hpp"
#include "test_util.hpp"

namespace metadrug {
namespace {

TEST(JaccardSim, KnownValues) {
  EXPECT_EQ(jaccard_sim({1, 2, 3}, {2, 3, 4}), 0.5);
  EXPECT_EQ(jaccard_sim({1, 2}, {1, 2}), 1.0);
  EXPECT_EQ(jaccard_sim({1, 2}, {3, 4}), 0.0);
  EXPECT_EQ(jaccard_sim({}, {}), 0.0);
  EXPECT_EQ(jaccard_sim({}, {1}), 0.0);
}

TEST(JaccardSim, SymmetricAndOneIffEqual) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> a = rng.sample_indices(12, rng.uniform_int(0, 6));
    std::vector<int> b = rng.sample_indices(12, rng.uniform_int(0, 6));
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(jaccard_sim(a, b), jaccard_sim(b, a));
    if (jaccard_sim(a, b) == 1.0) {
      EXPECT_EQ(a, b);
      EXPECT_FALSE(a.empty());
    }
    if (a == b && !a.empty()) {
      EXPECT_EQ(jaccard_sim(a, b), 1.0);
    }
  }
}

TEST(PeerIndex, OneEntryPerNonFinalVisit) {
  Rng rng(32);
  Cohort c = testutil::random_cohort(rng, 2, 10, 3);
  c.patients[0].visits.resize(3);
  c.patients[0].visits[2].t = 3;
  c.patients[1].visits.resize(2);
  const PeerIndex index = PeerIndex::build(c);
  EXPECT_EQ(index.size(), 3u);  // (3-1) + (2-1)
  for (const auto& e : index.entries) {
    const auto& owner = e.patient_id == c.patients[0].patient_id ? c.patients[0] : c.patients[1];
    EXPECT_LT(e.visit_t, owner.num_visits());
  }
}

TEST(PeerIndex, RebuildIsIdentical) {
  Rng rng(33);
  const Cohort c = testutil::random_cohort(rng, 8, 10, 3);
  const PeerIndex a = PeerIndex::build(c);
  const PeerIndex b = PeerIndex::build(c);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.entries[i].patient_id, b.entries[i].patient_id);
    EXPECT_EQ(a.entries[i].visit_t, b.entries[i].visit_t);
    EXPECT_EQ(a.entries[i].codes, b.entries[i].codes);
  }
}

TEST(PeerIndex, EmptyCohortGivesEmptyIndexAndQueriesError) {
  Cohort c;
  c.num_medications = 2;
  const PeerIndex index = PeerIndex::build(c);
  EXPECT_EQ(index.size(), 0u);
  EXPECT_THROW(top_similar(index, {1}, "x", 1), DataError);
}

TEST(PeerIndexCache, RoundTripsAndValidatesSchema) {
  Rng rng(35);
  const Cohort c = testutil::random_cohort(rng, 6, 10, 3);
  const PeerIndex index = PeerIndex::build(c);
  const std::string path = ::testing::TempDir() + "peer_index_cache.jsonl";
  save_peer_index(index, c.num_medications, path);
  const PeerIndex loaded = load_peer_index(path, c.num_medications);
  ASSERT_EQ(loaded.size(), index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    EXPECT_EQ(loaded.entries[i].patient_id, index.entries[i].patient_id);
    EXPECT_EQ(loaded.entries[i].visit_t, index.entries[i].visit_t);
    EXPECT_EQ(loaded.entries[i].codes, index.entries[i].codes);
    EXPECT_EQ(loaded.entries[i].labels, index.entries[i].labels);
  }
  // wrong medication space is rejected
  EXPECT_THROW(load_peer_index(path, c.num_medications + 1), DataError);
  // wrong schema version is rejected
  const std::string text = peer_index_to_jsonl(index, c.num_medications);
  const std::string bumped =
      "{\"H\":3,\"schema_version\":99}" + text.substr(text.find('\n'));
  EXPECT_THROW(parse_peer_index_jsonl(bumped, c.num_medications), DataError);
}

TEST(TopSimilar, OrderedBySimilarity) {
  PeerIndex index;
  index.entries.push_back({"a", 1, {1, 2}, {1}});      // sim 1.0
  index.entries.push_back({"b", 1, {1, 2, 3, 4}, {1}}); // sim 0.5
  index.entries.push_back({"c", 1, {5, 6}, {1}});      // sim 0.0
  const auto top = top_similar(index, {1, 2}, "zzz", 2);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].patient_id, "a");
  EXPECT_EQ(top[1].patient_id, "b");
}

TEST(TopSimilar, LambdaLargerThanCandidates) {
  PeerIndex index;
  index.entries.push_back({"a", 1, {1}, {1}});
  index.entries.push_back({"b", 1, {2}, {1}});
  const auto top = top_similar(index, {1}, "none", 10);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].patient_id, "a");
}

TEST(TopSimilar, AllCandidatesExcludedThrows) {
  PeerIndex index;
  index.entries.push_back({"a", 1, {1}, {1}});
  index.entries.push_back({"a", 2, {2}, {1}});
  EXPECT_THROW(top_similar(index, {1}, "a", 1), DataError);
}

TEST(TopSimilar, TieBreakByPatientIdThenVisit) {
  PeerIndex index;
  index.entries.push_back({"b", 2, {1, 2}, {1}});
  index.entries.push_back({"b", 1, {1, 2}, {1}});
  index.entries.push_back({"a", 3, {1, 2}, {1}});
  const auto top = top_similar(index, {1, 2}, "x", 3);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].patient_id, "a");
  EXPECT_EQ(top[1].patient_id, "b");
  EXPECT_EQ(top[1].visit_t, 1);
  EXPECT_EQ(top[2].visit_t, 2);
}

// Brute-force oracle: full sort of every candidate under the documented
// tie-break must agree exactly with top_similar for random queries.
TEST(TopSimilar, MatchesExhaustiveOracle) {
  Rng rng(34);
  for (int trial = 0; trial < 120; ++trial) {
    const int n_entries = rng.uniform_int(1, 40);
    PeerIndex index;
    for (int i = 0; i < n_entries; ++i) {
      VisitRef ref;
      ref.patient_id = "p" + std::to_string(rng.uniform_int(0, 7));
      ref.visit_t = rng.uniform_int(1, 4);
      ref.codes = rng.sample_indices(10, rng.uniform_int(1, 5));
      std::sort(ref.codes.begin(), ref.codes.end());
      ref.labels = {1};
      index.entries.push_back(std::move(ref));
    }
    std::vector<int> query = rng.sample_indices(10, rng.uniform_int(1, 5));
    std::sort(query.begin(), query.end());
    const std::string exclude = "p" + std::to_string(rng.uniform_int(0, 7));
    const int lambda = rng.uniform_int(1, 6);

    struct Row {
      double sim;
      std::string id;
      int t;
    };
    std::vector<Row> oracle;
    for (const auto& e : index.entries) {
      if (e.patient_id == exclude) continue;
      oracle.push_back({jaccard_sim(query, e.codes), e.patient_id, e.visit_t});
    }
    if (oracle.empty()) {
      EXPECT_THROW(top_similar(index, query, exclude, lambda), DataError);
      continue;
    }
    std::sort(oracle.begin(), oracle.end(), [](const Row& a, const Row& b) {
      if (a.sim != b.sim) return a.sim > b.sim;
      if (a.id != b.id) return a.id < b.id;
      return a.t < b.t;
    });
    const auto got = top_similar(index, query, exclude, lambda);
    ASSERT_EQ(got.size(), std::min<std::size_t>(oracle.size(), static_cast<std::size_t>(lambda)));
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].patient_id, oracle[i].id) << trial << " rank " << i;
      EXPECT_EQ(got[i].visit_t, oracle[i].t);
      EXPECT_NE(got[i].patient_id, exclude);
    }
  }
}

}  // namespace
}  // namespace metadrug
