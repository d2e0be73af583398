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

#include <string>
#include <vector>

#include "metadrug/attention.hpp"
#include "metadrug/common.hpp"
#include "metadrug/ehr.hpp"

namespace metadrug {

/// The frozen-during-adaptation parameter set: code embedding table plus one
/// encoder block for the patient level and one for the visit level.
struct EncoderParams {
  Mat embedding;  // vocab x d
  AttentionBlockParams patient_block;
  AttentionBlockParams visit_block;
  int d = 0;

  static EncoderParams init(int vocab, int d, Rng& rng) {
    EncoderParams p;
    p.d = d;
    p.embedding.resize(vocab, d);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (Eigen::Index i = 0; i < p.embedding.size(); ++i)
      p.embedding.data()[i] = rng.uniform(-bound, bound);
    p.patient_block = AttentionBlockParams::init(d, rng);
    p.visit_block = AttentionBlockParams::init(d, rng);
    return p;
  }

  static EncoderParams zeros_like(const EncoderParams& other) {
    EncoderParams p;
    p.d = other.d;
    p.embedding = Mat::Zero(other.embedding.rows(), other.embedding.cols());
    p.patient_block = AttentionBlockParams::zeros(other.d, other.patient_block.ffn_dim());
    p.visit_block = AttentionBlockParams::zeros(other.d, other.visit_block.ffn_dim());
    return p;
  }

  std::vector<ParamView> views() {
    std::vector<ParamView> out;
    out.push_back({"encoder.embedding", embedding.data(), embedding.rows(), embedding.cols()});
    patient_block.views("encoder.patient.", out);
    visit_block.views("encoder.visit.", out);
    return out;
  }
};

/// Row j of the result is the embedding table row for code_indices[j].
inline Mat embed_codes(const std::vector<int>& code_indices, const EncoderParams& params) {
  Mat out(static_cast<Eigen::Index>(code_indices.size()), params.embedding.cols());
  for (std::size_t j = 0; j < code_indices.size(); ++j) {
    const int idx = code_indices[j];
    if (idx < 0 || idx >= params.embedding.rows())
      throw DataError("code index " + std::to_string(idx) + " out of embedding range");
    out.row(static_cast<Eigen::Index>(j)) = params.embedding.row(idx);
  }
  return out;
}

struct EncodeCache {
  std::vector<int> codes;
  AttentionCache attn;
};

namespace detail {

// Embed, run one block (no padding for single sequences), mean-pool.
inline Vec pooled_encode(const std::vector<int>& codes, const AttentionBlockParams& block,
                         const EncoderParams& params, EncodeCache* cache) {
  if (codes.empty()) throw DataError("cannot encode an empty code sequence");
  const Mat x = embed_codes(codes, params);
  const std::vector<std::uint8_t> mask(codes.size(), 1);
  EncodeCache local;
  EncodeCache& c = cache ? *cache : local;
  c.codes = codes;
  const Mat out = attention_block(x, block, mask, &c.attn);
  return out.colwise().mean().transpose();
}

}  // namespace detail

/// Averaged embedding of every code across the whole history (all visits,
/// flattened in visit order), via the patient block.
inline Vec patient_encode(const PatientRecord& record, const EncoderParams& params,
                          EncodeCache* cache = nullptr) {
  std::vector<int> codes;
  for (const auto& v : record.visits) codes.insert(codes.end(), v.codes.begin(), v.codes.end());
  return detail::pooled_encode(codes, params.patient_block, params, cache);
}

inline Vec visit_encode_codes(const std::vector<int>& codes, const EncoderParams& params,
                              EncodeCache* cache = nullptr) {
  return detail::pooled_encode(codes, params.visit_block, params, cache);
}

/// Averaged embedding of one visit's codes via the visit block.
inline Vec visit_encode(const Visit& visit, const EncoderParams& params,
                        EncodeCache* cache = nullptr) {
  return visit_encode_codes(visit.codes, params, cache);
}

/// Backprop from a pooled embedding gradient into the given block's gradient
/// and the embedding table gradient.
inline void pooled_encode_backward(const Vec& d_pooled, const EncodeCache& cache,
                                   const AttentionBlockParams& block,
                                   AttentionBlockParams& d_block, Mat& d_embedding) {
  const Eigen::Index n = static_cast<Eigen::Index>(cache.codes.size());
  Mat d_out(n, d_pooled.size());
  const Vec per_row = d_pooled / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) d_out.row(i) = per_row.transpose();
  const Mat dx = attention_block_backward(d_out, cache.attn, block, d_block);
  for (Eigen::Index i = 0; i < n; ++i)
    d_embedding.row(cache.codes[static_cast<std::size_t>(i)]) += dx.row(i);
}

}  // namespace metadrug
