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
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "metadrug/common.hpp"
#include "metadrug/config.hpp"
#include "metadrug/encoder.hpp"
#include "metadrug/head.hpp"
#include "metadrug/uncertainty.hpp"

namespace metadrug {

// Versioned binary archive of named parameter arrays (raw little-endian
// doubles, so round trips are bit-exact), plus the run config text, the
// fitted filter threshold, and a fingerprint of the training data file.

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'M', 'D', 'C', 'K'};

struct ModelBundle {
  EncoderParams encoder;
  HeadParams head;
  UqFilter uq;
  RunConfig config;
  std::string config_text;
  std::uint64_t data_fingerprint = 0;
};

namespace detail {

inline void write_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}
inline void write_u32(std::string& out, std::uint32_t v) { write_bytes(out, &v, 4); }
inline void write_u64(std::string& out, std::uint64_t v) { write_bytes(out, &v, 8); }
inline void write_f64(std::string& out, double v) { write_bytes(out, &v, 8); }
inline void write_string(std::string& out, const std::string& s) {
  write_u64(out, s.size());
  out.append(s);
}

struct Reader {
  const std::string& buf;
  std::size_t at = 0;

  void read_bytes(void* p, std::size_t n) {
    if (at + n > buf.size()) throw DataError("checkpoint truncated");
    std::memcpy(p, buf.data() + at, n);
    at += n;
  }
  std::uint32_t read_u32() {
    std::uint32_t v;
    read_bytes(&v, 4);
    return v;
  }
  std::uint64_t read_u64() {
    std::uint64_t v;
    read_bytes(&v, 8);
    return v;
  }
  double read_f64() {
    double v;
    read_bytes(&v, 8);
    return v;
  }
  std::string read_string() {
    const std::uint64_t n = read_u64();
    if (at + n > buf.size()) throw DataError("checkpoint truncated");
    std::string s = buf.substr(at, n);
    at += n;
    return s;
  }
};

inline void write_arrays(std::string& out, const std::vector<ParamView>& views) {
  for (const auto& v : views) {
    write_string(out, v.name);
    write_u64(out, static_cast<std::uint64_t>(v.rows));
    write_u64(out, static_cast<std::uint64_t>(v.cols));
    write_bytes(out, v.data, static_cast<std::size_t>(v.size()) * sizeof(double));
  }
}

struct StoredArray {
  Eigen::Index rows = 0, cols = 0;
  std::vector<double> data;
};

inline void copy_arrays(const std::map<std::string, StoredArray>& arrays,
                        const std::vector<ParamView>& views) {
  for (const auto& v : views) {
    const auto it = arrays.find(v.name);
    if (it == arrays.end()) throw DataError("checkpoint is missing array '" + v.name + "'");
    if (it->second.rows != v.rows || it->second.cols != v.cols)
      throw DataError("checkpoint array '" + v.name + "' has unexpected shape");
    std::memcpy(v.data, it->second.data.data(),
                static_cast<std::size_t>(v.size()) * sizeof(double));
  }
}

}  // namespace detail

inline std::string serialize_checkpoint(ModelBundle& bundle) {
  std::string out;
  detail::write_bytes(out, kCheckpointMagic, 4);
  detail::write_u32(out, kCheckpointVersion);
  detail::write_string(out, bundle.config_text);
  detail::write_u64(out, bundle.data_fingerprint);
  out.push_back(bundle.uq.enabled ? 1 : 0);
  out.push_back(static_cast<char>(bundle.uq.method));
  detail::write_f64(out, bundle.uq.threshold.gamma);
  detail::write_f64(out, bundle.uq.threshold.beta);

  std::vector<ParamView> views = bundle.encoder.views();
  for (auto& v : bundle.head.views()) views.push_back(v);
  if (bundle.uq.enabled)
    for (auto& v : bundle.uq.predictor.views()) views.push_back(v);
  detail::write_u32(out, static_cast<std::uint32_t>(views.size()));
  detail::write_arrays(out, views);
  return out;
}

inline void save_checkpoint(ModelBundle& bundle, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "' for writing");
  const std::string bytes = serialize_checkpoint(bundle);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint '" + path + "'");
}

inline ModelBundle deserialize_checkpoint(const std::string& bytes) {
  detail::Reader r{bytes};
  char magic[4];
  r.read_bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("not a checkpoint file");
  const std::uint32_t version = r.read_u32();
  if (version != kCheckpointVersion)
    throw ConfigError("checkpoint version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  ModelBundle bundle;
  bundle.config_text = r.read_string();
  bundle.config = parse_run_config_text(bundle.config_text);
  bundle.data_fingerprint = r.read_u64();
  char flag, method;
  r.read_bytes(&flag, 1);
  r.read_bytes(&method, 1);
  bundle.uq.enabled = flag != 0;
  bundle.uq.method = static_cast<UqMethod>(method);
  bundle.uq.threshold.gamma = r.read_f64();
  bundle.uq.threshold.beta = r.read_f64();

  const std::uint32_t n_arrays = r.read_u32();
  std::map<std::string, detail::StoredArray> arrays;
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    const std::string name = r.read_string();
    detail::StoredArray a;
    a.rows = static_cast<Eigen::Index>(r.read_u64());
    a.cols = static_cast<Eigen::Index>(r.read_u64());
    a.data.resize(static_cast<std::size_t>(a.rows * a.cols));
    r.read_bytes(a.data.data(), a.data.size() * sizeof(double));
    arrays.emplace(name, std::move(a));
  }

  // Shapes come from the stored arrays themselves.
  const auto emb = arrays.find("encoder.embedding");
  const auto w2 = arrays.find("head.w2");
  const auto ff1 = arrays.find("encoder.patient.ff1");
  if (emb == arrays.end() || w2 == arrays.end() || ff1 == arrays.end())
    throw DataError("checkpoint is missing core arrays");
  const int vocab = static_cast<int>(emb->second.rows);
  const int d = static_cast<int>(emb->second.cols);
  const int H = static_cast<int>(w2->second.rows);
  const int ffn = static_cast<int>(ff1->second.cols);

  bundle.encoder.d = d;
  bundle.encoder.embedding = Mat::Zero(vocab, d);
  bundle.encoder.patient_block = AttentionBlockParams::zeros(d, ffn);
  bundle.encoder.visit_block = AttentionBlockParams::zeros(d, ffn);
  bundle.head = HeadParams::zeros(d, H);
  detail::copy_arrays(arrays, bundle.encoder.views());
  detail::copy_arrays(arrays, bundle.head.views());
  if (bundle.uq.enabled) {
    bundle.uq.predictor = UqPredictorParams::zeros(d, ffn);
    detail::copy_arrays(arrays, bundle.uq.predictor.views());
  }
  return bundle;
}

inline ModelBundle load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace metadrug
