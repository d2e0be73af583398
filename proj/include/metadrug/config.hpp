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
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "metadrug/common.hpp"
#include "metadrug/ehr.hpp"
#include "metadrug/meta.hpp"
#include "metadrug/uncertainty.hpp"

namespace metadrug {

// Flat, sectioned key-value run configuration ("section.key = value" lines,
// '#' comments). Unknown keys are rejected so that typos fail loudly instead
// of silently running defaults.

struct RunConfig {
  GeneratorSpec gen;
  std::uint64_t data_seed = 7;
  double train_frac = 0.8;
  std::uint64_t split_seed = 7;
  bool split_seed_set = false;  // tracks whether data.split_seed was explicit
  int model_d = 256;
  int heads = 1;
  MetaConfig meta;
  UqConfig uq;
  double eval_eta = 0.3;
  std::vector<double> percentiles = {10, 20, 30, 40, 50};

  void validate() const {
    gen.validate();
    meta.validate();
    if (model_d < 1) throw ConfigError("model.d must be >= 1");
    if (heads != 1) throw ConfigError("model.heads must be 1");
    if (!(train_frac > 0.0 && train_frac < 1.0))
      throw ConfigError("data.train_frac must be in (0,1)");
    if (eval_eta < 0.0 || eval_eta > 1.0) throw ConfigError("eval.eta must be in [0,1]");
    if (percentiles.empty()) throw ConfigError("eval.percentiles must not be empty");
    for (double p : percentiles)
      if (!(p > 0.0 && p <= 100.0)) throw ConfigError("eval.percentiles entries must be in (0,100]");
    if (!(uq.beta > 0.0 && uq.beta < 100.0)) throw ConfigError("uq.beta must be in (0,100)");
    if (uq.dropout_passes < 2) throw ConfigError("uq.passes must be >= 2");
    if (uq.dropout_rate < 0.0 || uq.dropout_rate >= 1.0)
      throw ConfigError("uq.dropout_rate must be in [0,1)");
    if (uq.ensemble_size < 2) throw ConfigError("uq.ensemble must be >= 2");
    if (uq.fit_epochs < 0) throw ConfigError("uq.epochs must be >= 0");
    if (uq.fit_lr <= 0.0) throw ConfigError("uq.lr must be > 0");
    if (meta.outer_lr >= 0.0 && meta.outer_lr > 10.0)
      throw ConfigError("meta.outer_lr looks implausible (> 10)");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline int to_int(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (...) {
    throw ConfigError("key '" + key + "': expected integer, got '" + v + "'");
  }
}

inline std::uint64_t to_u64(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return static_cast<std::uint64_t>(x);
  } catch (...) {
    throw ConfigError("key '" + key + "': expected unsigned integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (...) {
    throw ConfigError("key '" + key + "': expected number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<double> to_double_list(const std::string& v, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) continue;
    out.push_back(to_double(part, key));
  }
  if (out.empty()) throw ConfigError("key '" + key + "': empty list");
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::to_bool;
  using detail::to_double;
  using detail::to_double_list;
  using detail::to_int;
  using detail::to_u64;
  if (key == "data.seed") cfg.data_seed = to_u64(value, key);
  else if (key == "data.train_frac") cfg.train_frac = to_double(value, key);
  else if (key == "data.split_seed") { cfg.split_seed = to_u64(value, key); cfg.split_seed_set = true; }
  else if (key == "gen.patients") cfg.gen.patients = to_int(value, key);
  else if (key == "gen.medications") cfg.gen.num_medications = to_int(value, key);
  else if (key == "gen.vocab") cfg.gen.vocab_size = to_int(value, key);
  else if (key == "gen.phenotypes") cfg.gen.phenotypes = to_int(value, key);
  else if (key == "gen.cold_fraction") cfg.gen.cold_start_fraction = to_double(value, key);
  else if (key == "gen.visits_min") cfg.gen.visits_min = to_int(value, key);
  else if (key == "gen.visits_max") cfg.gen.visits_max = to_int(value, key);
  else if (key == "gen.codes_min") cfg.gen.codes_per_visit_min = to_int(value, key);
  else if (key == "gen.codes_max") cfg.gen.codes_per_visit_max = to_int(value, key);
  else if (key == "gen.cold_visits_min") cfg.gen.cold_visits_min = to_int(value, key);
  else if (key == "gen.cold_visits_max") cfg.gen.cold_visits_max = to_int(value, key);
  else if (key == "gen.cold_codes_min") cfg.gen.cold_codes_per_visit_min = to_int(value, key);
  else if (key == "gen.cold_codes_max") cfg.gen.cold_codes_per_visit_max = to_int(value, key);
  else if (key == "gen.ddi_edge_prob") cfg.gen.ddi_edge_prob = to_double(value, key);
  else if (key == "gen.code_affinity") cfg.gen.phenotype_code_affinity = to_double(value, key);
  else if (key == "gen.core_med_prob") cfg.gen.core_med_prob = to_double(value, key);
  else if (key == "gen.personal_med_prob") cfg.gen.personal_med_prob = to_double(value, key);
  else if (key == "gen.background_med_prob") cfg.gen.background_med_prob = to_double(value, key);
  else if (key == "gen.personal_meds") cfg.gen.personal_meds = to_int(value, key);
  else if (key == "model.d") cfg.model_d = to_int(value, key);
  else if (key == "model.heads") cfg.heads = to_int(value, key);
  else if (key == "meta.alpha") cfg.meta.alpha = to_double(value, key);
  else if (key == "meta.outer_lr") cfg.meta.outer_lr = (value == "auto") ? -1.0 : to_double(value, key);
  else if (key == "meta.lambda") cfg.meta.lambda_peers = to_int(value, key);
  else if (key == "meta.batch_size") cfg.meta.batch_size = to_int(value, key);
  else if (key == "meta.epochs") cfg.meta.epochs = to_int(value, key);
  else if (key == "meta.first_order") cfg.meta.first_order = to_bool(value, key);
  else if (key == "meta.use_self") cfg.meta.use_self = to_bool(value, key);
  else if (key == "meta.use_peer") cfg.meta.use_peer = to_bool(value, key);
  else if (key == "meta.seed") cfg.meta.seed = to_u64(value, key);
  else if (key == "uq.method") cfg.uq.method = uq_method_from_name(value);
  else if (key == "uq.beta") cfg.uq.beta = to_double(value, key);
  else if (key == "uq.passes") cfg.uq.dropout_passes = to_int(value, key);
  else if (key == "uq.dropout_rate") cfg.uq.dropout_rate = to_double(value, key);
  else if (key == "uq.ensemble") cfg.uq.ensemble_size = to_int(value, key);
  else if (key == "uq.epochs") cfg.uq.fit_epochs = to_int(value, key);
  else if (key == "uq.lr") cfg.uq.fit_lr = to_double(value, key);
  else if (key == "uq.seed") cfg.uq.seed = to_u64(value, key);
  else if (key == "eval.eta") cfg.eval_eta = to_double(value, key);
  else if (key == "eval.percentiles") cfg.percentiles = to_double_list(value, key);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig parse_run_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key or value");
    try {
      apply_config_key(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!cfg.split_seed_set) cfg.split_seed = cfg.data_seed;
  cfg.validate();
  return cfg;
}

inline RunConfig parse_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_run_config_text(buf.str());
}

/// Canonical effective-config dump: every key with its resolved value, in a
/// fixed order. Parsing the dump reproduces the config.
inline std::string dump_config(const RunConfig& cfg) {
  using detail::format_double;
  std::ostringstream os;
  os << "data.seed = " << cfg.data_seed << "\n";
  os << "data.train_frac = " << format_double(cfg.train_frac) << "\n";
  os << "data.split_seed = " << cfg.split_seed << "\n";
  os << "gen.patients = " << cfg.gen.patients << "\n";
  os << "gen.medications = " << cfg.gen.num_medications << "\n";
  os << "gen.vocab = " << cfg.gen.vocab_size << "\n";
  os << "gen.phenotypes = " << cfg.gen.phenotypes << "\n";
  os << "gen.cold_fraction = " << format_double(cfg.gen.cold_start_fraction) << "\n";
  os << "gen.visits_min = " << cfg.gen.visits_min << "\n";
  os << "gen.visits_max = " << cfg.gen.visits_max << "\n";
  os << "gen.codes_min = " << cfg.gen.codes_per_visit_min << "\n";
  os << "gen.codes_max = " << cfg.gen.codes_per_visit_max << "\n";
  os << "gen.cold_visits_min = " << cfg.gen.cold_visits_min << "\n";
  os << "gen.cold_visits_max = " << cfg.gen.cold_visits_max << "\n";
  os << "gen.cold_codes_min = " << cfg.gen.cold_codes_per_visit_min << "\n";
  os << "gen.cold_codes_max = " << cfg.gen.cold_codes_per_visit_max << "\n";
  os << "gen.ddi_edge_prob = " << format_double(cfg.gen.ddi_edge_prob) << "\n";
  os << "gen.code_affinity = " << format_double(cfg.gen.phenotype_code_affinity) << "\n";
  os << "gen.core_med_prob = " << format_double(cfg.gen.core_med_prob) << "\n";
  os << "gen.personal_med_prob = " << format_double(cfg.gen.personal_med_prob) << "\n";
  os << "gen.background_med_prob = " << format_double(cfg.gen.background_med_prob) << "\n";
  os << "gen.personal_meds = " << cfg.gen.personal_meds << "\n";
  os << "model.d = " << cfg.model_d << "\n";
  os << "model.heads = " << cfg.heads << "\n";
  os << "meta.alpha = " << format_double(cfg.meta.alpha) << "\n";
  os << "meta.outer_lr = "
     << (cfg.meta.outer_lr < 0.0 ? std::string("auto") : format_double(cfg.meta.outer_lr))
     << "\n";
  os << "meta.lambda = " << cfg.meta.lambda_peers << "\n";
  os << "meta.batch_size = " << cfg.meta.batch_size << "\n";
  os << "meta.epochs = " << cfg.meta.epochs << "\n";
  os << "meta.first_order = " << (cfg.meta.first_order ? "true" : "false") << "\n";
  os << "meta.use_self = " << (cfg.meta.use_self ? "true" : "false") << "\n";
  os << "meta.use_peer = " << (cfg.meta.use_peer ? "true" : "false") << "\n";
  os << "meta.seed = " << cfg.meta.seed << "\n";
  os << "uq.method = " << uq_method_name(cfg.uq.method) << "\n";
  os << "uq.beta = " << format_double(cfg.uq.beta) << "\n";
  os << "uq.passes = " << cfg.uq.dropout_passes << "\n";
  os << "uq.dropout_rate = " << format_double(cfg.uq.dropout_rate) << "\n";
  os << "uq.ensemble = " << cfg.uq.ensemble_size << "\n";
  os << "uq.epochs = " << cfg.uq.fit_epochs << "\n";
  os << "uq.lr = " << format_double(cfg.uq.fit_lr) << "\n";
  os << "uq.seed = " << cfg.uq.seed << "\n";
  os << "eval.eta = " << format_double(cfg.eval_eta) << "\n";
  os << "eval.percentiles = ";
  for (std::size_t i = 0; i < cfg.percentiles.size(); ++i) {
    if (i) os << ",";
    os << format_double(cfg.percentiles[i]);
  }
  os << "\n";
  return os.str();
}

inline std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(dump_config(cfg)); }

/// METADRUG_SEED overrides every seed in the config.
inline void apply_env_seed_override(RunConfig& cfg) {
  const char* env = std::getenv("METADRUG_SEED");
  if (!env || !*env) return;
  const std::uint64_t seed = detail::to_u64(env, "METADRUG_SEED");
  cfg.data_seed = seed;
  cfg.split_seed = seed;
  cfg.meta.seed = seed;
  cfg.uq.seed = seed;
}

}  // namespace metadrug
