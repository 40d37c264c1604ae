// Copyright 2026 The mmfed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Experiment configuration as a sectioned key = value file. Every key is
// optional; unknown sections and keys are rejected. A resolved config
// serializes back to the same format with every default written out.

#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmfed/errors.hpp"
#include "mmfed/fed.hpp"
#include "mmfed/munet.hpp"

namespace mmfed::exp {

enum class DataSource { kSynthetic, kSampleDir, kNifti };

inline const char* source_name(DataSource s) {
  switch (s) {
    case DataSource::kSynthetic: return "synthetic";
    case DataSource::kSampleDir: return "fms";
    case DataSource::kNifti: return "nifti";
  }
  return "?";
}

/// Named noise levels: none, low and high privacy noise.
struct NoiseProfile {
  const char* name;
  double sigma;
};
inline constexpr NoiseProfile kNoiseProfiles[] = {{"none", 0.0}, {"low", 1e-5}, {"high", 1e-2}};

struct DataConfig {
  DataSource source = DataSource::kSynthetic;
  std::string path;
  std::size_t count = 200;
  std::size_t size = 64;
  double noise_std = 0.05;
  double train_ratio = 0.7;
  double val_ratio = 0.2;
  double test_ratio = 0.1;
  std::size_t clients = 4;
  double alpha = 2.0;
  std::vector<std::size_t> modalities{0, 1, 2, 3};  // inputs kept; the rest are zeroed
};

inline constexpr const char* kModalityKeys[] = {"t1", "t1ce", "t2", "flair"};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "mmfed_out";
  DataConfig data;
  model::MUnetConfig model;
  fed::ServerConfig server = default_server();
  double threshold = 0.5;

  static fed::ServerConfig default_server() {
    fed::ServerConfig s;
    s.sigma = 1e-5;
    return s;
  }

  /// Model and server views with the shared fields filled in.
  model::MUnetConfig resolved_model() const {
    model::MUnetConfig m = model;
    m.input_size = data.size;
    return m;
  }
  fed::ServerConfig resolved_server() const {
    fed::ServerConfig s = server;
    s.seed = seed;
    return s;
  }

  std::string noise_profile() const {
    for (const auto& p : kNoiseProfiles)
      if (p.sigma == server.sigma) return p.name;
    return "custom";
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid config: " + what); };
    resolved_model().validate();
    resolved_server().validate();
    if (model.modalities != data::kNumModalities) fail("model.modalities must be 4 (T1, T1c, T2, FLAIR)");
    if (data.train_ratio < 0 || data.val_ratio < 0 || data.test_ratio < 0 ||
        std::abs(data.train_ratio + data.val_ratio + data.test_ratio - 1.0) > 1e-9) {
      fail("data.train_ratio + data.val_ratio + data.test_ratio must be 1 with each >= 0");
    }
    if (data.clients < 1) fail("data.clients >= 1");
    if (!(data.alpha > 0.0)) fail("data.alpha > 0");
    if (data.source == DataSource::kSynthetic && data.count < 1) fail("data.count >= 1");
    if (data.source != DataSource::kSynthetic && data.path.empty()) fail("data.path is required for this source");
    if (data.modalities.empty()) fail("data.modalities must keep at least one modality");
    if (!(data.noise_std >= 0.0)) fail("data.noise_std >= 0");
    if (!(threshold > 0.0 && threshold < 1.0)) fail("eval.threshold in (0, 1)");
    if (server.rounds < 1) fail("server.rounds >= 1");
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* b = text.data();
  const char* e = b + text.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) {
    throw ConfigError(key + ": cannot parse '" + text + "' as " +
                      (std::is_floating_point_v<T> ? "a number" : "a nonnegative integer"));
  }
  return v;
}

// Binds every key of the format to a field, for reading and writing alike.
struct Field {
  std::string section, key;
  std::function<void(const std::string&, const std::string&)> set;
  std::function<std::string()> get;
};

inline std::vector<Field> fields(ExperimentConfig& c) {
  std::vector<Field> f;
  auto sz = [&](const char* s, const char* k, std::size_t& ref) {
    f.push_back({s, k, [&ref](const std::string& key, const std::string& v) { ref = parse_number<std::size_t>(key, v); },
                 [&ref] { return std::to_string(ref); }});
  };
  auto dbl = [&](const char* s, const char* k, double& ref) {
    f.push_back({s, k, [&ref](const std::string& key, const std::string& v) { ref = parse_number<double>(key, v); },
                 [&ref] { return format_double(ref); }});
  };
  f.push_back({"experiment", "seed",
               [&c](const std::string& key, const std::string& v) { c.seed = parse_number<std::uint64_t>(key, v); },
               [&c] { return std::to_string(c.seed); }});
  f.push_back({"experiment", "out_dir", [&c](const std::string&, const std::string& v) { c.out_dir = v; },
               [&c] { return c.out_dir; }});

  f.push_back({"data", "source",
               [&c](const std::string& key, const std::string& v) {
                 if (v == "synthetic") c.data.source = DataSource::kSynthetic;
                 else if (v == "fms") c.data.source = DataSource::kSampleDir;
                 else if (v == "nifti") c.data.source = DataSource::kNifti;
                 else throw ConfigError(key + ": expected synthetic, fms or nifti, got '" + v + "'");
               },
               [&c] { return std::string(source_name(c.data.source)); }});
  f.push_back({"data", "path", [&c](const std::string&, const std::string& v) { c.data.path = v; },
               [&c] { return c.data.path; }});
  sz("data", "count", c.data.count);
  sz("data", "size", c.data.size);
  dbl("data", "noise_std", c.data.noise_std);
  dbl("data", "train_ratio", c.data.train_ratio);
  dbl("data", "val_ratio", c.data.val_ratio);
  dbl("data", "test_ratio", c.data.test_ratio);
  sz("data", "clients", c.data.clients);
  dbl("data", "alpha", c.data.alpha);
  f.push_back({"data", "modalities",
               [&c](const std::string& key, const std::string& v) {
                 std::vector<std::size_t> keep;
                 std::stringstream ss(v);
                 for (std::string tok; std::getline(ss, tok, ',');) {
                   tok.erase(0, tok.find_first_not_of(' '));
                   tok.erase(tok.find_last_not_of(' ') + 1);
                   std::size_t m = 0;
                   while (m < 4 && tok != kModalityKeys[m]) ++m;
                   if (m == 4) throw ConfigError(key + ": unknown modality '" + tok + "' (use t1, t1ce, t2, flair)");
                   if (std::find(keep.begin(), keep.end(), m) != keep.end()) {
                     throw ConfigError(key + ": modality '" + tok + "' listed twice");
                   }
                   keep.push_back(m);
                 }
                 std::sort(keep.begin(), keep.end());
                 c.data.modalities = keep;
               },
               [&c] {
                 std::string out;
                 for (std::size_t m : c.data.modalities) out += (out.empty() ? "" : ",") + std::string(kModalityKeys[m]);
                 return out;
               }});

  sz("model", "modalities", c.model.modalities);
  sz("model", "stages", c.model.stages);
  sz("model", "base_channels", c.model.base_channels);
  sz("model", "attention_heads", c.model.attention_heads);
  sz("model", "classes", c.model.classes);
  sz("model", "stem_levels", c.model.stem_levels);
  sz("model", "stem_channels", c.model.stem_channels);
  sz("model", "ffn_multiplier", c.model.ffn_multiplier);
  sz("model", "cmm_kernel", c.model.cmm_kernel);

  dbl("server", "eta", c.server.eta);
  dbl("server", "momentum", c.server.momentum);
  sz("server", "local_epochs", c.server.local_epochs);
  sz("server", "batch_size", c.server.batch_size);
  sz("server", "rounds", c.server.rounds);
  dbl("server", "q", c.server.q);
  dbl("server", "S", c.server.S);
  dbl("server", "C", c.server.C);
  dbl("server", "sigma", c.server.sigma);
  dbl("server", "w_hat", c.server.w_hat);

  dbl("eval", "threshold", c.threshold);
  return f;
}

}  // namespace detail

/// Parses config text. `noise_profile` in [server] sets sigma from a named
/// profile; giving both with different values is an error.
inline ExperimentConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax error: ") + e.what());
  }
  ExperimentConfig cfg;
  auto f = detail::fields(cfg);
  std::map<std::string, detail::Field*> by_key;
  std::map<std::string, bool> sections;
  for (auto& fld : f) {
    by_key[fld.section + "." + fld.key] = &fld;
    sections[fld.section] = true;
  }
  std::string profile;
  bool sigma_given = false;
  for (const auto& [section, body] : tree) {
    if (!sections.contains(section)) {
      if (body.empty()) throw ConfigError("key '" + section + "' must be inside a section");
      throw ConfigError("unknown config section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const std::string v = value.get_value<std::string>();
      if (full == "server.noise_profile") {
        profile = v;
        continue;
      }
      auto it = by_key.find(full);
      if (it == by_key.end()) throw ConfigError("unknown config key '" + full + "'");
      it->second->set(full, v);
      sigma_given |= full == "server.sigma";
    }
  }
  if (!profile.empty() && profile != "custom") {
    const NoiseProfile* match = nullptr;
    for (const auto& p : kNoiseProfiles)
      if (profile == p.name) match = &p;
    if (!match) throw ConfigError("server.noise_profile: expected none, low or high, got '" + profile + "'");
    if (sigma_given && cfg.server.sigma != match->sigma) {
      throw ConfigError("server.noise_profile '" + profile + "' conflicts with server.sigma");
    }
    cfg.server.sigma = match->sigma;
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Fully expanded config text; parsing it yields an equal config.
inline std::string to_ini(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  auto f = detail::fields(copy);
  std::ostringstream os;
  std::string section;
  for (const auto& fld : f) {
    if (fld.section != section) {
      if (!section.empty()) os << '\n';
      section = fld.section;
      os << '[' << section << "]\n";
    }
    os << fld.key << " = " << fld.get() << '\n';
    if (fld.section == "server" && fld.key == "sigma") os << "noise_profile = " << c.noise_profile() << '\n';
  }
  return os.str();
}

}  // namespace mmfed::exp
