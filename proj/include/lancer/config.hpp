#pragma once

// Run configuration: flat key=value text, flags override file values.

#include <cstdlib>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lancer/backbone.hpp"
#include "lancer/dataio.hpp"
#include "lancer/hash.hpp"

namespace lancer {

struct RunConfig {
  std::string interactions, catalog, workdir;

  BackboneConfig model;  // vocab_size comes from the ingested vocabulary
  std::size_t knowledge_tokens = 16;  // theta
  std::size_t knowledge_dim = 0;      // d_e; 0 means d
  std::size_t reasoning_tokens = 8;   // rho
  std::size_t memory_rows = 32;       // m
  std::string injection = "input";
  std::size_t history_rows = 10;  // N
  std::size_t min_freq = 1;

  std::size_t stage1_epochs = 30;
  double stage1_lr = 1e-3;
  std::size_t stage2_epochs = 40;
  double stage2_lr = 1e-3;
  std::size_t position_shift = 512;  // stage-two random position offset bound
  std::size_t batch = 16;
  std::size_t threads = 1;

  std::string k_list = "5,10";
  std::size_t beam_width = 0;  // 0 means max K + 5
  std::size_t max_steps = 34;
  std::string decoder = "beam";
  double temperature = 1.0;

  std::uint64_t seed = 42;
  std::string precision = "f32";

  std::vector<std::size_t> ks() const {
    std::vector<std::size_t> out;
    for (const auto& s : split(k_list, ',')) {
      if (s.empty()) continue;
      try {
        out.push_back(std::stoul(s));
      } catch (const std::logic_error&) {
        fail(ErrorKind::config, "k_list entry '" + s + "' is not a number");
      }
    }
    return out;
  }
  std::size_t max_k() const {
    std::size_t m = 0;
    for (auto k : ks()) m = std::max(m, k);
    return m;
  }

  /// Every key with its current value, in documentation order.
  std::vector<std::pair<std::string, std::string>> entries() const {
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    return {{"interactions", interactions},
            {"catalog", catalog},
            {"workdir", workdir},
            {"layers", std::to_string(model.layers)},
            {"d_model", std::to_string(model.d_model)},
            {"n_heads", std::to_string(model.n_heads)},
            {"d_ff", std::to_string(model.d_ff)},
            {"max_context", std::to_string(model.max_context)},
            {"knowledge_tokens", std::to_string(knowledge_tokens)},
            {"knowledge_dim", std::to_string(knowledge_dim)},
            {"reasoning_tokens", std::to_string(reasoning_tokens)},
            {"memory_rows", std::to_string(memory_rows)},
            {"injection", injection},
            {"history_rows", std::to_string(history_rows)},
            {"min_freq", std::to_string(min_freq)},
            {"stage1_epochs", std::to_string(stage1_epochs)},
            {"stage1_lr", num(stage1_lr)},
            {"stage2_epochs", std::to_string(stage2_epochs)},
            {"stage2_lr", num(stage2_lr)},
            {"position_shift", std::to_string(position_shift)},
            {"batch", std::to_string(batch)},
            {"threads", std::to_string(threads)},
            {"k_list", k_list},
            {"beam_width", std::to_string(beam_width)},
            {"max_steps", std::to_string(max_steps)},
            {"decoder", decoder},
            {"temperature", num(temperature)},
            {"seed", std::to_string(seed)},
            {"precision", precision}};
  }

  void set(const std::string& key, const std::string& value) {
    auto to_size = [&](std::size_t& dst) {
      std::size_t used = 0;
      try {
        if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
        dst = std::stoul(value, &used);
      } catch (const std::logic_error&) {
        used = 0;
      }
      if (used == 0 || used != value.size()) fail(ErrorKind::config, key + " must be a non-negative integer, got '" + value + "'");
    };
    auto to_double = [&](double& dst) {
      std::size_t used = 0;
      try {
        dst = std::stod(value, &used);
      } catch (const std::logic_error&) {
        used = 0;
      }
      if (used == 0 || used != value.size()) fail(ErrorKind::config, key + " must be a number, got '" + value + "'");
    };
    if (key == "interactions") interactions = value;
    else if (key == "catalog") catalog = value;
    else if (key == "workdir") workdir = value;
    else if (key == "layers") to_size(model.layers);
    else if (key == "d_model") to_size(model.d_model);
    else if (key == "n_heads") to_size(model.n_heads);
    else if (key == "d_ff") to_size(model.d_ff);
    else if (key == "max_context") to_size(model.max_context);
    else if (key == "knowledge_tokens") to_size(knowledge_tokens);
    else if (key == "knowledge_dim") to_size(knowledge_dim);
    else if (key == "reasoning_tokens") to_size(reasoning_tokens);
    else if (key == "memory_rows") to_size(memory_rows);
    else if (key == "injection") injection = value;
    else if (key == "history_rows") to_size(history_rows);
    else if (key == "min_freq") to_size(min_freq);
    else if (key == "stage1_epochs") to_size(stage1_epochs);
    else if (key == "stage1_lr") to_double(stage1_lr);
    else if (key == "stage2_epochs") to_size(stage2_epochs);
    else if (key == "stage2_lr") to_double(stage2_lr);
    else if (key == "position_shift") to_size(position_shift);
    else if (key == "batch") to_size(batch);
    else if (key == "threads") to_size(threads);
    else if (key == "k_list") k_list = value;
    else if (key == "beam_width") to_size(beam_width);
    else if (key == "max_steps") to_size(max_steps);
    else if (key == "decoder") decoder = value;
    else if (key == "temperature") to_double(temperature);
    else if (key == "seed") {
      std::size_t s = 0;
      to_size(s);
      seed = s;
    } else if (key == "precision") precision = value;
    else fail(ErrorKind::config, "unknown config key '" + key + "'");
  }

  /// `key = value` lines; '#' starts a comment.
  void merge_text(const std::string& text, const std::string& label) {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail(ErrorKind::config, label + ":" + std::to_string(lineno) + ": expected key = value");
      try {
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const Error& e) {
        fail(ErrorKind::config, label + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
    return out;
  }

  void validate() const {
    BackboneConfig probe = model;
    probe.vocab_size = std::max<std::size_t>(probe.vocab_size, special::count + 1);
    probe.validate();
    if (knowledge_tokens > 64) fail(ErrorKind::config, "knowledge_tokens must be within 0..64");
    if (memory_rows == 0) fail(ErrorKind::config, "memory_rows must be >= 1");
    if (injection != "input" && injection != "prefix") fail(ErrorKind::config, "injection must be input or prefix");
    if (history_rows == 0) fail(ErrorKind::config, "history_rows must be >= 1");
    if (batch == 0) fail(ErrorKind::config, "batch must be >= 1");
    if (threads == 0) fail(ErrorKind::config, "threads must be >= 1");
    if (stage1_lr < 0 || stage2_lr < 0) fail(ErrorKind::config, "learning rates must be >= 0");
    if (max_steps == 0) fail(ErrorKind::config, "max_steps must be >= 1");
    const auto k = ks();
    if (k.empty()) fail(ErrorKind::config, "k_list must name at least one K");
    for (auto v : k)
      if (v == 0) fail(ErrorKind::config, "every K must be >= 1");
    if (beam_width && beam_width < max_k()) fail(ErrorKind::config, "beam_width must be >= the largest K");
    if (decoder != "beam" && decoder != "greedy" && decoder != "sample")
      fail(ErrorKind::config, "decoder must be beam, greedy or sample");
    if (temperature <= 0) fail(ErrorKind::config, "temperature must be > 0");
    if (precision != "f32" && precision != "f64") fail(ErrorKind::config, "precision must be f32 or f64");
  }

  std::string hash_of(std::initializer_list<const char*> keys) const {
    const auto all = entries();
    Fnv1a h;
    for (const char* k : keys)
      for (const auto& [name, value] : all)
        if (name == k) {
          h.update(name);
          h.update("=");
          h.update(value);
          h.update("\n");
        }
    return hex64(h.digest());
  }

  /// Stage hashes; each covers the keys that shape that stage's artifacts.
  std::string data_hash() const { return hash_of({"interactions", "catalog", "min_freq"}); }
  std::string stage1_hash() const {
    return hash_of({"interactions", "catalog", "min_freq", "layers", "d_model", "n_heads", "d_ff", "max_context",
                    "knowledge_tokens", "knowledge_dim", "stage1_epochs", "stage1_lr", "batch", "seed", "precision"});
  }
  std::string stage2_hash() const {
    return hash_of({"interactions", "catalog", "min_freq", "layers", "d_model", "n_heads", "d_ff", "max_context",
                    "knowledge_tokens", "knowledge_dim", "stage1_epochs", "stage1_lr", "batch", "seed", "precision",
                    "reasoning_tokens", "memory_rows", "injection", "history_rows", "stage2_epochs", "stage2_lr", "position_shift"});
  }
};

}  // namespace lancer
