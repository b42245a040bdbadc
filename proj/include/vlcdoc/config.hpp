// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vlcdoc/binary_io.hpp"
#include "vlcdoc/data_synth.hpp"
#include "vlcdoc/losses.hpp"
#include "vlcdoc/model.hpp"
#include "vlcdoc/optimizer.hpp"

namespace vlcdoc {

enum class LossKind { cross_cl, scl };

/// Everything one run needs. Serialises to flat `key = value` text.
struct RunConfig {
  std::string preset = "desk";

  // Model.
  std::size_t d_f = 32;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t d_ff = 64;
  std::size_t d_h = 32;
  std::size_t d_p = 16;
  double ln_epsilon = 1e-5;
  bool use_inter_mca = true;
  bool use_intra_msa = true;

  // Objective.
  LossKind loss = LossKind::cross_cl;
  LossConfig loss_cfg;

  // Data.
  CorpusSpec corpus;
  std::string corpus_path;  // when set, read instead of generating

  // Optimisation.
  std::size_t steps = 500;
  double warmup_fraction = 0.1;
  double lr = 2e-3;
  AdamWConfig adamw;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  // Linear probe.
  std::size_t probe_steps = 300;
  double probe_lr = 0.05;
  double probe_weight_decay = 0.0;

  // Ablation.
  std::size_t ablation_seeds = 3;

  // Output.
  std::string out_dir = "run";
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 100;
  bool log_wall_time = false;

  ModelConfig model_config() const {
    ModelConfig m;
    m.encoder = corpus.encoder_config(d_f);
    m.heads = heads;
    m.depth = depth;
    m.d_ff = d_ff;
    m.d_h = d_h;
    m.d_p = d_p;
    m.ln_epsilon = ln_epsilon;
    m.use_inter = use_inter_mca;
    m.use_intra = use_intra_msa;
    return m;
  }

  Schedule schedule() const { return Schedule{steps, warmup_fraction, lr}; }

  /// Loss settings actually optimised: SCL drops the inter-modality terms.
  LossConfig effective_loss() const {
    LossConfig c = loss_cfg;
    if (loss == LossKind::scl) c.lambda = 0.0;
    return c;
  }

  void validate() const {
    corpus.validate();
    model_config().validate();
    loss_cfg.validate();
    schedule().validate();
    if (batch_size < 4) throw ConfigError("batch_size must be at least 4");
    if (log_every < 1) throw ConfigError("log_every must be at least 1");
    if (ablation_seeds < 1) throw ConfigError("ablation_seeds must be at least 1");
  }
};

/// Desk-scale defaults: minutes on one CPU core.
inline RunConfig desk_preset() { return RunConfig{}; }

/// The published training setting (ViT-B/16-sized features, 197-token
/// sequences, batch 64, AdamW at 2e-5). Far beyond desk scale; provided for
/// reference and configuration tests.
inline RunConfig paper_preset() {
  RunConfig c;
  c.preset = "paper";
  c.d_f = 768;
  c.heads = 4;
  c.depth = 2;
  c.d_ff = 3072;
  c.d_h = 768;
  c.d_p = 384;
  c.batch_size = 64;
  c.lr = 2e-5;
  c.warmup_fraction = 0.1;
  c.loss_cfg = LossConfig{0.1, 0.5, false};
  c.corpus.num_classes = 16;
  c.corpus.per_class = 25000;
  c.corpus.height = 224;
  c.corpus.width = 224;
  c.corpus.channels = 3;
  c.corpus.patch = 16;
  c.corpus.n_max = 197;
  c.corpus.vocab_size = 30522;
  c.corpus.class_block_size = 1000;
  c.corpus.min_content = 50;
  c.corpus.max_content = 400;
  // 100 epochs over 320k training documents at batch 64.
  c.steps = 100 * (320000 / 64);
  return c;
}

inline RunConfig preset(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper") return paper_preset();
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

struct ConfigField {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
ConfigField number_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.*member = parse_number<T>("", v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt_double(c.*member);
            else return std::to_string(c.*member);
          }};
}

template <class T>
ConfigField corpus_field(T CorpusSpec::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.corpus.*member = parse_number<T>("", v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt_double(c.corpus.*member);
            else return std::to_string(c.corpus.*member);
          }};
}

inline ConfigField bool_field(bool RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.*member = parse_bool("", v); },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

/// Ordered key table; the order is the echo order.
inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
  static const std::vector<std::pair<std::string, ConfigField>> fields = {
      {"preset", {[](RunConfig& c, const std::string& v) { c.preset = v; }, [](const RunConfig& c) { return c.preset; }}},
      {"d_f", number_field(&RunConfig::d_f)},
      {"heads", number_field(&RunConfig::heads)},
      {"depth", number_field(&RunConfig::depth)},
      {"d_ff", number_field(&RunConfig::d_ff)},
      {"d_h", number_field(&RunConfig::d_h)},
      {"d_p", number_field(&RunConfig::d_p)},
      {"ln_epsilon", number_field(&RunConfig::ln_epsilon)},
      {"use_inter_mca", bool_field(&RunConfig::use_inter_mca)},
      {"use_intra_msa", bool_field(&RunConfig::use_intra_msa)},
      {"loss",
       {[](RunConfig& c, const std::string& v) {
          if (v == "crosscl") c.loss = LossKind::cross_cl;
          else if (v == "scl") c.loss = LossKind::scl;
          else throw ConfigError("config key 'loss': expected crosscl or scl, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(c.loss == LossKind::scl ? "scl" : "crosscl"); }}},
      {"tau",
       {[](RunConfig& c, const std::string& v) { c.loss_cfg.tau = parse_number<double>("tau", v); },
        [](const RunConfig& c) { return fmt_double(c.loss_cfg.tau); }}},
      {"lambda",
       {[](RunConfig& c, const std::string& v) { c.loss_cfg.lambda = parse_number<double>("lambda", v); },
        [](const RunConfig& c) { return fmt_double(c.loss_cfg.lambda); }}},
      {"include_own_pair",
       {[](RunConfig& c, const std::string& v) { c.loss_cfg.include_own_pair = parse_bool("include_own_pair", v); },
        [](const RunConfig& c) { return std::string(c.loss_cfg.include_own_pair ? "true" : "false"); }}},
      {"steps", number_field(&RunConfig::steps)},
      {"warmup_fraction", number_field(&RunConfig::warmup_fraction)},
      {"lr", number_field(&RunConfig::lr)},
      {"beta1",
       {[](RunConfig& c, const std::string& v) { c.adamw.beta1 = parse_number<double>("beta1", v); },
        [](const RunConfig& c) { return fmt_double(c.adamw.beta1); }}},
      {"beta2",
       {[](RunConfig& c, const std::string& v) { c.adamw.beta2 = parse_number<double>("beta2", v); },
        [](const RunConfig& c) { return fmt_double(c.adamw.beta2); }}},
      {"adam_epsilon",
       {[](RunConfig& c, const std::string& v) { c.adamw.epsilon = parse_number<double>("adam_epsilon", v); },
        [](const RunConfig& c) { return fmt_double(c.adamw.epsilon); }}},
      {"weight_decay",
       {[](RunConfig& c, const std::string& v) { c.adamw.weight_decay = parse_number<double>("weight_decay", v); },
        [](const RunConfig& c) { return fmt_double(c.adamw.weight_decay); }}},
      {"batch_size", number_field(&RunConfig::batch_size)},
      {"seed", number_field(&RunConfig::seed)},
      {"corpus_path",
       {[](RunConfig& c, const std::string& v) { c.corpus_path = v; }, [](const RunConfig& c) { return c.corpus_path; }}},
      {"corpus.classes", corpus_field(&CorpusSpec::num_classes)},
      {"corpus.per_class", corpus_field(&CorpusSpec::per_class)},
      {"corpus.height", corpus_field(&CorpusSpec::height)},
      {"corpus.width", corpus_field(&CorpusSpec::width)},
      {"corpus.channels", corpus_field(&CorpusSpec::channels)},
      {"corpus.patch", corpus_field(&CorpusSpec::patch)},
      {"corpus.vocab_size", corpus_field(&CorpusSpec::vocab_size)},
      {"corpus.n_max", corpus_field(&CorpusSpec::n_max)},
      {"corpus.class_block_size", corpus_field(&CorpusSpec::class_block_size)},
      {"corpus.min_content", corpus_field(&CorpusSpec::min_content)},
      {"corpus.max_content", corpus_field(&CorpusSpec::max_content)},
      {"corpus.class_token_prob", corpus_field(&CorpusSpec::class_token_prob)},
      {"corpus.pixel_noise", corpus_field(&CorpusSpec::pixel_noise)},
      {"corpus.token_corruption", corpus_field(&CorpusSpec::token_corruption)},
      {"corpus.seed", corpus_field(&CorpusSpec::seed)},
      {"probe_steps", number_field(&RunConfig::probe_steps)},
      {"probe_lr", number_field(&RunConfig::probe_lr)},
      {"probe_weight_decay", number_field(&RunConfig::probe_weight_decay)},
      {"ablation_seeds", number_field(&RunConfig::ablation_seeds)},
      {"out_dir", {[](RunConfig& c, const std::string& v) { c.out_dir = v; }, [](const RunConfig& c) { return c.out_dir; }}},
      {"log_every", number_field(&RunConfig::log_every)},
      {"checkpoint_every", number_field(&RunConfig::checkpoint_every)},
      {"log_wall_time", bool_field(&RunConfig::log_wall_time)},
  };
  return fields;
}

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, field] : detail::config_fields()) {
    if (name != key) continue;
    try {
      field.set(cfg, value);
    } catch (const ConfigError&) {
      throw ConfigError("config key '" + key + "': invalid value '" + value + "'");
    }
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Parses flat `key = value` lines over `base`. Blank lines and `#` comments
/// are ignored; the last assignment of a key wins.
inline RunConfig parse_config(const std::string& text, RunConfig base = desk_preset()) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string stripped = detail::trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    set_config_value(base, detail::trim(stripped.substr(0, eq)), detail::trim(stripped.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = desk_preset()) {
  return parse_config(read_file(path), std::move(base));
}

/// Full echo of every key; parse_config(to_config_text(c)) reproduces c.
inline std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : detail::config_fields()) out += name + " = " + field.get(cfg) + "\n";
  return out;
}

}  // namespace vlcdoc
