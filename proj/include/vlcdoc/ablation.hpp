// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "vlcdoc/train.hpp"

namespace vlcdoc {

struct AblationVariant {
  std::string name;
  bool use_inter_mca = true;
  bool use_intra_msa = true;
  LossKind loss = LossKind::cross_cl;
};

/// The four attention variants under CrossCL, then the full model under SCL.
/// A disabled module is replaced by identity.
inline std::vector<AblationVariant> ablation_variants() {
  return {{"InterMCA+IntraMSA", true, true, LossKind::cross_cl},
          {"InterMCA", true, false, LossKind::cross_cl},
          {"IntraMSA", false, true, LossKind::cross_cl},
          {"none", false, false, LossKind::cross_cl},
          {"InterMCA+IntraMSA (SCL)", true, true, LossKind::scl}};
}

struct AblationRow {
  AblationVariant variant;
  std::vector<std::uint64_t> seeds;
  std::vector<double> vision;    // test accuracy per seed
  std::vector<double> language;  // test accuracy per seed

  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
  double mean_vision() const { return mean(vision); }
  double mean_language() const { return mean(language); }
};

struct AblationTable {
  std::vector<AblationRow> rows;

  const AblationRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.variant.name == name) return r;
    throw ContractError("ablation table has no row '" + name + "'");
  }

  Json to_json() const {
    Json out = Json::array();
    for (const auto& r : rows) {
      out.push_back(Json{{"variant", r.variant.name},
                         {"inter_mca", r.variant.use_inter_mca},
                         {"intra_msa", r.variant.use_intra_msa},
                         {"loss", r.variant.loss == LossKind::scl ? "scl" : "crosscl"},
                         {"seeds", r.seeds},
                         {"vision_accuracy", r.vision},
                         {"language_accuracy", r.language},
                         {"mean_vision_accuracy", r.mean_vision()},
                         {"mean_language_accuracy", r.mean_language()}});
    }
    return out;
  }

  /// Plain-text layout: one row per variant and modality.
  std::string to_text() const {
    std::string out = "variant                   loss     InterMCA IntraMSA modality  accuracy\n";
    char line[160];
    for (const auto& r : rows) {
      for (int m = 0; m < 2; ++m) {
        std::snprintf(line, sizeof line, "%-25s %-8s %-8s %-8s %-9s %.4f\n", r.variant.name.c_str(),
                      r.variant.loss == LossKind::scl ? "scl" : "crosscl", r.variant.use_inter_mca ? "yes" : "no",
                      r.variant.use_intra_msa ? "yes" : "no", m == 0 ? "vision" : "language",
                      m == 0 ? r.mean_vision() : r.mean_language());
        out += line;
      }
    }
    return out;
  }
};

/// Pretrains and probes every variant for `cfg.ablation_seeds` seeds starting
/// at `cfg.seed`. The corpus is shared across all runs.
inline AblationTable ablate(const RunConfig& cfg, const Corpus& corpus,
                            const std::function<void(const std::string&)>& progress = {}) {
  cfg.validate();
  AblationTable table;
  for (const AblationVariant& v : ablation_variants()) {
    AblationRow row{v, {}, {}, {}};
    for (std::size_t i = 0; i < cfg.ablation_seeds; ++i) {
      RunConfig run = cfg;
      run.seed = cfg.seed + i;
      run.use_inter_mca = v.use_inter_mca;
      run.use_intra_msa = v.use_intra_msa;
      run.loss = v.loss;
      PretrainResult res = pretrain(run, corpus, false);
      if (res.aborted) throw NumericError("ablation variant '" + v.name + "': " + res.abort_reason);
      const ProbeResult p = probe(run, res.state.model, corpus);
      row.seeds.push_back(run.seed);
      row.vision.push_back(p.vision_accuracy);
      row.language.push_back(p.language_accuracy);
      if (progress) {
        char msg[160];
        std::snprintf(msg, sizeof msg, "%s seed %llu: vision %.4f language %.4f", v.name.c_str(),
                      static_cast<unsigned long long>(run.seed), p.vision_accuracy, p.language_accuracy);
        progress(msg);
      }
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace vlcdoc
