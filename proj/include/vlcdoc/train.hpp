// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vlcdoc/checkpoint.hpp"
#include "vlcdoc/config.hpp"
#include "vlcdoc/data_synth.hpp"
#include "vlcdoc/losses.hpp"
#include "vlcdoc/model.hpp"
#include "vlcdoc/optimizer.hpp"

namespace vlcdoc {

using Json = nlohmann::json;

// Salts separating the random streams derived from one run seed.
inline constexpr std::uint64_t kBatchStream = 0x6261746368ULL;
inline constexpr std::uint64_t kProbeStream = 0x70726f6265ULL;

/// Batches are a pure function of (seed, step), so a resumed run draws the
/// same batches as an uninterrupted one.
inline std::vector<const CorpusRecord*> batch_for_step(const RunConfig& cfg, const std::vector<CorpusRecord>& train,
                                                       std::size_t step) {
  Rng rng = Rng(cfg.seed).fork(kBatchStream + step);
  return make_batch(train, cfg.batch_size, rng);
}

inline Corpus load_or_generate_corpus(const RunConfig& cfg) {
  if (!cfg.corpus_path.empty()) return read_corpus(cfg.corpus_path);
  return generate_corpus(cfg.corpus);
}

/// Appends one JSON object per line, flushing after each record.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path, bool append = false)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw DataError("cannot open metrics log '" + path + "'");
  }

  void append(const Json& record) {
    records_.push_back(record);
    if (out_.is_open()) out_ << record.dump() << '\n' << std::flush;
  }

  const std::vector<Json>& records() const { return records_; }

 private:
  std::ofstream out_;
  std::vector<Json> records_;
};

struct PretrainHooks {
  /// Called before each optimisation step; tests use it to inject faults.
  std::function<void(Model&, std::size_t step)> before_step;
};

struct PretrainResult {
  Checkpoint state;          // after the last completed step
  std::vector<Json> metrics;  // every record written to the log
  bool aborted = false;
  std::string abort_reason;
};

inline std::string checkpoint_path(const std::string& out_dir) { return out_dir + "/checkpoint.ckpt"; }
inline std::string metrics_path(const std::string& out_dir) { return out_dir + "/metrics.jsonl"; }
inline std::string config_echo_path(const std::string& out_dir) { return out_dir + "/config.txt"; }

inline Json loss_record(std::size_t step, double lr, const LossValues& v) {
  return Json{{"step", step},
              {"lr", lr},
              {"loss", v.total},
              {"vision_to_vision", v.vision_to_vision},
              {"language_to_vision", v.language_to_vision},
              {"language_to_language", v.language_to_language},
              {"vision_to_language", v.vision_to_language}};
}

/// Contrastive pretraining. With `write_files`, the config echo, metrics log
/// and checkpoints go to `cfg.out_dir`. A non-finite loss or gradient stops
/// the run without touching the last checkpoint on disk. `resume` continues
/// from a saved state; its step must not exceed `cfg.steps`.
inline PretrainResult pretrain(const RunConfig& cfg, const Corpus& corpus, bool write_files,
                               const PretrainHooks& hooks = {}, std::optional<Checkpoint> resume = std::nullopt) {
  cfg.validate();
  if (corpus.spec.num_classes != cfg.corpus.num_classes || corpus.train.empty()) {
    throw DataError("corpus does not match the configured class count or has no training split");
  }

  PretrainResult res;
  if (resume) {
    if (resume->step > cfg.steps) throw ConfigError("resume step lies beyond the configured schedule");
    res.state = std::move(*resume);
    res.state.config = cfg;
  } else {
    res.state.config = cfg;
    res.state.model = Model::init(cfg.model_config(), cfg.seed);
    res.state.optimizer = AdamW(cfg.adamw);
  }
  Checkpoint& st = res.state;

  MetricsLog log;
  if (write_files) {
    std::filesystem::create_directories(cfg.out_dir);
    write_file_atomic(config_echo_path(cfg.out_dir), to_config_text(cfg));
    log = MetricsLog(metrics_path(cfg.out_dir));
  }
  auto save = [&] {
    if (write_files) write_checkpoint(st, checkpoint_path(cfg.out_dir));
  };

  const Schedule sched = cfg.schedule();
  const LossConfig loss_cfg = cfg.effective_loss();
  const auto t0 = std::chrono::steady_clock::now();
  auto params = st.model.named_parameters();

  if (st.step == 0) save();
  while (st.step < cfg.steps) {
    const std::size_t s = st.step;
    if (hooks.before_step) hooks.before_step(st.model, s);
    const double lr = lr_at(sched, s);
    LossValues values;
    try {
      const auto batch = batch_for_step(cfg, corpus.train, s);
      const auto labels = labels_of(batch);
      Tape tape;
      StackOutput out = model_forward(tape, st.model, batch);
      LossReport report = cross_cl(out.vision_embedding, out.language_embedding, labels, loss_cfg);
      values = report.values();
      if (!std::isfinite(values.total)) throw NumericError("non-finite loss " + std::to_string(values.total));
      tape.backward(report.total);
      for (auto& [name, p] : params) p->grad = tape.grad_of(*p);
      st.optimizer.step(params, lr);
    } catch (const NumericError& e) {
      res.aborted = true;
      res.abort_reason = "step " + std::to_string(s + 1) + ": " + e.what();
      log.append(Json{{"step", s + 1}, {"event", "abort"}, {"reason", res.abort_reason}});
      break;
    }
    st.step = s + 1;

    if (st.step % cfg.log_every == 0 || st.step == cfg.steps) {
      Json rec = loss_record(st.step, lr, values);
      if (cfg.log_wall_time) {
        rec["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
      log.append(rec);
    }
    if ((cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0) || st.step == cfg.steps) save();
  }
  res.metrics = log.records();
  return res;
}

/// Pooled [CLS] features of both modalities for every record, from a frozen
/// model on an inference tape.
struct FeatureSet {
  Tensor vision;    // [n, d_f]
  Tensor language;  // [n, d_f]
  std::vector<Label> labels;
};

inline FeatureSet extract_features(const Model& model, const std::vector<CorpusRecord>& records,
                                   std::size_t chunk = 64) {
  if (records.empty()) throw DataError("cannot extract features from an empty split");
  const std::size_t d = model.config.d_f();
  FeatureSet fs{Tensor({records.size(), d}), Tensor({records.size(), d}), {}};
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    const std::size_t stop = std::min(records.size(), start + chunk);
    std::vector<const CorpusRecord*> batch;
    for (std::size_t i = start; i < stop; ++i) batch.push_back(&records[i]);
    Tape tape(false);
    StackOutput out = model_forward(tape, model, batch);
    std::copy(out.vision_pooled.data().begin(), out.vision_pooled.data().end(),
              fs.vision.data().begin() + static_cast<std::ptrdiff_t>(start * d));
    std::copy(out.language_pooled.data().begin(), out.language_pooled.data().end(),
              fs.language.data().begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  fs.labels.reserve(records.size());
  for (const auto& r : records) fs.labels.push_back(r.label);
  return fs;
}

/// Linear classifier over standardised features. The standardisation uses
/// training-split statistics and is part of the (affine) classifier.
struct LinearClassifier {
  std::vector<double> mean;
  std::vector<double> inv_std;
  LinearParams weights;

  Tensor standardize(const Tensor& x) const {
    Tensor out = x;
    const std::size_t d = mean.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean[i % d]) * inv_std[i % d];
    return out;
  }

  std::vector<Label> predict(const Tensor& x) const {
    Tape tape(false);
    Var logits = linear(tape, weights, tape.constant(standardize(x)));
    const std::size_t n = logits.shape()[0], k = logits.shape()[1];
    std::vector<Label> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = logits.data().subspan(i * k, k);
      out[i] = static_cast<Label>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  }
};

inline double accuracy(const std::vector<Label>& predicted, const std::vector<Label>& truth) {
  if (predicted.size() != truth.size() || truth.empty()) throw ContractError("accuracy: size mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

/// Full-batch cross-entropy training with constant-rate AdamW.
inline LinearClassifier fit_linear_classifier(const Tensor& x, const std::vector<Label>& y, std::size_t classes,
                                              const RunConfig& cfg, Rng& rng) {
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  for (Label l : y) {
    if (l >= classes) throw DataError("probe: label " + std::to_string(l) + " outside " + std::to_string(classes) + " classes");
  }
  LinearClassifier clf;
  clf.mean.assign(d, 0.0);
  clf.inv_std.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) clf.mean[j] += x.at(i, j) / static_cast<double>(n);
  for (std::size_t j = 0; j < d; ++j) {
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x.at(i, j) - clf.mean[j]) * (x.at(i, j) - clf.mean[j]);
    var /= static_cast<double>(n);
    // Constant features carry no signal; zero them instead of dividing by 0.
    clf.inv_std[j] = var > 1e-24 ? 1.0 / std::sqrt(var) : 0.0;
  }
  clf.weights = make_linear(d, classes, rng);

  const Tensor xs = clf.standardize(x);
  NamedParams params;
  clf.weights.collect("probe", params);
  AdamW opt(AdamWConfig{cfg.adamw.beta1, cfg.adamw.beta2, cfg.adamw.epsilon, cfg.probe_weight_decay});
  for (std::size_t s = 0; s < cfg.probe_steps; ++s) {
    Tape tape;
    Var loss = cross_entropy(linear(tape, clf.weights, tape.constant(xs)), y);
    tape.backward(loss);
    for (auto& [name, p] : params) p->grad = tape.grad_of(*p);
    opt.step(params, cfg.probe_lr);
  }
  return clf;
}

struct ProbeResult {
  double vision_accuracy = 0.0;
  double language_accuracy = 0.0;
  double vision_train_accuracy = 0.0;
  double language_train_accuracy = 0.0;

  Json to_json() const {
    return Json{{"vision_test_accuracy", vision_accuracy},
                {"language_test_accuracy", language_accuracy},
                {"vision_train_accuracy", vision_train_accuracy},
                {"language_train_accuracy", language_train_accuracy}};
  }
};

/// Trains one linear classifier per modality on frozen features of the
/// training split and reports top-1 accuracy on the test split.
inline ProbeResult probe(const RunConfig& cfg, const Model& model, const Corpus& corpus) {
  const std::size_t classes = cfg.corpus.num_classes;
  if (corpus.spec.num_classes != classes) {
    throw DataError("probe: corpus has " + std::to_string(corpus.spec.num_classes) + " classes, config expects " +
                    std::to_string(classes));
  }
  const FeatureSet train = extract_features(model, corpus.train);
  const FeatureSet test = extract_features(model, corpus.test);
  Rng rng = Rng(cfg.seed).fork(kProbeStream);
  const LinearClassifier v = fit_linear_classifier(train.vision, train.labels, classes, cfg, rng);
  const LinearClassifier l = fit_linear_classifier(train.language, train.labels, classes, cfg, rng);
  ProbeResult r;
  r.vision_accuracy = accuracy(v.predict(test.vision), test.labels);
  r.language_accuracy = accuracy(l.predict(test.language), test.labels);
  r.vision_train_accuracy = accuracy(v.predict(train.vision), train.labels);
  r.language_train_accuracy = accuracy(l.predict(train.language), train.labels);
  return r;
}

}  // namespace vlcdoc
