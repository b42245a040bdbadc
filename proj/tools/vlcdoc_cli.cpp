// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "vlcdoc/ablation.hpp"
#include "vlcdoc/gradcheck_suite.hpp"
#include "vlcdoc/train.hpp"

namespace {

using namespace vlcdoc;

enum ExitCode { kOk = 0, kConfigFailure = 1, kDataFailure = 2, kNumericFailure = 3 };

struct CommonFlags {
  std::string config_path;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "flat key = value config file");
  cmd->add_option("--preset", f.preset, "base preset")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", f.seed, "run seed (corpus seed for gen-corpus)");
  cmd->add_option("--out", f.out, "output directory");
}

// Precedence: preset, then config file, then command-line flags.
RunConfig resolve(const CommonFlags& f, bool seed_is_corpus_seed = false) {
  RunConfig cfg = preset(f.preset);
  if (!f.config_path.empty()) cfg = load_config(f.config_path, cfg);
  if (f.seed) (seed_is_corpus_seed ? cfg.corpus.seed : cfg.seed) = *f.seed;
  if (f.out) cfg.out_dir = *f.out;
  cfg.validate();
  return cfg;
}

int cmd_gen_corpus(const CommonFlags& f) {
  const RunConfig cfg = resolve(f, true);
  std::filesystem::create_directories(cfg.out_dir);
  const Corpus corpus = generate_corpus(cfg.corpus);
  const std::string path = cfg.out_dir + "/corpus.xclc";
  write_corpus(corpus, path);
  std::cout << Json{{"corpus", path},
                    {"train", corpus.train.size()},
                    {"val", corpus.val.size()},
                    {"test", corpus.test.size()}}
                   .dump()
            << '\n';
  return kOk;
}

int cmd_pretrain(const CommonFlags& f) {
  const RunConfig cfg = resolve(f);
  const Corpus corpus = load_or_generate_corpus(cfg);
  const PretrainResult res = pretrain(cfg, corpus, true);
  if (res.aborted) {
    std::cerr << "pretrain aborted at " << res.abort_reason << "; last good checkpoint kept at "
              << checkpoint_path(cfg.out_dir) << '\n';
    return kNumericFailure;
  }
  Json summary{{"steps", res.state.step}, {"checkpoint", checkpoint_path(cfg.out_dir)},
               {"metrics", metrics_path(cfg.out_dir)}};
  if (!res.metrics.empty()) summary["final_loss"] = res.metrics.back()["loss"];
  std::cout << summary.dump() << '\n';
  return kOk;
}

int cmd_probe(const CommonFlags& f, const std::string& checkpoint_arg) {
  const RunConfig cfg = resolve(f);
  const std::string path = checkpoint_arg.empty() ? checkpoint_path(cfg.out_dir) : checkpoint_arg;
  const Checkpoint ckpt = read_checkpoint(path);
  const ModelConfig want = cfg.model_config();
  const ModelConfig got = ckpt.config.model_config();
  if (got.encoder.d_f != want.encoder.d_f || got.encoder.n_max != want.encoder.n_max ||
      got.encoder.vocab_size != want.encoder.vocab_size || got.encoder.patch != want.encoder.patch) {
    throw ConfigError("checkpoint '" + path + "' was trained with a different model shape");
  }
  if (ckpt.config.corpus.num_classes != cfg.corpus.num_classes) {
    throw DataError("checkpoint was trained on " + std::to_string(ckpt.config.corpus.num_classes) +
                    " classes, config has " + std::to_string(cfg.corpus.num_classes));
  }
  const Corpus corpus = load_or_generate_corpus(cfg);
  const ProbeResult r = probe(cfg, ckpt.model, corpus);
  Json rec = r.to_json();
  rec["step"] = ckpt.step;
  rec["event"] = "probe";
  std::filesystem::create_directories(cfg.out_dir);
  MetricsLog(metrics_path(cfg.out_dir), true).append(rec);
  std::cout << rec.dump() << '\n';
  return kOk;
}

int cmd_ablate(const CommonFlags& f) {
  const RunConfig cfg = resolve(f);
  const Corpus corpus = load_or_generate_corpus(cfg);
  const AblationTable table = ablate(cfg, corpus, [](const std::string& line) { std::cerr << line << '\n'; });
  std::filesystem::create_directories(cfg.out_dir);
  write_file_atomic(cfg.out_dir + "/ablation.json", table.to_json().dump(2) + "\n");
  std::cout << table.to_text();
  return kOk;
}

int cmd_gradcheck(const CommonFlags& f, const std::string& corrupt) {
  const RunConfig cfg = resolve(f);
  const GradcheckReport report = run_gradcheck(cfg.seed, corrupt);
  for (const auto& e : report.entries) {
    std::printf("%-18s max_rel_error=%.3e %s%s\n", e.block.c_str(), e.max_rel_error, e.passed ? "PASS" : "FAIL",
                e.passed ? "" : ("  worst at " + e.worst).c_str());
  }
  std::printf("%s in %.2f s\n", report.all_passed() ? "all blocks pass" : "gradient check FAILED", report.seconds);
  return report.all_passed() ? kOk : kNumericFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal contrastive document pretraining at desk scale"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string checkpoint;
  std::string corrupt;

  auto* gen = app.add_subcommand("gen-corpus", "write the synthetic corpus to OUT/corpus.xclc");
  auto* pre = app.add_subcommand("pretrain", "contrastive pretraining; writes checkpoint and metrics to OUT");
  auto* prb = app.add_subcommand("probe", "linear probes on frozen features of a checkpoint");
  auto* abl = app.add_subcommand("ablate", "attention-module and objective ablation table");
  auto* grd = app.add_subcommand("gradcheck", "finite-difference gradient check of every block");
  for (auto* c : {gen, pre, prb, abl, grd}) add_common(c, flags);
  prb->add_option("--checkpoint", checkpoint, "checkpoint path (default OUT/checkpoint.ckpt)");
  grd->add_option("--corrupt", corrupt, "route this block through a wrong adjoint (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigFailure;
  }

  try {
    if (*gen) return cmd_gen_corpus(flags);
    if (*pre) return cmd_pretrain(flags);
    if (*prb) return cmd_probe(flags, checkpoint);
    if (*abl) return cmd_ablate(flags);
    if (*grd) return cmd_gradcheck(flags, corrupt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigFailure;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataFailure;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigFailure;
  }
  return kOk;
}
