// Command-line front end for the experiment pipeline.  Every subcommand is a
// thin wrapper over attrgen::pipeline: it loads a config, applies the few
// overrides flags allow, runs one library call, and prints where the
// artifacts landed plus the headline numbers.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <omp.h>

#include "attrgen/common.hpp"
#include "attrgen/pipeline.hpp"

namespace fs = std::filesystem;
using namespace attrgen;

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int threads = 1;  // deterministic by default; raise explicitly to go wide
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "experiment config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", flags.seed, "override the config seed");
  cmd->add_option("--out", flags.out, "override the output directory");
  cmd->add_option("--threads", flags.threads, "OpenMP thread count")
      ->check(CLI::PositiveNumber);
}

pipeline::ExperimentConfig load_config(const CommonFlags& flags) {
  omp_set_num_threads(flags.threads);
  auto cfg = pipeline::ExperimentConfig::load(flags.config_path);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.out) cfg.output_dir = *flags.out;
  return cfg;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string("-");
}

void print_aggregate(const char* tag, const evalkit::AggregateReport& agg) {
  std::printf("%s: pacs %d, accepted %d, AR@P %s, recall@P %s\n", tag, agg.n_pacs,
              agg.n_accepted, format_double(agg.ar_at_p).c_str(),
              fmt_opt(agg.recall_at_p).c_str());
}

void print_applicability(const char* tag, const evalkit::ApplicabilityReport& rep) {
  std::printf("%s: overall %s, high bucket %s (%d pacs), low bucket %s (%d pacs)\n", tag,
              fmt_opt(rep.overall).c_str(), fmt_opt(rep.high_bucket).c_str(), rep.n_high_pacs,
              fmt_opt(rep.low_bucket).c_str(), rep.n_low_pacs);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generative attribute-value prediction over synthetic catalogs"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string data_dir, model_dir, predictions_dir, runs_dir, report_out;

  auto* synth = app.add_subcommand("synth", "materialize a synthetic catalog");
  add_common(synth, flags);

  auto* train = app.add_subcommand("train", "two-stage training on a data directory");
  add_common(train, flags);
  train->add_option("--data", data_dir, "directory written by synth")->required();

  auto* predict = app.add_subcommand("predict", "batch prediction over the test split");
  add_common(predict, flags);
  predict->add_option("--model", model_dir, "directory written by train")->required();
  predict->add_option("--data", data_dir, "directory written by synth")->required();

  auto* eval = app.add_subcommand("eval", "threshold search and aggregate reports");
  add_common(eval, flags);
  eval->add_option("--predictions", predictions_dir, "directory written by predict")->required();
  eval->add_option("--data", data_dir, "directory written by synth")->required();

  auto* main_run = app.add_subcommand("run", "synth + train + predict + eval in one directory");
  add_common(main_run, flags);

  auto* ablate = app.add_subcommand("ablate-negative",
                                    "paired arms with and without negative training targets");
  add_common(ablate, flags);

  auto* zero_shot = app.add_subcommand(
      "zero-shot", "withhold audited labels for a slice subset, compare catalog coverage");
  add_common(zero_shot, flags);

  auto* applicability = app.add_subcommand(
      "applicability", "applicable-vs-NA accuracy of the generative model and two probes");
  add_common(applicability, flags);

  auto* multimodal = app.add_subcommand(
      "multimodal", "text-only model vs an embedding-fused model seeded from it");
  add_common(multimodal, flags);

  auto* sweep = app.add_subcommand("arch-sweep", "model-size sweep on identical splits");
  add_common(sweep, flags);

  auto* report = app.add_subcommand("report", "summarize finished run directories");
  report->add_option("--runs", runs_dir, "directory containing run directories")->required();
  report->add_option("--out", report_out, "summary JSON path (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      const auto cfg = load_config(flags);
      const auto dir = cfg.output_dir / "data";
      pipeline::cmd_synth(cfg, dir);
      std::printf("wrote %s\n", dir.string().c_str());
    } else if (train->parsed()) {
      const auto cfg = load_config(flags);
      const auto dir = cfg.output_dir / "train";
      const auto summary = pipeline::cmd_train(cfg, data_dir, dir);
      std::printf("wrote %s\n", dir.string().c_str());
      std::printf("stage 1 best eval accuracy %s\n",
                  format_double(summary.stage1_best_accuracy).c_str());
      if (summary.stage2_best_accuracy) {
        std::printf("stage 2 best eval accuracy %s\n",
                    format_double(*summary.stage2_best_accuracy).c_str());
      }
    } else if (predict->parsed()) {
      const auto cfg = load_config(flags);
      const auto dir = cfg.output_dir / "predict";
      pipeline::cmd_predict(cfg, model_dir, data_dir, dir);
      std::printf("wrote %s\n", dir.string().c_str());
    } else if (eval->parsed()) {
      const auto cfg = load_config(flags);
      const auto dir = cfg.output_dir / "eval";
      const auto agg = pipeline::cmd_eval(cfg, predictions_dir, data_dir, dir);
      std::printf("wrote %s\n", dir.string().c_str());
      print_aggregate("test slice", agg);
    } else if (main_run->parsed()) {
      const auto cfg = load_config(flags);
      const auto result = pipeline::run_main(cfg);
      std::printf("wrote %s\n", result.run_dir.string().c_str());
      print_aggregate("test slice", result.aggregate);
    } else if (ablate->parsed()) {
      const auto cfg = load_config(flags);
      const auto r = pipeline::run_ablate_negative(cfg);
      std::printf("wrote %s\n", r.run_dir.string().c_str());
      std::printf("AR@P full slice: with %s, without %s\n",
                  format_double(r.with_ar_full).c_str(),
                  format_double(r.without_ar_full).c_str());
      std::printf("AR@P concrete-gold slice: with %s, without %s\n",
                  format_double(r.with_ar_restricted).c_str(),
                  format_double(r.without_ar_restricted).c_str());
      std::printf("ablated arm negative outputs: %lld\n", r.without_negative_outputs);
    } else if (zero_shot->parsed()) {
      const auto cfg = load_config(flags);
      const auto r = pipeline::run_zero_shot(cfg);
      std::printf("wrote %s\n", r.run_dir.string().c_str());
      std::printf("held-out slices: %zu; audited labels withheld: %s\n", r.n_b_pacs,
                  r.strong_b_withheld ? "yes" : "NO");
      std::printf("held-out accuracy %s vs majority %s\n",
                  format_double(r.model_accuracy_b).c_str(),
                  format_double(r.majority_accuracy_b).c_str());
      std::printf("held-out AR@P: with catalog %s, without %s\n",
                  format_double(r.with_b.ar).c_str(), format_double(r.without_b.ar).c_str());
    } else if (applicability->parsed()) {
      const auto cfg = load_config(flags);
      const auto r = pipeline::run_applicability(cfg);
      std::printf("wrote %s\n", r.run_dir.string().c_str());
      print_applicability("generative", r.generative);
      print_applicability("bag of words", r.bow);
      print_applicability("encoder probe", r.encoder);
      std::printf("always-applicable guess: %s\n",
                  format_double(r.always_applicable_accuracy).c_str());
    } else if (multimodal->parsed()) {
      const auto cfg = load_config(flags);
      const auto r = pipeline::run_multimodal(cfg);
      std::printf("wrote %s\n", r.run_dir.string().c_str());
      std::printf("shared tensors %zu, equal at start: %s\n", r.shared_tensors,
                  r.shared_equal_at_start ? "yes" : "NO");
      std::printf("image-attribute recall: text %s, fused %s\n",
                  format_double(r.image_recall_text).c_str(),
                  format_double(r.image_recall_fused).c_str());
      std::printf("other-attribute recall: text %s, fused %s\n",
                  format_double(r.nonimage_recall_text).c_str(),
                  format_double(r.nonimage_recall_fused).c_str());
    } else if (sweep->parsed()) {
      const auto cfg = load_config(flags);
      const auto r = pipeline::run_arch_sweep(cfg);
      std::printf("wrote %s\n", r.run_dir.string().c_str());
      for (const auto& row : r.rows) {
        std::printf("d_model %d: params %lld, eval accuracy %s, AR@P %s, recall@P %s\n",
                    row.d_model, row.param_count,
                    format_double(row.best_eval_accuracy).c_str(),
                    format_double(row.ar).c_str(), fmt_opt(row.recall).c_str());
      }
    } else if (report->parsed()) {
      const auto summary = pipeline::summarize_runs(runs_dir);
      if (report_out.empty()) {
        std::fputs(summary.c_str(), stdout);
      } else {
        write_text_file(report_out, summary);
        std::printf("wrote %s\n", report_out.c_str());
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
