#pragma once

// Experiment orchestration: dataset synthesis, two-stage training, batch
// prediction, evaluation, and the paired-arm experiment drivers, all
// reproducible from (config file, seed).
//
// Artifact discipline: every command writes its outputs plus a manifest.json
// recording the config digest, the seed, and a digest per input and output
// file. Commands that consume an earlier stage's directory re-digest the
// files they read and refuse to run on a mismatch, so a stale or edited
// artifact fails loudly instead of silently skewing a report.
//
// Phase separation: prediction reads test records through read_tasks_jsonl,
// which parses identity fields only — gold labels enter the flow exclusively
// through the evaluation step.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attrgen/baselines.hpp"
#include "attrgen/catalog.hpp"
#include "attrgen/decode.hpp"
#include "attrgen/evalkit.hpp"
#include "attrgen/model.hpp"
#include "attrgen/textproc.hpp"
#include "attrgen/train.hpp"
#include "attrgen/types.hpp"

namespace attrgen::pipeline {

enum class ExperimentKind {
  Main,
  NegativeAblation,
  ZeroShot,
  Applicability,
  Multimodal,
  ArchSweep,
};
const char* experiment_name(ExperimentKind kind);
ExperimentKind experiment_from_name(const std::string& name);

struct ExperimentConfig {
  std::filesystem::path world_spec_path;
  int n_products = 2000;
  double strong_fraction = 0.25;
  double train_frac = 0.7;  // product-level split; remainder after eval is test
  double eval_frac = 0.1;

  model::ModelConfig model;  // vocab_size is filled in at training time
  train::StageSpec stage1;
  train::StageSpec stage2{.stage = train::Stage::StrongOnly};
  bool two_stage = true;

  double precision_target = evalkit::kDefaultPrecisionTarget;  // P
  int min_support = evalkit::kDefaultMinSupport;               // S
  int beam_k = 2;                                              // K

  ExperimentKind kind = ExperimentKind::Main;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir;

  // Driver-specific knobs.
  double zero_shot_holdout = 0.2;        // PAC fraction whose strong labels are withheld
  double bucket_cut = 0.90;              // applicability bucket boundary
  int applicability_sample_per_pac = 50;  // audited records per PAC
  std::vector<int> sweep_d_models{32, 64, 128};

  void validate() const;  // throws ValidationError naming the field
  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);

  // Digest of the canonical JSON form; independent of file formatting.
  std::string digest() const;
};

// --- Data plumbing -----------------------------------------------------------

struct DataSplits {
  catalog::Dataset train, eval, test;
};

// Product-level split via assign_split; each label record follows its product.
DataSplits split_dataset(const catalog::Dataset& full, std::uint64_t seed, double train_frac,
                         double eval_frac);

// Vocabulary over the schema (attribute names, enumerated value domains) plus
// the training products' text fields. Value domains are catalog metadata, not
// per-record gold: without them an attribute with no explicit surface mass
// would have untokenizable targets.
textproc::Vocabulary build_vocab(const catalog::WorldSpec& spec,
                                 const std::vector<Product>& train_products);

enum class LabelSource { Weak, Strong };

// Serialized training examples for every record carrying the requested label.
// Embeddings are attached only when the model has the fused channel.
std::vector<train::LabeledExample> make_examples(const catalog::Dataset& split,
                                                 const textproc::Vocabulary& vocab,
                                                 const model::ModelConfig& config,
                                                 LabelSource source);

// Prediction task: record identity without its labels.
struct Task {
  std::string product_id;
  PacScope pac;
};
std::vector<Task> tasks_from_labels(const std::vector<catalog::LabelRecord>& labels);
// Reads labels.jsonl parsing identity fields only (see phase separation note).
std::vector<Task> read_tasks_jsonl(const std::filesystem::path& path);

std::vector<decode::PredictionRecord> predict_records(const model::ModelConfig& config,
                                                      const model::Parameters& params,
                                                      const textproc::Vocabulary& vocab,
                                                      const std::vector<Product>& products,
                                                      const std::vector<Task>& tasks, int k);

// Joins predictions to gold labels by (product_id, pac); a prediction without
// a matching gold record is an error.
std::vector<evalkit::EvalRecord> to_eval_records(
    const std::vector<decode::PredictionRecord>& predictions,
    const std::vector<catalog::LabelRecord>& gold);

// Fraction of records whose prediction matches gold exactly (all kinds).
double exact_match_rate(const std::vector<evalkit::EvalRecord>& records);
// Match fraction over records whose gold kind is Values (unthresholded).
double value_recall(const std::vector<evalkit::EvalRecord>& records);

// --- Manifests ---------------------------------------------------------------

struct Manifest {
  std::string command;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::map<std::string, std::string> inputs;   // path as consumed -> digest
  std::map<std::string, std::string> outputs;  // filename in this dir -> digest
};

void write_manifest(const std::filesystem::path& dir, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& dir);
// Re-digests dir/filename against the manifest's outputs entry; IoError on a
// missing entry, missing file, or mismatch.
void verify_artifact(const std::filesystem::path& dir, const std::string& filename);

// --- Pipeline commands ---------------------------------------------------------
// Each command materializes one directory; run_main chains all four.

// world.json + products.jsonl + labels.jsonl
void cmd_synth(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

struct TrainSummary {
  double stage1_best_accuracy = 0.0;
  std::optional<double> stage2_best_accuracy;
  train::DataAudit audit;
};
// vocab.txt + model.json + ckpt/ + stage logs + audit.json
TrainSummary cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                       const std::filesystem::path& out_dir);

// predictions.jsonl over the test split
void cmd_predict(const ExperimentConfig& cfg, const std::filesystem::path& model_dir,
                 const std::filesystem::path& data_dir, const std::filesystem::path& out_dir);

// pac_reports.csv + aggregate.json + applicability.json
evalkit::AggregateReport cmd_eval(const ExperimentConfig& cfg,
                                  const std::filesystem::path& predictions_dir,
                                  const std::filesystem::path& data_dir,
                                  const std::filesystem::path& out_dir);

// --- Experiment drivers --------------------------------------------------------
// Every driver populates cfg.output_dir (data/, per-arm artifacts, report.json,
// manifest.json) and returns the numbers its acceptance checks read.

struct MainResult {
  evalkit::AggregateReport aggregate;
  TrainSummary training;
  std::filesystem::path run_dir;
};
MainResult run_main(const ExperimentConfig& cfg);

struct PhenomenonAuditRow {
  std::string phenomenon;
  long long records = 0;           // test records drawn as this phenomenon
  long long with_candidates = 0;   // concrete (backfillable) predictions on them
  long long without_candidates = 0;
  long long with_matches = 0;
  long long without_matches = 0;
};

struct AblationResult {
  // "full" = every test record; "restricted" = gold-Values records only (the
  // slice where the ablated arm pays no abstention penalty).
  double with_ar_full = 0.0, without_ar_full = 0.0;
  double with_ar_restricted = 0.0, without_ar_restricted = 0.0;
  std::optional<double> with_recall_full, without_recall_full;
  std::optional<double> with_recall_restricted, without_recall_restricted;
  long long without_negative_outputs = 0;  // [NA]/[NO] emissions by the ablated arm
  std::vector<PhenomenonAuditRow> audit;
  std::filesystem::path run_dir;
};
AblationResult run_ablate_negative(const ExperimentConfig& cfg);

struct SubsetEval {
  int n_pacs = 0;
  int n_accepted = 0;
  double ar = 0.0;
  std::optional<double> recall;
};

struct ZeroShotResult {
  SubsetEval with_a, with_b, without_a, without_b;  // arm x subset
  double model_accuracy_b = 0.0;     // with-arm exact match on subset-B test records
  double majority_accuracy_b = 0.0;  // per-PAC majority-gold baseline, same records
  bool strong_b_withheld = true;     // id audit over every arm's training examples
  std::size_t n_b_pacs = 0;
  std::filesystem::path run_dir;
};
ZeroShotResult run_zero_shot(const ExperimentConfig& cfg);

struct ApplicabilityResult {
  evalkit::ApplicabilityReport generative, bow, encoder;
  double always_applicable_accuracy = 0.0;  // majority-guess reference
  std::size_t n_records = 0;
  std::filesystem::path run_dir;
};
ApplicabilityResult run_applicability(const ExperimentConfig& cfg);

struct MultimodalResult {
  double image_recall_text = 0.0, image_recall_fused = 0.0;
  double nonimage_recall_text = 0.0, nonimage_recall_fused = 0.0;
  std::size_t shared_tensors = 0;           // transferred from the text checkpoint
  bool shared_equal_at_start = false;       // bitwise audit after the transfer
  std::filesystem::path run_dir;
};
MultimodalResult run_multimodal(const ExperimentConfig& cfg);

struct SweepRow {
  int d_model = 0;
  long long param_count = 0;
  double best_eval_accuracy = 0.0;
  double ar = 0.0;
  std::optional<double> recall;
};
struct SweepResult {
  std::vector<SweepRow> rows;
  std::filesystem::path run_dir;
};
SweepResult run_arch_sweep(const ExperimentConfig& cfg);

// Collects report.json + manifest.json from every direct child run directory
// into one summary table (JSON text, one row per run).
std::string summarize_runs(const std::filesystem::path& runs_dir);

}  // namespace attrgen::pipeline
