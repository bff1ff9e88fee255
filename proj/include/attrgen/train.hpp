#pragma once

// Two-stage training loop: a mixed pass over weak (catalog-derived) plus
// strong (audited) labels, then a refinement pass over the strong labels
// alone, continuing from the first stage's best checkpoint. Each stage stops
// at max_epochs or when eval accuracy plateaus, and returns the epoch with
// the best exact-match accuracy on the eval split.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "attrgen/model.hpp"
#include "attrgen/types.hpp"

namespace attrgen::train {

enum class Stage { MixedWeakStrong, StrongOnly };
const char* stage_name(Stage s);

enum class EvalMetric { ExactMatchAccuracy };

struct StageSpec {
  Stage stage = Stage::MixedWeakStrong;
  int max_epochs = 20;
  int patience = 3;
  double min_delta = 1e-3;  // absolute accuracy improvement that resets the clock
  EvalMetric eval_metric = EvalMetric::ExactMatchAccuracy;
  int batch_size = 16;
  model::OptimizerConfig optimizer;

  void validate() const;  // throws ValidationError naming the field
};

// One training item: serialized input/target token ids plus provenance. The
// weak flag feeds the data-access audit, nothing else.
struct LabeledExample {
  std::string product_id;
  PacScope pac;
  std::vector<int> input_tokens;
  std::optional<std::vector<double>> embedding;
  std::vector<int> target_tokens;  // [BOS] ... [EOS]
  bool weak = false;
};

struct EpochLog {
  int epoch = 0;  // 1-based within the stage
  Stage stage = Stage::MixedWeakStrong;
  double loss = 0.0;           // mean cross-entropy per non-pad target token
  double eval_accuracy = 0.0;  // exact-sequence greedy match on the eval split
  double wall_seconds = 0.0;   // excluded from the CSV (not reproducible)
  std::string checkpoint_id;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
};

// CSV with fixed columns: epoch, stage, loss, eval_accuracy, checkpoint_id.
std::string train_log_csv(const TrainLog& log);
void write_train_log_csv(const std::filesystem::path& path, const TrainLog& log);

// What the loop actually consumed, for hygiene assertions: stage 2 must show
// weak_examples == 0, and ids_seen must be disjoint from the test split.
struct DataAudit {
  std::int64_t weak_examples = 0;
  std::int64_t strong_examples = 0;
  std::set<std::string> ids_seen;
};

// True iff the best accuracy over the last `patience` entries tops the best
// of the entries before them by no more than min_delta. Needs more than
// `patience` entries to fire at all.
bool plateau_detect(const std::vector<double>& history, int patience, double min_delta);

// Fraction of eval examples whose greedy decode equals the target token
// sequence exactly (NA/NO targets included; they are sequences like any
// other).
double exact_match_accuracy(const model::ModelConfig& config, const model::Parameters& params,
                            const std::vector<LabeledExample>& eval_set);

struct StageResult {
  model::Parameters params;  // best-accuracy checkpoint, not last epoch
  double best_accuracy = 0.0;
  int best_epoch = 0;  // 1-based
  TrainLog log;
  DataAudit audit;
};

// Core loop shared by both stages: shuffled minibatch epochs with per-epoch
// greedy evaluation, plateau stopping, and best-checkpoint selection.
// Deterministic in (config, params, examples, eval_set, spec, seed).
StageResult run_stage(const model::ModelConfig& config, const model::Parameters& start,
                      const std::vector<LabeledExample>& examples,
                      const std::vector<LabeledExample>& eval_set, const StageSpec& spec,
                      std::uint64_t seed);

// Stage 1 trains on the shuffled union of weak and strong examples. The
// strong side may be empty (pools with no audited labels); the union may not.
StageResult run_stage1(const model::ModelConfig& config, const model::Parameters& start,
                       const std::vector<LabeledExample>& weak,
                       const std::vector<LabeledExample>& strong,
                       const std::vector<LabeledExample>& eval_set, const StageSpec& spec,
                       std::uint64_t seed);

// Stage 2 continues from the stage-1 result on strong examples only; the
// optimizer restarts (only the weights carry over). Empty strong set is an
// error: callers skip stage 2 outright in weak-only configurations.
StageResult run_stage2(const model::ModelConfig& config, const StageResult& stage1,
                       const std::vector<LabeledExample>& strong,
                       const std::vector<LabeledExample>& eval_set, const StageSpec& spec,
                       std::uint64_t seed);

}  // namespace attrgen::train
