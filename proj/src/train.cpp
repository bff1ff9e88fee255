#include "attrgen/train.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include "attrgen/common.hpp"
#include "attrgen/decode.hpp"
#include "attrgen/rng.hpp"
#include "attrgen/textproc.hpp"

namespace attrgen::train {

const char* stage_name(Stage s) {
  return s == Stage::MixedWeakStrong ? "mixed_weak_strong" : "strong_only";
}

void StageSpec::validate() const {
  if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
  if (patience < 1) throw ValidationError("patience must be >= 1");
  if (min_delta < 0.0) throw ValidationError("min_delta must be >= 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
}

std::string train_log_csv(const TrainLog& log) {
  std::ostringstream out;
  out << "epoch,stage,loss,eval_accuracy,checkpoint_id\n";
  for (const auto& e : log.epochs) {
    out << e.epoch << ',' << stage_name(e.stage) << ',' << format_double(e.loss) << ','
        << format_double(e.eval_accuracy) << ',' << e.checkpoint_id << '\n';
  }
  return out.str();
}

void write_train_log_csv(const std::filesystem::path& path, const TrainLog& log) {
  write_text_file(path, train_log_csv(log));
}

bool plateau_detect(const std::vector<double>& history, int patience, double min_delta) {
  if (patience < 1) throw ValidationError("patience must be >= 1");
  const int n = static_cast<int>(history.size());
  if (n <= patience) return false;
  double best_recent = history[static_cast<std::size_t>(n - patience)];
  for (int i = n - patience + 1; i < n; ++i) {
    best_recent = std::max(best_recent, history[static_cast<std::size_t>(i)]);
  }
  double best_before = history[0];
  for (int i = 1; i < n - patience; ++i) {
    best_before = std::max(best_before, history[static_cast<std::size_t>(i)]);
  }
  return best_recent <= best_before + min_delta;
}

double exact_match_accuracy(const model::ModelConfig& config, const model::Parameters& params,
                            const std::vector<LabeledExample>& eval_set) {
  if (eval_set.empty()) throw ValidationError("eval set must be non-empty");
  int correct = 0;
  for (const auto& ex : eval_set) {
    const std::vector<double>* emb = ex.embedding ? &*ex.embedding : nullptr;
    const auto enc = model::encode(config, params, ex.input_tokens, {}, emb);
    decode::ModelScorer scorer(config, params, enc);
    const auto got = decode::greedy_decode(scorer, config.max_output_len, textproc::kEos);
    // Target carries a leading [BOS] that decoding never emits.
    const std::span<const int> want(ex.target_tokens.data() + 1, ex.target_tokens.size() - 1);
    if (got.tokens.size() == want.size() &&
        std::equal(got.tokens.begin(), got.tokens.end(), want.begin())) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(eval_set.size());
}

StageResult run_stage(const model::ModelConfig& config, const model::Parameters& start,
                      const std::vector<LabeledExample>& examples,
                      const std::vector<LabeledExample>& eval_set, const StageSpec& spec,
                      std::uint64_t seed) {
  spec.validate();
  if (examples.empty()) throw ValidationError("training set must be non-empty");
  for (const auto& ex : examples) {
    if (ex.target_tokens.size() < 2) {
      throw ValidationError("target must hold at least [BOS] and [EOS]: " + ex.product_id);
    }
  }

  StageResult result;
  result.params = start;
  model::Parameters current = start;
  model::AdamState adam;

  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> history;

  for (int epoch = 1; epoch <= spec.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng epoch_rng(mix_seed(mix_seed(seed, fnv1a64("epoch-shuffle")), static_cast<std::uint64_t>(epoch)));
    epoch_rng.shuffle(order);

    double ce_total = 0.0;
    std::int64_t token_total = 0;
    std::size_t cursor = 0;
    int batch_index = 0;
    while (cursor < order.size()) {
      model::TrainBatch batch;
      batch.dropout_seed = mix_seed(mix_seed(seed, static_cast<std::uint64_t>(epoch) * 100003ull),
                                    static_cast<std::uint64_t>(batch_index));
      const std::size_t end =
          std::min(order.size(), cursor + static_cast<std::size_t>(spec.batch_size));
      for (std::size_t i = cursor; i < end; ++i) {
        const auto& ex = examples[order[i]];
        batch.examples.push_back(
            model::TrainExample{ex.input_tokens, {}, ex.embedding, ex.target_tokens});
        result.audit.ids_seen.insert(ex.product_id);
        (ex.weak ? result.audit.weak_examples : result.audit.strong_examples) += 1;
      }
      const auto lg = model::loss_and_grads(config, current, batch);
      model::apply_update(current, lg.grads, adam, spec.optimizer);
      ce_total += lg.loss * static_cast<double>(lg.n_tokens);
      token_total += lg.n_tokens;
      cursor = end;
      ++batch_index;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.stage = spec.stage;
    entry.loss = ce_total / static_cast<double>(token_total);
    entry.eval_accuracy = exact_match_accuracy(config, current, eval_set);
    entry.checkpoint_id = std::string(stage_name(spec.stage)) + "-epoch" + std::to_string(epoch);
    entry.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(entry.eval_accuracy);
    result.log.epochs.push_back(entry);

    // Strictly-better keeps the earliest epoch on ties.
    if (result.best_epoch == 0 || entry.eval_accuracy > result.best_accuracy) {
      result.best_accuracy = entry.eval_accuracy;
      result.best_epoch = epoch;
      result.params = current;
    }
    if (plateau_detect(history, spec.patience, spec.min_delta)) break;
  }
  return result;
}

StageResult run_stage1(const model::ModelConfig& config, const model::Parameters& start,
                       const std::vector<LabeledExample>& weak,
                       const std::vector<LabeledExample>& strong,
                       const std::vector<LabeledExample>& eval_set, const StageSpec& spec,
                       std::uint64_t seed) {
  if (weak.empty() && strong.empty()) {
    throw ValidationError("stage 1 needs a non-empty weak/strong union");
  }
  std::vector<LabeledExample> unioned;
  unioned.reserve(weak.size() + strong.size());
  unioned.insert(unioned.end(), weak.begin(), weak.end());
  unioned.insert(unioned.end(), strong.begin(), strong.end());
  StageSpec stage_spec = spec;
  stage_spec.stage = Stage::MixedWeakStrong;
  return run_stage(config, start, unioned, eval_set, stage_spec, seed);
}

StageResult run_stage2(const model::ModelConfig& config, const StageResult& stage1,
                       const std::vector<LabeledExample>& strong,
                       const std::vector<LabeledExample>& eval_set, const StageSpec& spec,
                       std::uint64_t seed) {
  if (strong.empty()) throw ValidationError("stage 2 needs a non-empty strong set");
  for (const auto& ex : strong) {
    if (ex.weak) throw ValidationError("stage 2 received a weak example: " + ex.product_id);
  }
  StageSpec stage_spec = spec;
  stage_spec.stage = Stage::StrongOnly;
  return run_stage(config, stage1.params, strong, eval_set, stage_spec, seed);
}

}  // namespace attrgen::train
