#include "attrgen/decode.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "attrgen/common.hpp"
#include "attrgen/jsonio.hpp"

namespace attrgen::decode {

using nlohmann::json;

namespace {

struct Beam {
  std::vector<int> tokens;
  double log_prob_sum = 0.0;
  bool finished = false;

  double score() const {
    return log_prob_sum / static_cast<double>(tokens.empty() ? 1 : tokens.size());
  }
};

bool beam_better(const Beam& a, const Beam& b) {
  const double sa = a.score();
  const double sb = b.score();
  if (sa != sb) return sa > sb;
  return a.tokens < b.tokens;  // deterministic lexicographic tie-break
}

}  // namespace

ModelScorer::ModelScorer(const model::ModelConfig& config, const model::Parameters& params,
                         const model::EncoderOutput& enc)
    : config_(config), params_(params), enc_(enc) {}

int ModelScorer::vocab_size() const { return config_.vocab_size; }

std::vector<double> ModelScorer::log_probs(std::span<const int> prefix) {
  std::vector<int> full(prefix.size() + 1);
  full[0] = textproc::kBos;
  std::copy(prefix.begin(), prefix.end(), full.begin() + 1);
  const Matrix logits = model::decode_logits(config_, params_, enc_, full);
  const double* row = logits.row(logits.rows - 1);
  double mx = row[0];
  for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (int j = 0; j < logits.cols; ++j) sum += std::exp(row[j] - mx);
  const double log_z = mx + std::log(sum);
  std::vector<double> lp(static_cast<std::size_t>(logits.cols));
  for (int j = 0; j < logits.cols; ++j) lp[static_cast<std::size_t>(j)] = row[j] - log_z;
  return lp;
}

std::vector<ScoredSequence> beam_search(TokenScorer& scorer, int k, int max_len, int eos_id) {
  if (k < 1) throw ValidationError("beam width must be >= 1");
  if (max_len < 1) throw ValidationError("max_len must be >= 1");
  const int vocab = scorer.vocab_size();
  if (eos_id < 0 || eos_id >= vocab) throw ValidationError("eos id outside vocabulary");

  std::vector<Beam> pool{Beam{}};
  for (int step = 1; step <= max_len; ++step) {
    bool any_live = false;
    for (const Beam& b : pool) any_live = any_live || !b.finished;
    if (!any_live) break;
    std::vector<Beam> candidates;
    candidates.reserve(pool.size() * static_cast<std::size_t>(vocab));
    for (Beam& b : pool) {
      if (b.finished) {
        candidates.push_back(std::move(b));
        continue;
      }
      const auto lp = scorer.log_probs(b.tokens);
      if (step == max_len) {
        // Out of positions: force-finish with [EOS] at its true probability.
        Beam child = b;
        child.tokens.push_back(eos_id);
        child.log_prob_sum += lp[static_cast<std::size_t>(eos_id)];
        child.finished = true;
        candidates.push_back(std::move(child));
      } else {
        for (int t = 0; t < vocab; ++t) {
          Beam child = b;
          child.tokens.push_back(t);
          child.log_prob_sum += lp[static_cast<std::size_t>(t)];
          child.finished = t == eos_id;
          candidates.push_back(std::move(child));
        }
      }
    }
    std::sort(candidates.begin(), candidates.end(), beam_better);
    if (static_cast<int>(candidates.size()) > k) {
      candidates.resize(static_cast<std::size_t>(k));
    }
    pool = std::move(candidates);
  }

  std::sort(pool.begin(), pool.end(), beam_better);
  std::vector<ScoredSequence> out;
  for (const Beam& b : pool) {
    if (!b.finished) continue;  // unreachable: max_len force-finishes
    out.push_back(ScoredSequence{b.tokens, b.score()});
  }
  return out;
}

std::vector<ScoredSequence> beam_search(const model::ModelConfig& config,
                                        const model::Parameters& params,
                                        const model::EncoderOutput& enc, int k, int max_len) {
  ModelScorer scorer(config, params, enc);
  // The decoder consumes [BOS] plus all emitted tokens except the final
  // [EOS], so max_output_len positions fit exactly max_output_len tokens.
  const int limit = max_len > 0 ? max_len : config.max_output_len;
  return beam_search(scorer, k, limit, textproc::kEos);
}

ScoredSequence greedy_decode(TokenScorer& scorer, int max_len, int eos_id) {
  auto result = beam_search(scorer, 1, max_len, eos_id);
  return result.front();
}

double confidence(std::span<const double> scores) {
  if (scores.empty()) throw ValidationError("confidence needs at least one score");
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[i - 1]) {
      throw ValidationError("confidence scores must be sorted non-increasing");
    }
  }
  if (scores.size() == 1) return 1.0;
  // softmax numerator for the top score, with the top score as the max shift
  double denom = 0.0;
  for (double s : scores) denom += std::exp(s - scores[0]);
  return 1.0 / denom;
}

Prediction predict(const model::ModelConfig& config, const model::Parameters& params,
                   const textproc::Vocabulary& vocab, const std::string& attribute,
                   const Product& product, int k) {
  const auto tokens = textproc::serialize_input(vocab, attribute, product, config.max_input_len);
  const std::vector<double>* emb =
      (config.use_embedding_channel && product.embedding.has_value()) ? &*product.embedding
                                                                      : nullptr;
  const auto enc = model::encode(config, params, tokens, {}, emb);
  auto sequences = beam_search(config, params, enc, k);
  Prediction pred;
  pred.raw = std::move(sequences);
  std::vector<double> scores;
  scores.reserve(pred.raw.size());
  for (const auto& s : pred.raw) scores.push_back(s.score);
  pred.confidence = confidence(scores);
  pred.value_set = textproc::parse_output(vocab, pred.raw.front().tokens);
  return pred;
}

void write_predictions_jsonl(const std::filesystem::path& path,
                             const std::vector<PredictionRecord>& records) {
  std::vector<json> lines;
  lines.reserve(records.size());
  for (const auto& r : records) {
    json j;
    j["product_id"] = r.product_id;
    j["pt"] = r.pac.pt;
    j["attribute"] = r.pac.attribute;
    j["country"] = r.pac.country;
    j["predicted"] = value_set_to_json(r.predicted);
    j["confidence"] = r.confidence;
    j["raw_sequences"] = r.raw_sequences;
    j["raw_scores"] = r.raw_scores;
    lines.push_back(std::move(j));
  }
  write_jsonl(path, lines);
}

std::vector<PredictionRecord> read_predictions_jsonl(const std::filesystem::path& path) {
  std::vector<PredictionRecord> out;
  for (const json& j : read_jsonl(path)) {
    PredictionRecord r;
    r.product_id = j.at("product_id").get<std::string>();
    r.pac.pt = j.at("pt").get<std::string>();
    r.pac.attribute = j.at("attribute").get<std::string>();
    r.pac.country = j.at("country").get<std::string>();
    r.predicted = value_set_from_json(j.at("predicted"));
    r.confidence = j.at("confidence").get<double>();
    r.raw_sequences = j.at("raw_sequences").get<std::vector<std::string>>();
    r.raw_scores = j.at("raw_scores").get<std::vector<double>>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace attrgen::decode
