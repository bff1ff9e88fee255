#pragma once

// Greedy and beam-search decoding with a softmax-over-top-K confidence score.
//
// Scores are length-normalized log-probabilities: the sum of token log-probs
// divided by the token count (the terminating [EOS] included), which keeps
// one-token negatives like [NA] comparable with multi-value outputs.  Search
// is deterministic: ties in score break lexicographically on token ids.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "attrgen/model.hpp"
#include "attrgen/textproc.hpp"
#include "attrgen/types.hpp"
#include "attrgen/valueset.hpp"

namespace attrgen::decode {

struct ScoredSequence {
  std::vector<int> tokens;  // emitted tokens, ending with [EOS]; no [BOS]
  double score = 0.0;       // mean token log-probability, always <= 0
};

// Next-token distribution source. Beam search is written against this so the
// search itself can be tested on hand-set toy distributions.
class TokenScorer {
public:
  virtual ~TokenScorer() = default;
  virtual int vocab_size() const = 0;
  // Log-probabilities over the next token given the emitted prefix (no [BOS];
  // rows normalize to 1 in probability space).
  virtual std::vector<double> log_probs(std::span<const int> prefix) = 0;
};

// Scores continuations with a trained model against one encoded input.
class ModelScorer : public TokenScorer {
public:
  ModelScorer(const model::ModelConfig& config, const model::Parameters& params,
              const model::EncoderOutput& enc);
  int vocab_size() const override;
  std::vector<double> log_probs(std::span<const int> prefix) override;

private:
  const model::ModelConfig& config_;
  const model::Parameters& params_;
  const model::EncoderOutput& enc_;
};

// Up to k finished sequences, best first. Every sequence ends with eos_id;
// beams still alive at max_len are force-finished with [EOS]. max_len counts
// emitted tokens including the terminator.
std::vector<ScoredSequence> beam_search(TokenScorer& scorer, int k, int max_len, int eos_id);

// Convenience: beam_search over a trained model; max_len defaults to the
// longest sequence the decoder positions allow.
std::vector<ScoredSequence> beam_search(const model::ModelConfig& config,
                                        const model::Parameters& params,
                                        const model::EncoderOutput& enc, int k,
                                        int max_len = -1);

// Argmax decoding; identical to beam_search with k = 1.
ScoredSequence greedy_decode(TokenScorer& scorer, int max_len, int eos_id);

// exp(p1) / sum_j exp(pj) over the top-K scores, computed with max
// subtraction; exactly 1.0 for K = 1. Scores must be sorted non-increasing.
double confidence(std::span<const double> scores);

struct Prediction {
  ValueSet value_set;
  double confidence = 0.0;
  std::vector<ScoredSequence> raw;  // top-K, best first
};

// serialize_input -> encode (embedding included when the model has the
// channel) -> beam_search(k) -> parse_output of the best sequence, with the
// softmax-over-top-K confidence attached.
Prediction predict(const model::ModelConfig& config, const model::Parameters& params,
                   const textproc::Vocabulary& vocab, const std::string& attribute,
                   const Product& product, int k = 2);

// One line of batch-prediction output; evalkit consumes these uniformly for
// every system (generative or baseline).
struct PredictionRecord {
  std::string product_id;
  PacScope pac;
  ValueSet predicted;
  double confidence = 0.0;
  std::vector<std::string> raw_sequences;  // decoded, space-joined
  std::vector<double> raw_scores;
};

void write_predictions_jsonl(const std::filesystem::path& path,
                             const std::vector<PredictionRecord>& records);
std::vector<PredictionRecord> read_predictions_jsonl(const std::filesystem::path& path);

}  // namespace attrgen::decode
