#pragma once

// Reference systems the generative model is measured against:
//   - an extraction tagger (shared encoder stack + per-token BIO head) whose
//     recall is structurally capped by what appears verbatim in the text;
//   - a per-PAC bag-of-words multi-label classifier over the enumerated value
//     domain, trained on audited labels only;
//   - two binary applicability probes: bag-of-words logistic regression and a
//     sigmoid head over the shared encoder stack.
// Value-predicting systems emit decode::Prediction so evalkit consumes them
// through the same records.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attrgen/decode.hpp"
#include "attrgen/kernels.hpp"
#include "attrgen/model.hpp"
#include "attrgen/textproc.hpp"
#include "attrgen/types.hpp"
#include "attrgen/valueset.hpp"

namespace attrgen::baselines {

// --- Extraction tagger ------------------------------------------------------

struct TaggerConfig {
  model::ModelConfig model;
  double o_weight = 0.25;  // O-class loss weight against B/I at 1.0
  int max_epochs = 15;
  int batch_size = 16;
  model::OptimizerConfig optimizer;
};

struct TaggerModel {
  model::ModelConfig config;
  double o_weight = 0.25;
  model::Parameters params;
};

// BIO tags for a serialized input: every verbatim, non-overlapping occurrence
// of each gold value (as a token sequence) is tagged B I*, left to right;
// NA/NO golds and values that never appear verbatim contribute only O tags.
std::vector<int> bio_supervision(const textproc::Vocabulary& vocab,
                                 std::span<const int> input_tokens, const ValueSet& gold);

struct TagItem {
  std::string product_id;
  std::vector<int> input_tokens;
  std::optional<std::vector<double>> embedding;
  std::vector<int> tags;
};

// Weighted-CE training over fixed epochs; deterministic in (config, items,
// seed). Errors when no item carries a single positive (B/I) tag: a tagger
// with all-O supervision has nothing to learn.
TaggerModel train_tagger(const TaggerConfig& config, const std::vector<TagItem>& items,
                         std::uint64_t seed);

// Greedy BIO decode over tag_probs: spans open at B and extend through I;
// span tokens are joined, normalized, and deduplicated. No spans → NO.
// Confidence: per span, the mean probability of the chosen tags; the min
// over spans when several; for NO, the mean O probability over all tokens.
decode::Prediction extract_values(const TaggerModel& tagger, const textproc::Vocabulary& vocab,
                                  const std::string& attribute, const Product& product);

// --- Per-PAC multi-label classifier ------------------------------------------

struct MlcConfig {
  int max_iters = 300;
  double lr = 0.5;
  double l2 = 1e-4;
  double threshold = 0.5;  // per-value decision cut
};

struct MlcModel {
  PacScope pac;
  std::vector<std::string> domain;          // enumerated values, sorted
  std::vector<std::string> feature_tokens;  // BoW vocabulary, sorted
  Matrix weights;                           // |domain| x (|features| + 1 bias)
  double threshold = 0.5;
};

// Bag-of-words token counts over title, bullets, and description.
std::map<std::string, int> bow_counts(const Product& product);

// One-vs-rest logistic regression on strong labels; products and golds are
// parallel arrays. The enumerated domain is read off the gold value sets;
// fewer than two distinct values is a degenerate classifier and an error.
MlcModel train_mlc(const PacScope& pac, const std::vector<Product>& products,
                   const std::vector<ValueSet>& golds, const MlcConfig& config);

// Values whose probability clears the threshold; empty set → NO (never NA).
// Confidence is the maximum value probability either way.
decode::Prediction mlc_predict(const MlcModel& mlc, const Product& product);

// --- Binary bag-of-words probe ------------------------------------------------

struct BowClassifier {
  std::vector<std::string> feature_tokens;
  Matrix weights;  // 1 x (|features| + 1 bias)
  double threshold = 0.5;
};

// Logistic regression on {0,1} labels over bow_counts features.
BowClassifier train_bow_classifier(const std::vector<Product>& products,
                                   const std::vector<int>& labels, const MlcConfig& config);
double bow_classifier_prob(const BowClassifier& clf, const Product& product);

// --- Shared-encoder binary probe ----------------------------------------------
// Sequence-level sigmoid readout over the same encoder stack as the
// generative model; one probe covers every PAC because the serialized input
// names the attribute.

struct EncoderProbeConfig {
  model::ModelConfig model;
  int max_epochs = 10;
  int batch_size = 16;
  model::OptimizerConfig optimizer;
};

struct EncoderProbe {
  model::ModelConfig config;
  model::Parameters params;
};

struct ClsItem {
  std::string product_id;
  std::vector<int> input_tokens;
  std::optional<std::vector<double>> embedding;
  int label = 0;
};

// Binary-CE training over fixed epochs; deterministic in (config, items,
// seed). Errors on an empty or single-class item set.
EncoderProbe train_encoder_probe(const EncoderProbeConfig& config,
                                 const std::vector<ClsItem>& items, std::uint64_t seed);

double probe_prob(const EncoderProbe& probe, std::span<const int> tokens,
                  const std::vector<double>* embedding = nullptr);

}  // namespace attrgen::baselines
