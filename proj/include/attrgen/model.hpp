#pragma once

// Miniature encoder-decoder transformer in 64-bit floats with hand-written
// exact gradients (verified against finite differences in the test suite).
//
// Architecture: pre-LN residual blocks with GELU feed-forwards, learned
// positional embeddings, and an output projection tied to the token embedding
// table.  The smooth activation keeps finite-difference gradient checks clean.
//
// Early-fusion embedding channel: encoder positional row 0 is reserved for a
// projected external embedding (the [IMG] slot); token i always sits at
// positional row i+1 whether or not the channel is active.  Text-only and
// multimodal models therefore share every tensor shape except the projection
// itself, so a multimodal model can be initialized from a text-only
// checkpoint, and masking the [IMG] key reproduces the text-only forward
// bit for bit.
//
// Determinism: initialization derives each tensor's stream from (seed, tensor
// name); forward/backward accumulate in fixed order; the OpenMP kernels are
// bit-identical to their serial references, so results do not depend on the
// thread count.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attrgen/kernels.hpp"

namespace attrgen::model {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 32;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 96;
  int max_input_len = 48;
  int max_output_len = 8;
  double dropout_rate = 0.0;  // applied only inside loss_and_grads
  bool use_embedding_channel = false;
  int embedding_dim = 16;

  void validate() const;  // throws ValidationError naming the field
  int head_dim() const { return d_model / n_heads; }

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// Named tensors; the sorted map order defines checkpoint and update order.
using Parameters = std::map<std::string, Matrix>;

Parameters init_params(const ModelConfig& config, std::uint64_t seed);
long long param_count(const Parameters& params);

// Copies every tensor whose name and shape match into dst; returns the copied
// names (used when seeding a multimodal model from a text-only checkpoint).
std::vector<std::string> transfer_params(Parameters& dst, const Parameters& src);

struct EncoderOutput {
  Matrix h;                          // (rows, d_model); rows = tokens (+1 with [IMG])
  std::vector<unsigned char> mask;   // per-row key mask for cross-attention
  bool has_img = false;              // row 0 is the fused embedding slot
};

// mask covers the token sequence; it may instead cover the full output rows
// (tokens + [IMG]) to control the fused slot explicitly, e.g. to mask it out.
// Empty mask means all live.
EncoderOutput encode(const ModelConfig& config, const Parameters& params,
                     std::span<const int> tokens, std::span<const unsigned char> mask = {},
                     const std::vector<double>* embedding = nullptr);

// Full-prefix decoder forward; row r depends only on prefix[0..r].
Matrix decode_logits(const ModelConfig& config, const Parameters& params,
                     const EncoderOutput& enc, std::span<const int> prefix);

// Incremental decoding with cached keys/values; bit-identical to the
// corresponding decode_logits rows.
struct DecoderState {
  int pos = 0;
  std::vector<Matrix> self_k, self_v;    // per layer, rows filled up to pos
  std::vector<Matrix> cross_k, cross_v;  // per layer, fixed
};
DecoderState init_decoder_state(const ModelConfig& config, const Parameters& params,
                                const EncoderOutput& enc);
std::vector<double> decode_step(const ModelConfig& config, const Parameters& params,
                                const EncoderOutput& enc, DecoderState& state, int token);

struct TrainExample {
  std::vector<int> input_tokens;
  std::vector<unsigned char> input_mask;     // empty = all live
  std::optional<std::vector<double>> embedding;
  std::vector<int> target_tokens;            // [BOS] ... [EOS] [PAD]*
};

struct TrainBatch {
  std::vector<TrainExample> examples;
  std::uint64_t dropout_seed = 0;  // only consulted when dropout_rate > 0
};

struct LossGrads {
  double loss = 0.0;        // mean token cross-entropy over non-pad targets
  long long n_tokens = 0;   // non-pad target count
  Parameters grads;
};
LossGrads loss_and_grads(const ModelConfig& config, const Parameters& params,
                         const TrainBatch& batch);

// --- Token-tagging head over the shared encoder stack ---------------------
// The extraction baseline reuses the encoder tensors verbatim (same names,
// same init streams) and adds a per-token 3-way projection; tag ids are
// 0 = O, 1 = B, 2 = I.

inline constexpr int kTagO = 0;
inline constexpr int kTagB = 1;
inline constexpr int kTagI = 2;
inline constexpr int kNumTags = 3;

struct TagExample {
  std::vector<int> input_tokens;
  std::optional<std::vector<double>> embedding;
  std::vector<int> tags;  // one per input token
};

struct TagBatch {
  std::vector<TagExample> examples;
  std::uint64_t dropout_seed = 0;
};

// Encoder tensors plus tag_head.{w,b}; shared tensors are bit-identical to
// init_params at the same seed, so transfer_params moves them either way.
Parameters init_tagger_params(const ModelConfig& config, std::uint64_t seed);

// Per-token tag distribution: one softmax row per input token (the fused
// embedding row, when present, is consumed by attention but emits no row).
Matrix tag_probs(const ModelConfig& config, const Parameters& params,
                 std::span<const int> tokens, const std::vector<double>* embedding = nullptr);

// Weighted token-level cross-entropy: O-tag positions are down-weighted by
// o_weight (in (0, 1]) to offset class imbalance. Loss is the weighted mean;
// n_tokens counts all tagged positions.
LossGrads tagger_loss_and_grads(const ModelConfig& config, const Parameters& params,
                                const TagBatch& batch, double o_weight);

// --- Binary classification head over the shared encoder stack -------------
// A sigmoid readout of the [BOS] row, used for sequence-level yes/no
// decisions (e.g. attribute applicability). Same tensor sharing contract as
// the tagging head.

struct ClsExample {
  std::vector<int> input_tokens;
  std::optional<std::vector<double>> embedding;
  int label = 0;  // 0 or 1
};

struct ClsBatch {
  std::vector<ClsExample> examples;
  std::uint64_t dropout_seed = 0;
};

// Encoder tensors plus cls_head.{w,b}.
Parameters init_classifier_params(const ModelConfig& config, std::uint64_t seed);

// P(label = 1 | tokens). The readout row is the first token row ([BOS] under
// the standard serialization), which attends to the whole input.
double classifier_prob(const ModelConfig& config, const Parameters& params,
                       std::span<const int> tokens,
                       const std::vector<double>* embedding = nullptr);

// Mean binary cross-entropy over the batch; n_tokens counts examples.
LossGrads classifier_loss_and_grads(const ModelConfig& config, const Parameters& params,
                                    const ClsBatch& batch);

struct OptimizerConfig {
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
};

struct AdamState {
  long long step = 0;
  std::map<std::string, Matrix> m, v;
};

// In-place Adam step with global-norm clipping.  Throws on a non-finite
// gradient, naming the offending tensor.
void apply_update(Parameters& params, const Parameters& grads, AdamState& state,
                  const OptimizerConfig& opt);

// Checkpoint = manifest.json (config, step, seed, tensor index) + tensors.bin
// (raw little-endian doubles in index order).  Byte-stable for equal inputs.
struct Checkpoint {
  ModelConfig config;
  Parameters params;
  long long step = 0;
  std::uint64_t seed = 0;
};
void save_checkpoint(const std::string& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace attrgen::model
