#include "attrgen/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "attrgen/common.hpp"
#include "attrgen/rng.hpp"

namespace attrgen::baselines {

namespace {

// Logistic loss gradient step shared by the MLC and the binary probe:
// full-batch gradient descent on w over rows of (features, bias) with L2.
// Rows of x are sparse index/count pairs into a dense weight row.
struct SparseRow {
  std::vector<std::pair<int, double>> feats;  // (feature index, count)
};

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double score_row(const SparseRow& row, const double* w, int n_features) {
  double z = w[n_features];  // bias
  for (const auto& [idx, cnt] : row.feats) z += w[idx] * cnt;
  return z;
}

// One-vs-rest training for a single target column. Deterministic: zero init,
// fixed iteration count, no sampling.
void train_logistic(const std::vector<SparseRow>& rows, const std::vector<double>& targets,
                    double* w, int n_features, const MlcConfig& config) {
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  std::vector<double> grad(static_cast<std::size_t>(n_features) + 1);
  for (int iter = 0; iter < config.max_iters; ++iter) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double err = sigmoid(score_row(rows[i], w, n_features)) - targets[i];
      for (const auto& [idx, cnt] : rows[i].feats) grad[static_cast<std::size_t>(idx)] += err * cnt;
      grad[static_cast<std::size_t>(n_features)] += err;
    }
    for (int j = 0; j <= n_features; ++j) {
      const double l2 = j < n_features ? config.l2 * w[j] : 0.0;  // bias unregularized
      w[j] -= config.lr * (grad[static_cast<std::size_t>(j)] * inv_n + l2);
    }
  }
}

std::vector<std::string> sorted_feature_tokens(const std::vector<Product>& products) {
  std::set<std::string> tokens;
  for (const auto& p : products) {
    for (const auto& [tok, cnt] : bow_counts(p)) tokens.insert(tok);
  }
  return {tokens.begin(), tokens.end()};
}

SparseRow featurize(const Product& product, const std::map<std::string, int>& index) {
  SparseRow row;
  for (const auto& [tok, cnt] : bow_counts(product)) {
    const auto it = index.find(tok);
    if (it != index.end()) row.feats.emplace_back(it->second, static_cast<double>(cnt));
  }
  return row;
}

}  // namespace

// --- Extraction tagger ------------------------------------------------------

std::vector<int> bio_supervision(const textproc::Vocabulary& vocab,
                                 std::span<const int> input_tokens, const ValueSet& gold) {
  std::vector<int> tags(input_tokens.size(), model::kTagO);
  if (gold.kind != ValueKind::Values) return tags;
  for (const auto& value : gold.values) {
    const auto words = textproc::tokenize(value);
    std::vector<int> ids;
    ids.reserve(words.size());
    bool known = !words.empty();
    for (const auto& w : words) {
      const int id = vocab.id(w);
      if (id == textproc::kUnk) known = false;
      ids.push_back(id);
    }
    // A value with out-of-vocabulary words cannot be located verbatim: id
    // equality against [UNK] would match unrelated words.
    if (!known) continue;
    for (std::size_t i = 0; i + ids.size() <= input_tokens.size();) {
      bool hit = true;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (input_tokens[i + k] != ids[k] || tags[i + k] != model::kTagO) {
          hit = false;
          break;
        }
      }
      if (hit) {
        tags[i] = model::kTagB;
        for (std::size_t k = 1; k < ids.size(); ++k) tags[i + k] = model::kTagI;
        i += ids.size();
      } else {
        ++i;
      }
    }
  }
  return tags;
}

TaggerModel train_tagger(const TaggerConfig& config, const std::vector<TagItem>& items,
                         std::uint64_t seed) {
  if (items.empty()) throw ValidationError("tagger training set must be non-empty");
  bool any_positive = false;
  for (const auto& item : items) {
    for (int t : item.tags) any_positive = any_positive || t != model::kTagO;
  }
  if (!any_positive) {
    throw ValidationError("tagger supervision has no positive spans in the entire dataset");
  }

  TaggerModel tagger;
  tagger.config = config.model;
  tagger.o_weight = config.o_weight;
  tagger.params = model::init_tagger_params(config.model, seed);
  model::AdamState adam;

  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng epoch_rng(
        mix_seed(mix_seed(seed, fnv1a64("tagger-shuffle")), static_cast<std::uint64_t>(epoch)));
    epoch_rng.shuffle(order);
    std::size_t cursor = 0;
    int batch_index = 0;
    while (cursor < order.size()) {
      model::TagBatch batch;
      batch.dropout_seed = mix_seed(mix_seed(seed, static_cast<std::uint64_t>(epoch) * 99991ull),
                                    static_cast<std::uint64_t>(batch_index));
      const std::size_t end =
          std::min(order.size(), cursor + static_cast<std::size_t>(config.batch_size));
      for (std::size_t i = cursor; i < end; ++i) {
        const auto& item = items[order[i]];
        batch.examples.push_back(
            model::TagExample{item.input_tokens, item.embedding, item.tags});
      }
      const auto lg = model::tagger_loss_and_grads(config.model, tagger.params, batch,
                                                   config.o_weight);
      model::apply_update(tagger.params, lg.grads, adam, config.optimizer);
      cursor = end;
      ++batch_index;
    }
  }
  return tagger;
}

decode::Prediction extract_values(const TaggerModel& tagger, const textproc::Vocabulary& vocab,
                                  const std::string& attribute, const Product& product) {
  const auto tokens =
      textproc::serialize_input(vocab, attribute, product, tagger.config.max_input_len);
  const std::vector<double>* emb =
      (tagger.config.use_embedding_channel && product.embedding.has_value())
          ? &*product.embedding
          : nullptr;
  const Matrix probs = model::tag_probs(tagger.config, tagger.params, tokens, emb);

  std::vector<int> tags(static_cast<std::size_t>(probs.rows));
  for (int r = 0; r < probs.rows; ++r) {
    const double* row = probs.row(r);
    int best = 0;
    for (int j = 1; j < model::kNumTags; ++j) {
      if (row[j] > row[best]) best = j;
    }
    tags[static_cast<std::size_t>(r)] = best;
  }

  std::set<std::string> values;
  double min_span_conf = 1.0;
  bool any_span = false;
  for (std::size_t i = 0; i < tags.size();) {
    if (tags[i] != model::kTagB) {
      ++i;  // orphan I tags open no span
      continue;
    }
    std::size_t j = i + 1;
    while (j < tags.size() && tags[j] == model::kTagI) ++j;
    std::string text;
    double conf_sum = 0.0;
    for (std::size_t k = i; k < j; ++k) {
      if (!text.empty()) text += ' ';
      text += vocab.token(tokens[k]);
      conf_sum += probs.at(static_cast<int>(k), tags[k]);
    }
    values.insert(normalize_value(text));
    min_span_conf = std::min(min_span_conf, conf_sum / static_cast<double>(j - i));
    any_span = true;
    i = j;
  }

  decode::Prediction pred;
  if (any_span) {
    pred.value_set = ValueSet::of({values.begin(), values.end()});
    pred.confidence = min_span_conf;
  } else {
    pred.value_set = ValueSet::no();
    double o_sum = 0.0;
    for (int r = 0; r < probs.rows; ++r) o_sum += probs.at(r, model::kTagO);
    pred.confidence = o_sum / static_cast<double>(probs.rows);
  }
  return pred;
}

// --- Per-PAC multi-label classifier ------------------------------------------

std::map<std::string, int> bow_counts(const Product& product) {
  std::map<std::string, int> counts;
  auto add = [&counts](const std::string& text) {
    for (const auto& tok : textproc::tokenize(text)) counts[tok] += 1;
  };
  add(product.title);
  add(product.bullets);
  add(product.description);
  return counts;
}

MlcModel train_mlc(const PacScope& pac, const std::vector<Product>& products,
                   const std::vector<ValueSet>& golds, const MlcConfig& config) {
  if (products.empty()) throw ValidationError("mlc training set must be non-empty");
  if (products.size() != golds.size()) {
    throw ValidationError("mlc products and golds must be parallel");
  }
  std::set<std::string> domain_set;
  for (const auto& g : golds) {
    if (g.kind != ValueKind::Values) continue;
    for (const auto& v : g.values) domain_set.insert(v);
  }
  if (domain_set.size() < 2) {
    throw ValidationError("mlc needs at least two distinct gold values: " + pac.key());
  }

  MlcModel mlc;
  mlc.pac = pac;
  mlc.domain = {domain_set.begin(), domain_set.end()};
  mlc.feature_tokens = sorted_feature_tokens(products);
  mlc.threshold = config.threshold;
  const int n_features = static_cast<int>(mlc.feature_tokens.size());
  mlc.weights = Matrix(static_cast<int>(mlc.domain.size()), n_features + 1);

  std::map<std::string, int> index;
  for (int i = 0; i < n_features; ++i) index.emplace(mlc.feature_tokens[static_cast<std::size_t>(i)], i);
  std::vector<SparseRow> rows;
  rows.reserve(products.size());
  for (const auto& p : products) rows.push_back(featurize(p, index));

  std::vector<double> targets(products.size());
  for (std::size_t v = 0; v < mlc.domain.size(); ++v) {
    const std::string& value = mlc.domain[v];
    for (std::size_t i = 0; i < golds.size(); ++i) {
      const auto& g = golds[i];
      targets[i] = g.kind == ValueKind::Values &&
                           std::find(g.values.begin(), g.values.end(), value) != g.values.end()
                       ? 1.0
                       : 0.0;
    }
    train_logistic(rows, targets, mlc.weights.row(static_cast<int>(v)), n_features, config);
  }
  return mlc;
}

decode::Prediction mlc_predict(const MlcModel& mlc, const Product& product) {
  std::map<std::string, int> index;
  const int n_features = static_cast<int>(mlc.feature_tokens.size());
  for (int i = 0; i < n_features; ++i) index.emplace(mlc.feature_tokens[static_cast<std::size_t>(i)], i);
  const SparseRow row = featurize(product, index);

  decode::Prediction pred;
  std::vector<std::string> above;
  double best = 0.0;
  for (std::size_t v = 0; v < mlc.domain.size(); ++v) {
    const double p = sigmoid(score_row(row, mlc.weights.row(static_cast<int>(v)), n_features));
    best = std::max(best, p);
    if (p > mlc.threshold) above.push_back(mlc.domain[v]);
  }
  pred.value_set = above.empty() ? ValueSet::no() : ValueSet::of(std::move(above));
  pred.confidence = best;
  return pred;
}

// --- Binary bag-of-words probe ------------------------------------------------

BowClassifier train_bow_classifier(const std::vector<Product>& products,
                                   const std::vector<int>& labels, const MlcConfig& config) {
  if (products.empty()) throw ValidationError("bow training set must be non-empty");
  if (products.size() != labels.size()) {
    throw ValidationError("bow products and labels must be parallel");
  }
  BowClassifier clf;
  clf.feature_tokens = sorted_feature_tokens(products);
  clf.threshold = config.threshold;
  const int n_features = static_cast<int>(clf.feature_tokens.size());
  clf.weights = Matrix(1, n_features + 1);

  std::map<std::string, int> index;
  for (int i = 0; i < n_features; ++i) index.emplace(clf.feature_tokens[static_cast<std::size_t>(i)], i);
  std::vector<SparseRow> rows;
  rows.reserve(products.size());
  for (const auto& p : products) rows.push_back(featurize(p, index));
  std::vector<double> targets(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) targets[i] = labels[i] != 0 ? 1.0 : 0.0;
  train_logistic(rows, targets, clf.weights.row(0), n_features, config);
  return clf;
}

double bow_classifier_prob(const BowClassifier& clf, const Product& product) {
  std::map<std::string, int> index;
  const int n_features = static_cast<int>(clf.feature_tokens.size());
  for (int i = 0; i < n_features; ++i) index.emplace(clf.feature_tokens[static_cast<std::size_t>(i)], i);
  return sigmoid(score_row(featurize(product, index), clf.weights.row(0), n_features));
}

// --- Shared-encoder binary probe ----------------------------------------------

EncoderProbe train_encoder_probe(const EncoderProbeConfig& config,
                                 const std::vector<ClsItem>& items, std::uint64_t seed) {
  if (items.empty()) throw ValidationError("probe training set must be non-empty");
  bool any[2] = {false, false};
  for (const auto& item : items) {
    if (item.label != 0 && item.label != 1) throw ValidationError("probe label must be 0 or 1");
    any[item.label] = true;
  }
  if (!any[0] || !any[1]) {
    throw ValidationError("probe training set must contain both classes");
  }

  EncoderProbe probe;
  probe.config = config.model;
  probe.params = model::init_classifier_params(config.model, seed);
  model::AdamState adam;

  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng epoch_rng(
        mix_seed(mix_seed(seed, fnv1a64("probe-shuffle")), static_cast<std::uint64_t>(epoch)));
    epoch_rng.shuffle(order);
    std::size_t cursor = 0;
    int batch_index = 0;
    while (cursor < order.size()) {
      model::ClsBatch batch;
      batch.dropout_seed = mix_seed(mix_seed(seed, static_cast<std::uint64_t>(epoch) * 95989ull),
                                    static_cast<std::uint64_t>(batch_index));
      const std::size_t end =
          std::min(order.size(), cursor + static_cast<std::size_t>(config.batch_size));
      for (std::size_t i = cursor; i < end; ++i) {
        const auto& item = items[order[i]];
        batch.examples.push_back(
            model::ClsExample{item.input_tokens, item.embedding, item.label});
      }
      const auto lg = model::classifier_loss_and_grads(config.model, probe.params, batch);
      model::apply_update(probe.params, lg.grads, adam, config.optimizer);
      cursor = end;
      ++batch_index;
    }
  }
  return probe;
}

double probe_prob(const EncoderProbe& probe, std::span<const int> tokens,
                  const std::vector<double>* embedding) {
  return model::classifier_prob(probe.config, probe.params, tokens, embedding);
}

}  // namespace attrgen::baselines
