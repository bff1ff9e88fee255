#pragma once

// Deterministic synthetic catalog generator with a latent ground-truth oracle.
//
// A WorldSpec describes product types, countries, and attribute schemas plus a
// per-attribute probability table over surface phenomena.  generate_world()
// materializes disjoint per-country vocabularies and per-(attribute, country)
// lexical devices (synonym bigrams, derivation cues, inapplicability markers);
// emit_dataset() renders products whose text realizes each drawn phenomenon and
// emits one labeled record per (product, applicable attribute).
//
// Rendering guarantees, relied on by the evaluation suites:
//   - an EXPLICIT record's normalized gold value appears verbatim in the
//     product text; PERIPHRASTIC / IMPLICIT_DEFAULT / DERIVABLE /
//     NON_OBTAINABLE golds never do (country vocabularies and value pools use
//     disjoint consonant sets, so no accidental containment is possible);
//   - an INAPPLICABLE record's product text carries the attribute's marker
//     bigram *adjacently*; applicable products may carry both marker words but
//     never adjacent in marker order, so bag-of-words features cannot separate
//     the two cases while order-aware models can;
//   - image_only attribute values are encoded in the embedding channel only,
//     never in text (phenomenon IMAGE_ONLY, an extension of the base six).
//
// Everything is a pure function of (spec, seed, arguments): per-product random
// streams are derived from (seed, product index), so generation order and any
// parallel schedule cannot change the output.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attrgen/types.hpp"
#include "attrgen/valueset.hpp"

namespace attrgen::catalog {

enum class Phenomenon {
  Explicit,
  Periphrastic,
  ImplicitDefault,
  Derivable,
  NonObtainable,
  Inapplicable,
  ImageOnly,  // value lives in the embedding channel, not in text
};
inline constexpr int kNumMixPhenomena = 6;  // ImageOnly is not part of mix rows

const std::string& phenomenon_name(Phenomenon p);
Phenomenon phenomenon_from_name(const std::string& name);

struct DerivationCue {
  std::string implied_value;  // member of value_domain
};

struct AttributeSchema {
  std::string name;
  std::vector<std::string> value_domain;  // normalized, distinct
  // Optional user-supplied synonym surfaces: value -> country -> surface forms.
  // Left empty, generate_world materializes a two-word synonym per
  // (value, country) from the country vocabulary.
  std::map<std::string, std::map<std::string, std::vector<std::string>>> synonym_table;
  std::optional<std::string> default_value;  // required for ImplicitDefault mass
  std::optional<DerivationCue> derivation_cue;  // required for Derivable mass
  bool image_only = false;
  bool multi_valued = false;  // eligible for 2-element golds
  double applicable_fraction = 1.0;  // fraction of PTs the attribute applies to
};

struct WorldSpec {
  std::uint64_t seed = 0;
  std::vector<std::string> product_types;
  std::vector<std::string> countries;  // at most 4 (disjoint consonant groups)
  std::vector<AttributeSchema> attributes;
  // attribute name -> probabilities over the first six Phenomenon values.
  std::map<std::string, std::array<double, kNumMixPhenomena>> phenomenon_mix;
  double weak_noise_rate = 0.0;
  double multi_value_rate = 0.0;
  int embedding_dim = 16;

  std::string to_json() const;
  static WorldSpec from_json(const std::string& text);
};

// Per-(attribute, country) lexical devices, all drawn without replacement from
// the country vocabulary so no word plays two roles.
struct AttrCountryLex {
  // value -> periphrastic surface forms, each a token sequence.  Materialized
  // as a single two-word form unless the schema supplied its own surfaces.
  std::map<std::string, std::vector<std::vector<std::string>>> synonyms;
  std::string cue;                      // empty when the attribute has no cue
  std::array<std::string, 2> na_marker;  // adjacent pair marks inapplicability
};

struct World {
  WorldSpec spec;
  // country -> generated vocabulary; filler excludes every special word.
  std::map<std::string, std::vector<std::string>> filler;
  // "attribute|country" -> devices.
  std::map<std::string, AttrCountryLex> attr_lex;
  // (pt, attribute) pairs the attribute applies to.
  std::map<std::string, bool> pt_attr_mask;  // key "pt|attribute"
  std::vector<PacScope> pacs;  // on-mask cross product, in spec order
  // image_only attribute (at most one): value -> unit-norm prototype over the
  // first embedding_dim/2 coordinates.
  std::map<std::string, std::vector<double>> prototypes;
  std::string image_attr;  // empty when the world has no image_only attribute

  bool applicable(const std::string& pt, const std::string& attribute) const;
  const AttrCountryLex& devices(const std::string& attribute,
                                const std::string& country) const;
};

struct LabelRecord {
  std::string product_id;
  PacScope pac;
  ValueSet gold;
  Phenomenon phenomenon = Phenomenon::Explicit;
  std::optional<ValueSet> weak_label;
  std::optional<ValueSet> strong_label;
};

struct Dataset {
  std::vector<Product> products;
  std::vector<LabelRecord> labels;
};

// Validates the spec (errors name the offending field) and materializes the
// world.  Deterministic in (spec, spec.seed).
World generate_world(const WorldSpec& spec);

// Renders n_products products and one LabelRecord per applicable attribute.
// weak_label is present on every record and equals gold except with
// probability weak_noise_rate, when it is replaced by a uniformly random
// *wrong* in-domain single value (this applies to NA/NO golds as well: a noisy
// catalog asserts concrete values for inapplicable or unobtainable slots).
// strong_label is present on a strong_fraction Bernoulli subsample and always
// equals gold.
Dataset emit_dataset(const World& world, int n_products, double strong_fraction);

// Disjoint partition of world.pacs; |second| = round(holdout_fraction * total).
std::pair<std::vector<PacScope>, std::vector<PacScope>> split_pacs(
    const World& world, double holdout_fraction, std::uint64_t seed);

// Embedding for a product: the first embedding_dim/2 coordinates carry the
// prototype of the product's image_only attribute value (zeros for NA or when
// the world has no image_only attribute); the rest is unit-variance noise.
// Deterministic per (world seed, product id).
std::vector<double> synth_embedding(const World& world, const std::string& product_id,
                                    const ValueSet& image_value);

// Nearest-prototype readout of the signal block; empty string when the world
// has no image_only attribute.
std::string decode_embedding(const World& world, const std::vector<double>& embedding);

// Deterministic product-level split by hashed id: train_frac / eval_frac /
// remainder.
Split assign_split(const std::string& product_id, std::uint64_t seed,
                   double train_frac = 0.7, double eval_frac = 0.1);

// Line-delimited JSON persistence.
void write_products_jsonl(const std::string& path, const std::vector<Product>& products);
std::vector<Product> read_products_jsonl(const std::string& path);
void write_labels_jsonl(const std::string& path, const std::vector<LabelRecord>& labels);
std::vector<LabelRecord> read_labels_jsonl(const std::string& path);

// Compact parameterized world used by tests and the bundled experiment
// configurations: `n_attrs` attributes riding one shared mix row, one optional
// image_only attribute, and per-attribute devices sized for short renders.
struct DefaultWorldOptions {
  std::uint64_t seed = 1;
  int n_product_types = 3;
  int n_countries = 2;
  int n_attrs = 3;
  int values_per_attr = 4;
  // Explicit, periphrastic, implicit-default, derivable, non-obtainable,
  // inapplicable.  Odd-indexed attributes get the implicit-default mass moved
  // to non-obtainable (the two cannot coexist on one attribute).
  std::array<double, kNumMixPhenomena> mix = {0.45, 0.2, 0.15, 0.1, 0.0, 0.1};
  double weak_noise_rate = 0.15;
  double multi_value_rate = 0.0;
  bool with_image_attr = false;
  int embedding_dim = 16;
  double applicable_fraction = 1.0;
};
WorldSpec make_default_world_spec(const DefaultWorldOptions& opt);

}  // namespace attrgen::catalog
