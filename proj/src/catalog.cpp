#include "attrgen/catalog.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "attrgen/common.hpp"
#include "attrgen/jsonio.hpp"
#include "attrgen/rng.hpp"
#include "attrgen/textproc.hpp"

namespace attrgen::catalog {

using nlohmann::json;

namespace {

// Stream tags keep the derived generators of unrelated stages independent.
constexpr std::uint64_t kWorldTag = 0x776f726cULL;   // vocabulary materialization
constexpr std::uint64_t kEmitTag = 0x656d6974ULL;    // product rendering
constexpr std::uint64_t kEmbedTag = 0x656d6264ULL;   // embedding noise
constexpr std::uint64_t kProtoTag = 0x70726f74ULL;   // value prototypes
constexpr std::uint64_t kMaskTag = 0x6d61736bULL;    // applicability mask
constexpr std::uint64_t kSplitTag = 0x73706c74ULL;   // pac splitting

// Indexed by the Phenomenon enum.
const std::vector<std::string> kPhenomenonNames = {
    "explicit",  "periphrastic",   "implicit_default", "derivable",
    "non_obtainable", "inapplicable", "image_only"};

// Disjoint consonant groups: one per country slot, one reserved for values.
// Any generated word contains at least one consonant from its group, so words
// of different groups can never equal or contain one another.
const std::vector<std::vector<char>> kCountryConsonants = {
    {'b', 'd', 'g', 'k'},
    {'m', 'n', 'p', 'r'},
    {'s', 't', 'l', 'f'},
    {'h', 'j', 'v', 'c'},
};
const std::vector<char> kValueConsonants = {'z', 'x', 'q', 'w'};
const std::vector<char> kVowels = {'a', 'e', 'i', 'o', 'u'};

std::string gen_word(Rng& rng, const std::vector<char>& consonants, int syllables) {
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w.push_back(consonants[rng.next_below(consonants.size())]);
    w.push_back(kVowels[rng.next_below(kVowels.size())]);
  }
  return w;
}

std::string lex_key(const std::string& attribute, const std::string& country) {
  return attribute + "|" + country;
}

std::string mask_key(const std::string& pt, const std::string& attribute) {
  return pt + "|" + attribute;
}

bool contains_either(const std::string& a, const std::string& b) {
  return a.find(b) != std::string::npos || b.find(a) != std::string::npos;
}

void validate_spec(const WorldSpec& spec) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ValidationError("invalid WorldSpec: " + field + ": " + why);
  };

  if (spec.product_types.empty()) fail("product_types", "must be non-empty");
  if (std::set<std::string>(spec.product_types.begin(), spec.product_types.end()).size() !=
      spec.product_types.size()) {
    fail("product_types", "names must be distinct");
  }
  if (spec.countries.empty()) fail("countries", "must be non-empty");
  if (spec.countries.size() > kCountryConsonants.size()) {
    fail("countries", "at most " + std::to_string(kCountryConsonants.size()) +
                          " countries are supported (one disjoint consonant group each)");
  }
  if (std::set<std::string>(spec.countries.begin(), spec.countries.end()).size() !=
      spec.countries.size()) {
    fail("countries", "codes must be distinct");
  }
  if (spec.attributes.empty()) fail("attributes", "must be non-empty");
  if (!(spec.weak_noise_rate >= 0.0 && spec.weak_noise_rate <= 1.0)) {
    fail("weak_noise_rate", "must lie in [0, 1]");
  }
  if (!(spec.multi_value_rate >= 0.0 && spec.multi_value_rate <= 1.0)) {
    fail("multi_value_rate", "must lie in [0, 1]");
  }
  if (spec.embedding_dim <= 0) fail("embedding_dim", "must be positive");

  std::set<std::string> attr_names;
  std::vector<std::string> all_values;
  int image_attrs = 0;
  for (const auto& attr : spec.attributes) {
    const std::string where = "attributes[" + attr.name + "]";
    if (attr.name.empty()) fail("attributes", "attribute name must be non-empty");
    if (!attr_names.insert(attr.name).second) fail(where, "duplicate attribute name");
    if (attr.value_domain.empty()) fail(where + ".value_domain", "must be non-empty");
    std::set<std::string> domain;
    for (const auto& v : attr.value_domain) {
      if (v.empty() || v != normalize_value(v)) {
        fail(where + ".value_domain", "value '" + v + "' is not normalized");
      }
      if (!domain.insert(v).second) fail(where + ".value_domain", "duplicate value '" + v + "'");
      all_values.push_back(v);
    }
    if (attr.default_value && !domain.count(*attr.default_value)) {
      fail(where + ".default_value", "'" + *attr.default_value + "' not in value_domain");
    }
    if (attr.derivation_cue && !domain.count(attr.derivation_cue->implied_value)) {
      fail(where + ".derivation_cue", "implied value '" + attr.derivation_cue->implied_value +
                                          "' not in value_domain");
    }
    if (!(attr.applicable_fraction >= 0.0 && attr.applicable_fraction <= 1.0)) {
      fail(where + ".applicable_fraction", "must lie in [0, 1]");
    }
    for (const auto& [value, per_country] : attr.synonym_table) {
      if (!domain.count(value)) {
        fail(where + ".synonym_table", "key '" + value + "' not in value_domain");
      }
      for (const auto& [country, forms] : per_country) {
        if (std::find(spec.countries.begin(), spec.countries.end(), country) ==
            spec.countries.end()) {
          fail(where + ".synonym_table", "unknown country '" + country + "'");
        }
        if (forms.empty()) fail(where + ".synonym_table", "empty form list for '" + value + "'");
      }
    }

    auto it = spec.phenomenon_mix.find(attr.name);
    if (it == spec.phenomenon_mix.end()) {
      fail("phenomenon_mix", "missing row for attribute '" + attr.name + "'");
    }
    const auto& row = it->second;
    double sum = 0.0;
    for (double p : row) {
      if (!(p >= 0.0) || !std::isfinite(p)) {
        fail("phenomenon_mix[" + attr.name + "]", "entries must be finite and non-negative");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      fail("phenomenon_mix[" + attr.name + "]",
           "row sums to " + format_double(sum) + ", expected 1");
    }
    auto mass = [&](Phenomenon p) { return row[static_cast<int>(p)]; };
    if (mass(Phenomenon::ImplicitDefault) > 0.0 && !attr.default_value) {
      fail(where, "implicit_default mass requires a default_value");
    }
    if (mass(Phenomenon::Derivable) > 0.0 && !attr.derivation_cue) {
      fail(where, "derivable mass requires a derivation_cue");
    }
    if (mass(Phenomenon::ImplicitDefault) > 0.0 && mass(Phenomenon::NonObtainable) > 0.0) {
      fail(where,
           "implicit_default and non_obtainable mass on one attribute make the "
           "text-to-label mapping ambiguous (both render nothing); use separate attributes");
    }
    if (attr.image_only) {
      ++image_attrs;
      if (mass(Phenomenon::Periphrastic) > 0.0 || mass(Phenomenon::ImplicitDefault) > 0.0 ||
          mass(Phenomenon::Derivable) > 0.0 || mass(Phenomenon::NonObtainable) > 0.0) {
        fail(where, "an image_only attribute supports only explicit and inapplicable mass");
      }
      if (spec.embedding_dim < 8 || spec.embedding_dim % 2 != 0) {
        fail("embedding_dim", "must be even and >= 8 when an image_only attribute exists");
      }
    }
  }
  if (image_attrs > 1) {
    fail("attributes", "at most one image_only attribute is supported");
  }

  // Cross-attribute value safety: rendered text is scanned for value strings,
  // so no value may contain another (equality included).
  std::sort(all_values.begin(), all_values.end());
  for (std::size_t i = 0; i < all_values.size(); ++i) {
    for (std::size_t j = i + 1; j < all_values.size(); ++j) {
      if (contains_either(all_values[i], all_values[j])) {
        fail("attributes", "value '" + all_values[i] + "' and value '" + all_values[j] +
                               "' overlap as substrings; value domains must be "
                               "substring-free across attributes");
      }
    }
  }

  // User-supplied synonym surfaces must never contain any value string.
  for (const auto& attr : spec.attributes) {
    for (const auto& [value, per_country] : attr.synonym_table) {
      for (const auto& [country, forms] : per_country) {
        for (const auto& form : forms) {
          for (const auto& v : all_values) {
            if (form.find(v) != std::string::npos) {
              throw ValidationError("invalid WorldSpec: attributes[" + attr.name +
                                    "].synonym_table: surface '" + form +
                                    "' contains value '" + v + "'");
            }
          }
        }
      }
    }
  }
}

Phenomenon draw_phenomenon(const std::array<double, kNumMixPhenomena>& row, Rng& rng) {
  const double u = rng.next_double();
  double cum = 0.0;
  int last_positive = 0;
  for (int i = 0; i < kNumMixPhenomena; ++i) {
    if (row[i] > 0.0) last_positive = i;
    cum += row[i];
    if (u < cum) return static_cast<Phenomenon>(i);
  }
  return static_cast<Phenomenon>(last_positive);  // guard against rounding
}

}  // namespace

const std::string& phenomenon_name(Phenomenon p) {
  return kPhenomenonNames.at(static_cast<std::size_t>(p));
}

Phenomenon phenomenon_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kPhenomenonNames.size(); ++i) {
    if (kPhenomenonNames[i] == name) return static_cast<Phenomenon>(i);
  }
  throw ValidationError("unknown phenomenon name: " + name);
}

bool World::applicable(const std::string& pt, const std::string& attribute) const {
  auto it = pt_attr_mask.find(mask_key(pt, attribute));
  return it != pt_attr_mask.end() && it->second;
}

const AttrCountryLex& World::devices(const std::string& attribute,
                                     const std::string& country) const {
  auto it = attr_lex.find(lex_key(attribute, country));
  if (it == attr_lex.end()) {
    throw ValidationError("no lexical devices for attribute '" + attribute + "' in country '" +
                          country + "'");
  }
  return it->second;
}

World generate_world(const WorldSpec& spec) {
  validate_spec(spec);

  World world;
  world.spec = spec;

  std::vector<std::string> all_values;
  for (const auto& attr : spec.attributes) {
    for (const auto& v : attr.value_domain) all_values.push_back(v);
  }
  auto value_safe = [&](const std::string& word) {
    for (const auto& v : all_values) {
      if (contains_either(word, v)) return false;
    }
    return true;
  };

  Rng rng(mix_seed(spec.seed, kWorldTag));

  for (std::size_t ci = 0; ci < spec.countries.size(); ++ci) {
    const std::string& country = spec.countries[ci];
    const auto& consonants = kCountryConsonants[ci];

    // Words needed: per non-image attribute, two per auto-generated synonym,
    // one cue, two marker words; plus a filler pool.
    std::size_t specials = 0;
    for (const auto& attr : spec.attributes) {
      if (attr.image_only) continue;
      for (const auto& v : attr.value_domain) {
        auto vit = attr.synonym_table.find(v);
        const bool user_forms = vit != attr.synonym_table.end() && vit->second.count(country);
        if (!user_forms) specials += 2;
      }
      if (attr.derivation_cue) specials += 1;
      specials += 2;  // marker pair
    }
    const std::size_t target = specials + 48;

    std::vector<std::string> words;
    std::unordered_set<std::string> seen;
    int guard = 0;
    while (words.size() < target) {
      if (++guard > 200000) {
        throw GenerationError("country '" + country + "': vocabulary generation stalled");
      }
      const int syllables = 2 + static_cast<int>(rng.next_below(2));
      std::string w = gen_word(rng, consonants, syllables);
      if (!seen.insert(w).second) continue;
      if (!value_safe(w)) continue;
      words.push_back(std::move(w));
    }

    std::size_t next = 0;
    auto take_word = [&]() -> std::string { return words[next++]; };

    for (const auto& attr : spec.attributes) {
      if (attr.image_only) continue;
      AttrCountryLex lex;
      for (const auto& v : attr.value_domain) {
        auto vit = attr.synonym_table.find(v);
        if (vit != attr.synonym_table.end() && vit->second.count(country)) {
          for (const auto& form : vit->second.at(country)) {
            lex.synonyms[v].push_back(textproc::tokenize(form));
          }
        } else {
          std::string a = take_word();
          std::string b = take_word();
          lex.synonyms[v].push_back({a, b});
        }
      }
      if (attr.derivation_cue) lex.cue = take_word();
      lex.na_marker[0] = take_word();
      lex.na_marker[1] = take_word();
      world.attr_lex[lex_key(attr.name, country)] = std::move(lex);
    }
    world.filler[country] = std::vector<std::string>(words.begin() + static_cast<long>(next),
                                                     words.end());
  }

  // Applicability mask over (pt, attribute), shared across countries.  An
  // attribute with positive fraction is forced onto at least one PT so small
  // worlds cannot silently lose an attribute to sampling.
  for (const auto& attr : spec.attributes) {
    Rng mrng(mix_seed(mix_seed(spec.seed, kMaskTag), fnv1a64(attr.name)));
    bool any = false;
    for (const auto& pt : spec.product_types) {
      const bool on = mrng.bernoulli(attr.applicable_fraction);
      world.pt_attr_mask[mask_key(pt, attr.name)] = on;
      any = any || on;
    }
    if (!any && attr.applicable_fraction > 0.0) {
      const std::size_t forced = mrng.next_below(spec.product_types.size());
      world.pt_attr_mask[mask_key(spec.product_types[forced], attr.name)] = true;
    }
  }

  for (const auto& pt : spec.product_types) {
    for (const auto& attr : spec.attributes) {
      if (!world.applicable(pt, attr.name)) continue;
      for (const auto& country : spec.countries) {
        world.pacs.push_back(PacScope{pt, attr.name, country});
      }
    }
  }

  for (const auto& attr : spec.attributes) {
    if (!attr.image_only) continue;
    world.image_attr = attr.name;
    const int half = spec.embedding_dim / 2;
    for (const auto& v : attr.value_domain) {
      Rng prng(mix_seed(mix_seed(spec.seed, kProtoTag), fnv1a64(attr.name + "|" + v)));
      std::vector<double> proto(static_cast<std::size_t>(half));
      double norm_sq = 0.0;
      for (auto& x : proto) {
        x = prng.next_normal();
        norm_sq += x * x;
      }
      const double norm = std::sqrt(norm_sq);
      for (auto& x : proto) x /= norm;
      world.prototypes[v] = std::move(proto);
    }
  }

  return world;
}

namespace {

// A unit is a bonded token run: splices happen between units, never inside,
// so synonym bigrams and marker pairs stay adjacent once placed.
using Unit = std::vector<std::string>;
using Field = std::vector<Unit>;

struct DrawnRecord {
  const AttributeSchema* attr;
  Phenomenon phenomenon;
  ValueSet gold;
};

void splice(std::array<Field, 3>& fields, Rng& rng, Unit unit) {
  const double u = rng.next_double();
  const int f = u < 0.25 ? 0 : (u < 0.60 ? 1 : 2);
  Field& field = fields[static_cast<std::size_t>(f)];
  const std::size_t pos = rng.next_below(field.size() + 1);
  field.insert(field.begin() + static_cast<long>(pos), std::move(unit));
}

std::vector<std::string> flatten(const Field& field) {
  std::vector<std::string> out;
  for (const auto& unit : field) out.insert(out.end(), unit.begin(), unit.end());
  return out;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

bool run_at(const std::vector<std::string>& tokens, std::size_t i, const Unit& run) {
  if (i + run.size() > tokens.size()) return false;
  for (std::size_t k = 0; k < run.size(); ++k) {
    if (tokens[i + k] != run[k]) return false;
  }
  return true;
}

bool contains_run(const std::vector<std::string>& tokens, const Unit& run) {
  for (std::size_t i = 0; i + run.size() <= tokens.size(); ++i) {
    if (run_at(tokens, i, run)) return true;
  }
  return false;
}

bool adjacent_runs(const std::vector<std::string>& tokens, const Unit& a, const Unit& b) {
  for (std::size_t i = 0; i + a.size() + b.size() <= tokens.size(); ++i) {
    if (run_at(tokens, i, a) && run_at(tokens, i + a.size(), b)) return true;
  }
  return false;
}

// One rendering attempt for a product; returns false when an adjacency or
// containment constraint was violated and the caller should retry with fresh
// placement randomness.
bool render_product(const World& world, const std::string& country,
                    const std::vector<DrawnRecord>& records, Rng& place_rng,
                    std::array<std::vector<std::string>, 3>& out_tokens) {
  const auto& filler = world.filler.at(country);
  std::array<Field, 3> fields;
  const std::size_t sizes[3] = {3 + place_rng.next_below(2), 4 + place_rng.next_below(3),
                                5 + place_rng.next_below(3)};
  for (int f = 0; f < 3; ++f) {
    for (std::size_t k = 0; k < sizes[f]; ++k) {
      fields[static_cast<std::size_t>(f)].push_back({filler[place_rng.next_below(filler.size())]});
    }
  }

  for (const auto& rec : records) {
    if (rec.attr->image_only) continue;
    const auto& lex = world.devices(rec.attr->name, country);
    switch (rec.phenomenon) {
      case Phenomenon::Explicit:
        for (const auto& v : rec.gold.values) splice(fields, place_rng, textproc::tokenize(v));
        break;
      case Phenomenon::Periphrastic:
        for (const auto& v : rec.gold.values) {
          const auto& forms = lex.synonyms.at(v);
          splice(fields, place_rng, forms[place_rng.next_below(forms.size())]);
        }
        break;
      case Phenomenon::Derivable:
        splice(fields, place_rng, {lex.cue});
        break;
      case Phenomenon::Inapplicable:
        splice(fields, place_rng, {lex.na_marker[0], lex.na_marker[1]});
        break;
      case Phenomenon::ImplicitDefault:
      case Phenomenon::NonObtainable:
      case Phenomenon::ImageOnly:
        break;
    }
    // Marker-word teases: applicable products may carry both marker words,
    // just never adjacent, so word presence alone cannot signal NA.
    if (rec.phenomenon != Phenomenon::Inapplicable) {
      if (place_rng.bernoulli(0.35)) splice(fields, place_rng, {lex.na_marker[0]});
      if (place_rng.bernoulli(0.35)) splice(fields, place_rng, {lex.na_marker[1]});
    }
  }

  for (int f = 0; f < 3; ++f) {
    out_tokens[static_cast<std::size_t>(f)] = flatten(fields[static_cast<std::size_t>(f)]);
  }

  for (const auto& rec : records) {
    if (rec.attr->image_only) continue;
    const auto& lex = world.devices(rec.attr->name, country);
    const Unit marker = {lex.na_marker[0], lex.na_marker[1]};
    bool marker_present = false;
    for (const auto& toks : out_tokens) marker_present |= contains_run(toks, marker);
    if ((rec.phenomenon == Phenomenon::Inapplicable) != marker_present) return false;

    if (rec.gold.is_values()) {
      for (const auto& v : rec.gold.values) {
        const Unit vtoks = textproc::tokenize(v);
        bool present = false;
        for (const auto& toks : out_tokens) present |= contains_run(toks, vtoks);
        const bool expect = rec.phenomenon == Phenomenon::Explicit;
        if (present != expect) return false;
      }
      if (rec.phenomenon == Phenomenon::Explicit && rec.gold.values.size() == 2) {
        const Unit a = textproc::tokenize(rec.gold.values[0]);
        const Unit b = textproc::tokenize(rec.gold.values[1]);
        for (const auto& toks : out_tokens) {
          if (adjacent_runs(toks, a, b) || adjacent_runs(toks, b, a)) return false;
        }
      }
    }
  }
  return true;
}

ValueSet draw_gold(const AttributeSchema& attr, Phenomenon p, double multi_value_rate,
                   Rng& rng) {
  const auto& domain = attr.value_domain;
  switch (p) {
    case Phenomenon::Explicit:
    case Phenomenon::Periphrastic: {
      int k = 1;
      if (attr.multi_valued && domain.size() >= 2 && rng.bernoulli(multi_value_rate)) k = 2;
      const std::size_t i = rng.next_below(domain.size());
      if (k == 1) return ValueSet::single(domain[i]);
      std::size_t j = rng.next_below(domain.size() - 1);
      if (j >= i) ++j;
      return ValueSet::of({domain[i], domain[j]});
    }
    case Phenomenon::ImageOnly:
      return ValueSet::single(domain[rng.next_below(domain.size())]);
    case Phenomenon::ImplicitDefault:
      return ValueSet::single(*attr.default_value);
    case Phenomenon::Derivable:
      return ValueSet::single(attr.derivation_cue->implied_value);
    case Phenomenon::NonObtainable:
      return ValueSet::no();
    case Phenomenon::Inapplicable:
      return ValueSet::na();
  }
  throw GenerationError("unreachable phenomenon");
}

}  // namespace

Dataset emit_dataset(const World& world, int n_products, double strong_fraction) {
  if (!(strong_fraction >= 0.0 && strong_fraction <= 1.0)) {
    throw ValidationError("strong_fraction must lie in [0, 1]");
  }
  const auto& spec = world.spec;
  const std::uint64_t emit_base = mix_seed(spec.seed, kEmitTag);

  Dataset ds;
  ds.products.resize(static_cast<std::size_t>(n_products));
  std::vector<std::vector<LabelRecord>> per_product(static_cast<std::size_t>(n_products));

  // Per-product random streams are derived from (seed, index), so the loop is
  // order- and schedule-independent.
  for (int i = 0; i < n_products; ++i) {
    Rng draw_rng(mix_seed(emit_base, static_cast<std::uint64_t>(2 * i)));
    char idbuf[24];
    std::snprintf(idbuf, sizeof(idbuf), "p%07d", i);
    const std::string id = idbuf;
    const std::string& pt = spec.product_types[draw_rng.next_below(spec.product_types.size())];
    const std::string& country = spec.countries[draw_rng.next_below(spec.countries.size())];

    std::vector<DrawnRecord> drawn;
    for (const auto& attr : spec.attributes) {
      if (!world.applicable(pt, attr.name)) continue;
      const auto& row = spec.phenomenon_mix.at(attr.name);
      Phenomenon p = draw_phenomenon(row, draw_rng);
      if (attr.image_only && p == Phenomenon::Explicit) p = Phenomenon::ImageOnly;
      if (attr.image_only && p != Phenomenon::ImageOnly && p != Phenomenon::Inapplicable) {
        throw GenerationError("attribute '" + attr.name +
                              "': image_only drew a text phenomenon");
      }
      if (p == Phenomenon::ImplicitDefault && !attr.default_value) {
        throw GenerationError("attribute '" + attr.name +
                              "': implicit_default drawn without a default_value");
      }
      if (p == Phenomenon::Derivable && !attr.derivation_cue) {
        throw GenerationError("attribute '" + attr.name +
                              "': derivable drawn without a derivation_cue");
      }
      drawn.push_back({&attr, p, draw_gold(attr, p, spec.multi_value_rate, draw_rng)});
    }

    std::array<std::vector<std::string>, 3> tokens;
    bool ok = false;
    const std::uint64_t place_base = mix_seed(emit_base, static_cast<std::uint64_t>(2 * i + 1));
    for (std::uint64_t attempt = 0; attempt < 64 && !ok; ++attempt) {
      Rng place_rng(mix_seed(place_base, attempt));
      ok = render_product(world, country, drawn, place_rng, tokens);
    }
    if (!ok) {
      throw GenerationError("product " + id + ": could not satisfy rendering constraints");
    }

    Product prod;
    prod.id = id;
    prod.pt = pt;
    prod.country = country;
    prod.title = join(tokens[0]);
    prod.bullets = join(tokens[1]);
    prod.description = join(tokens[2]);

    std::vector<LabelRecord> recs;
    for (const auto& d : drawn) {
      LabelRecord rec;
      rec.product_id = id;
      rec.pac = PacScope{pt, d.attr->name, country};
      rec.gold = d.gold;
      rec.phenomenon = d.phenomenon;

      rec.weak_label = d.gold;
      if (draw_rng.bernoulli(spec.weak_noise_rate)) {
        const auto& domain = d.attr->value_domain;
        std::vector<std::string> candidates;
        for (const auto& v : domain) {
          if (d.gold.is_values() && d.gold.values.size() == 1 && d.gold.values[0] == v) continue;
          candidates.push_back(v);
        }
        if (!candidates.empty()) {
          rec.weak_label = ValueSet::single(candidates[draw_rng.next_below(candidates.size())]);
        }
      }
      if (draw_rng.bernoulli(strong_fraction)) rec.strong_label = d.gold;

      if (d.attr->image_only) {
        prod.embedding = synth_embedding(world, id, d.gold);
      }
      recs.push_back(std::move(rec));
    }
    if (!world.image_attr.empty() && !prod.embedding) {
      // Image attribute off-mask for this PT: noise-only embedding.
      prod.embedding = synth_embedding(world, id, ValueSet::na());
    }

    ds.products[static_cast<std::size_t>(i)] = std::move(prod);
    per_product[static_cast<std::size_t>(i)] = std::move(recs);
  }

  for (auto& recs : per_product) {
    for (auto& r : recs) ds.labels.push_back(std::move(r));
  }
  return ds;
}

std::pair<std::vector<PacScope>, std::vector<PacScope>> split_pacs(const World& world,
                                                                   double holdout_fraction,
                                                                   std::uint64_t seed) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw ValidationError("holdout_fraction must lie strictly between 0 and 1");
  }
  if (world.pacs.size() < 2) {
    throw ValidationError("need at least 2 PACs to split, have " +
                          std::to_string(world.pacs.size()));
  }
  std::vector<PacScope> shuffled = world.pacs;
  Rng rng(mix_seed(seed, kSplitTag));
  rng.shuffle(shuffled);
  const auto n_b = static_cast<std::size_t>(
      std::llround(holdout_fraction * static_cast<double>(shuffled.size())));
  std::vector<PacScope> b(shuffled.begin(), shuffled.begin() + static_cast<long>(n_b));
  std::vector<PacScope> a(shuffled.begin() + static_cast<long>(n_b), shuffled.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {std::move(a), std::move(b)};
}

std::vector<double> synth_embedding(const World& world, const std::string& product_id,
                                    const ValueSet& image_value) {
  const int dim = world.spec.embedding_dim;
  const int half = dim / 2;
  std::vector<double> emb(static_cast<std::size_t>(dim), 0.0);
  if (!world.image_attr.empty() && image_value.is_values()) {
    const auto& proto = world.prototypes.at(image_value.values.front());
    std::copy(proto.begin(), proto.end(), emb.begin());
  }
  Rng nrng(mix_seed(mix_seed(world.spec.seed, kEmbedTag), fnv1a64(product_id)));
  for (int j = half; j < dim; ++j) emb[static_cast<std::size_t>(j)] = nrng.next_normal();
  return emb;
}

std::string decode_embedding(const World& world, const std::vector<double>& embedding) {
  if (world.image_attr.empty()) return "";
  const int half = world.spec.embedding_dim / 2;
  std::string best;
  double best_d = 0.0;
  for (const auto& [value, proto] : world.prototypes) {
    double d = 0.0;
    for (int j = 0; j < half; ++j) {
      const double diff = embedding[static_cast<std::size_t>(j)] - proto[static_cast<std::size_t>(j)];
      d += diff * diff;
    }
    if (best.empty() || d < best_d) {
      best = value;
      best_d = d;
    }
  }
  return best;
}

Split assign_split(const std::string& product_id, std::uint64_t seed, double train_frac,
                   double eval_frac) {
  Rng rng(mix_seed(seed, fnv1a64(product_id)));
  const double u = rng.next_double();
  if (u < train_frac) return Split::Train;
  if (u < train_frac + eval_frac) return Split::Eval;
  return Split::Test;
}

namespace {

json product_to_json(const Product& p) {
  json j;
  j["id"] = p.id;
  j["pt"] = p.pt;
  j["country"] = p.country;
  j["title"] = p.title;
  j["bullets"] = p.bullets;
  j["description"] = p.description;
  j["embedding"] = p.embedding ? json(*p.embedding) : json(nullptr);
  return j;
}

Product product_from_json(const json& j) {
  Product p;
  p.id = j.at("id").get<std::string>();
  p.pt = j.at("pt").get<std::string>();
  p.country = j.at("country").get<std::string>();
  p.title = j.at("title").get<std::string>();
  p.bullets = j.at("bullets").get<std::string>();
  p.description = j.at("description").get<std::string>();
  if (!j.at("embedding").is_null()) {
    p.embedding = j.at("embedding").get<std::vector<double>>();
  }
  return p;
}

json label_to_json(const LabelRecord& r) {
  json j;
  j["product_id"] = r.product_id;
  j["pt"] = r.pac.pt;
  j["attribute"] = r.pac.attribute;
  j["country"] = r.pac.country;
  j["gold"] = value_set_to_json(r.gold);
  j["phenomenon"] = phenomenon_name(r.phenomenon);
  j["weak_label"] = r.weak_label ? value_set_to_json(*r.weak_label) : json(nullptr);
  j["strong_label"] = r.strong_label ? value_set_to_json(*r.strong_label) : json(nullptr);
  return j;
}

LabelRecord label_from_json(const json& j) {
  LabelRecord r;
  r.product_id = j.at("product_id").get<std::string>();
  r.pac.pt = j.at("pt").get<std::string>();
  r.pac.attribute = j.at("attribute").get<std::string>();
  r.pac.country = j.at("country").get<std::string>();
  r.gold = value_set_from_json(j.at("gold"));
  r.phenomenon = phenomenon_from_name(j.at("phenomenon").get<std::string>());
  if (!j.at("weak_label").is_null()) r.weak_label = value_set_from_json(j.at("weak_label"));
  if (!j.at("strong_label").is_null()) r.strong_label = value_set_from_json(j.at("strong_label"));
  return r;
}

}  // namespace

void write_products_jsonl(const std::string& path, const std::vector<Product>& products) {
  std::vector<json> rows;
  rows.reserve(products.size());
  for (const auto& p : products) rows.push_back(product_to_json(p));
  write_jsonl(path, rows);
}

std::vector<Product> read_products_jsonl(const std::string& path) {
  std::vector<Product> out;
  for (const auto& row : read_jsonl(path)) out.push_back(product_from_json(row));
  return out;
}

void write_labels_jsonl(const std::string& path, const std::vector<LabelRecord>& labels) {
  std::vector<json> rows;
  rows.reserve(labels.size());
  for (const auto& r : labels) rows.push_back(label_to_json(r));
  write_jsonl(path, rows);
}

std::vector<LabelRecord> read_labels_jsonl(const std::string& path) {
  std::vector<LabelRecord> out;
  for (const auto& row : read_jsonl(path)) out.push_back(label_from_json(row));
  return out;
}

std::string WorldSpec::to_json() const {
  json j;
  j["seed"] = seed;
  j["product_types"] = product_types;
  j["countries"] = countries;
  j["weak_noise_rate"] = weak_noise_rate;
  j["multi_value_rate"] = multi_value_rate;
  j["embedding_dim"] = embedding_dim;
  json attrs = json::array();
  for (const auto& a : attributes) {
    json ja;
    ja["name"] = a.name;
    ja["value_domain"] = a.value_domain;
    ja["synonym_table"] = a.synonym_table;
    ja["default_value"] = a.default_value ? json(*a.default_value) : json(nullptr);
    ja["derivation_cue"] =
        a.derivation_cue ? json{{"implied_value", a.derivation_cue->implied_value}}
                         : json(nullptr);
    ja["image_only"] = a.image_only;
    ja["multi_valued"] = a.multi_valued;
    ja["applicable_fraction"] = a.applicable_fraction;
    attrs.push_back(std::move(ja));
  }
  j["attributes"] = std::move(attrs);
  json mix;
  for (const auto& [name, row] : phenomenon_mix) {
    json jr;
    for (int i = 0; i < kNumMixPhenomena; ++i) {
      jr[phenomenon_name(static_cast<Phenomenon>(i))] = row[static_cast<std::size_t>(i)];
    }
    mix[name] = std::move(jr);
  }
  j["phenomenon_mix"] = std::move(mix);
  return j.dump(2);
}

WorldSpec WorldSpec::from_json(const std::string& text) {
  const json j = json::parse(text);
  WorldSpec spec;
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.product_types = j.at("product_types").get<std::vector<std::string>>();
  spec.countries = j.at("countries").get<std::vector<std::string>>();
  spec.weak_noise_rate = j.at("weak_noise_rate").get<double>();
  spec.multi_value_rate = j.at("multi_value_rate").get<double>();
  spec.embedding_dim = j.at("embedding_dim").get<int>();
  for (const auto& ja : j.at("attributes")) {
    AttributeSchema a;
    a.name = ja.at("name").get<std::string>();
    a.value_domain = ja.at("value_domain").get<std::vector<std::string>>();
    if (ja.contains("synonym_table") && !ja.at("synonym_table").is_null()) {
      a.synonym_table =
          ja.at("synonym_table")
              .get<std::map<std::string, std::map<std::string, std::vector<std::string>>>>();
    }
    if (ja.contains("default_value") && !ja.at("default_value").is_null()) {
      a.default_value = ja.at("default_value").get<std::string>();
    }
    if (ja.contains("derivation_cue") && !ja.at("derivation_cue").is_null()) {
      a.derivation_cue = DerivationCue{
          ja.at("derivation_cue").at("implied_value").get<std::string>()};
    }
    if (ja.contains("image_only")) a.image_only = ja.at("image_only").get<bool>();
    if (ja.contains("multi_valued")) a.multi_valued = ja.at("multi_valued").get<bool>();
    if (ja.contains("applicable_fraction")) {
      a.applicable_fraction = ja.at("applicable_fraction").get<double>();
    }
    spec.attributes.push_back(std::move(a));
  }
  for (const auto& [name, jr] : j.at("phenomenon_mix").items()) {
    std::array<double, kNumMixPhenomena> row{};
    for (int i = 0; i < kNumMixPhenomena; ++i) {
      const auto& key = phenomenon_name(static_cast<Phenomenon>(i));
      row[static_cast<std::size_t>(i)] = jr.contains(key) ? jr.at(key).get<double>() : 0.0;
    }
    spec.phenomenon_mix[name] = row;
  }
  return spec;
}

WorldSpec make_default_world_spec(const DefaultWorldOptions& opt) {
  static const std::vector<std::string> kPts = {"lamp", "mug", "rug", "fan", "cot", "bin"};
  static const std::vector<std::string> kCountries = {"us", "de", "jp", "br"};
  static const std::vector<std::string> kAttrNames = {"attr_a", "attr_b", "attr_c",
                                                      "attr_d", "attr_e", "attr_f"};
  if (opt.n_product_types < 1 || opt.n_product_types > static_cast<int>(kPts.size())) {
    throw ValidationError("n_product_types out of range");
  }
  if (opt.n_countries < 1 || opt.n_countries > static_cast<int>(kCountries.size())) {
    throw ValidationError("n_countries out of range");
  }
  if (opt.n_attrs < 1 || opt.n_attrs > static_cast<int>(kAttrNames.size())) {
    throw ValidationError("n_attrs out of range");
  }
  if (opt.values_per_attr < 2) throw ValidationError("values_per_attr must be >= 2");

  WorldSpec spec;
  spec.seed = opt.seed;
  spec.product_types.assign(kPts.begin(), kPts.begin() + opt.n_product_types);
  spec.countries.assign(kCountries.begin(), kCountries.begin() + opt.n_countries);
  spec.weak_noise_rate = opt.weak_noise_rate;
  spec.multi_value_rate = opt.multi_value_rate;
  spec.embedding_dim = opt.embedding_dim;

  // Fixed-length value words over the value consonant group: equal lengths
  // make cross-attribute substring overlap impossible.
  Rng rng(mix_seed(opt.seed, 0xDEF0ULL));
  std::unordered_set<std::string> used;
  auto fresh_value = [&]() {
    for (int guard = 0; guard < 100000; ++guard) {
      std::string w = gen_word(rng, kValueConsonants, 2);
      if (used.insert(w).second) return w;
    }
    throw GenerationError("value pool exhausted");
  };

  const int total_attrs = opt.n_attrs + (opt.with_image_attr ? 1 : 0);
  for (int ai = 0; ai < total_attrs; ++ai) {
    const bool image = opt.with_image_attr && ai == opt.n_attrs;
    AttributeSchema a;
    a.name = image ? "visual" : kAttrNames[static_cast<std::size_t>(ai)];
    for (int k = 0; k < opt.values_per_attr; ++k) a.value_domain.push_back(fresh_value());
    std::sort(a.value_domain.begin(), a.value_domain.end());
    a.applicable_fraction = opt.applicable_fraction;
    a.image_only = image;

    std::array<double, kNumMixPhenomena> row = opt.mix;
    if (image) {
      const double na = row[static_cast<int>(Phenomenon::Inapplicable)];
      row = {1.0 - na, 0.0, 0.0, 0.0, 0.0, na};
    } else {
      a.default_value = a.value_domain.front();
      a.derivation_cue = DerivationCue{a.value_domain.back()};
      a.multi_valued = ai == 0;
      if (ai % 2 == 1) {
        std::swap(row[static_cast<int>(Phenomenon::ImplicitDefault)],
                  row[static_cast<int>(Phenomenon::NonObtainable)]);
      }
      if (row[static_cast<int>(Phenomenon::NonObtainable)] > 0.0) a.default_value.reset();
    }
    spec.phenomenon_mix[a.name] = row;
    spec.attributes.push_back(std::move(a));
  }
  return spec;
}

}  // namespace attrgen::catalog
