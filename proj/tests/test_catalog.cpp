#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "attrgen/catalog.hpp"
#include "attrgen/common.hpp"
#include "attrgen/jsonio.hpp"
#include "attrgen/textproc.hpp"

using namespace attrgen;
using namespace attrgen::catalog;

namespace {

std::string full_text(const Product& p) {
  return p.title + "\n" + p.bullets + "\n" + p.description;
}

std::map<std::string, const Product*> index_products(const Dataset& ds) {
  std::map<std::string, const Product*> by_id;
  for (const auto& p : ds.products) by_id[p.id] = &p;
  return by_id;
}

// Token-level adjacency scan for an ordered word pair.
bool has_adjacent_pair(const Product& p, const std::string& a, const std::string& b) {
  for (const std::string* field : {&p.title, &p.bullets, &p.description}) {
    const auto toks = textproc::tokenize(*field);
    for (std::size_t i = 0; i + 1 < toks.size(); ++i) {
      if (toks[i] == a && toks[i + 1] == b) return true;
    }
  }
  return false;
}

bool has_token(const Product& p, const std::string& w) {
  for (const std::string* field : {&p.title, &p.bullets, &p.description}) {
    const auto toks = textproc::tokenize(*field);
    if (std::find(toks.begin(), toks.end(), w) != toks.end()) return true;
  }
  return false;
}

WorldSpec tiny_spec() {
  DefaultWorldOptions opt;
  opt.seed = 11;
  opt.n_product_types = 2;
  opt.n_countries = 2;
  opt.n_attrs = 3;
  return make_default_world_spec(opt);
}

}  // namespace

TEST_CASE("full applicability yields the complete PAC cross product") {
  WorldSpec spec = tiny_spec();
  const World world = generate_world(spec);
  CHECK(world.pacs.size() == 2u * 3u * 2u);  // PT x attribute x country
}

TEST_CASE("world generation is deterministic") {
  const WorldSpec spec = tiny_spec();
  const World a = generate_world(spec);
  const World b = generate_world(spec);
  CHECK(a.filler == b.filler);
  CHECK(a.pacs == b.pacs);
  REQUIRE(a.attr_lex.size() == b.attr_lex.size());
  for (const auto& [key, lex] : a.attr_lex) {
    const auto& other = b.attr_lex.at(key);
    CHECK(lex.synonyms == other.synonyms);
    CHECK(lex.cue == other.cue);
    CHECK(lex.na_marker == other.na_marker);
  }
}

TEST_CASE("spec validation names the offending field") {
  WorldSpec spec = tiny_spec();
  spec.phenomenon_mix.begin()->second[0] -= 0.1;  // row sums to 0.9
  try {
    generate_world(spec);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("phenomenon_mix") != std::string::npos);
  }

  WorldSpec empty_domain = tiny_spec();
  empty_domain.attributes[0].value_domain.clear();
  CHECK_THROWS_AS(generate_world(empty_domain), ValidationError);

  WorldSpec bad_rate = tiny_spec();
  bad_rate.weak_noise_rate = 1.5;
  CHECK_THROWS_AS(generate_world(bad_rate), ValidationError);

  WorldSpec overlapping = tiny_spec();
  overlapping.attributes[0].value_domain.push_back(
      overlapping.attributes[1].value_domain[0]);
  CHECK_THROWS_AS(generate_world(overlapping), ValidationError);
}

TEST_CASE("emitting zero products yields empty outputs") {
  const World world = generate_world(tiny_spec());
  const Dataset ds = emit_dataset(world, 0, 0.5);
  CHECK(ds.products.empty());
  CHECK(ds.labels.empty());
}

TEST_CASE("zero noise and full strong sampling reproduce the gold everywhere") {
  WorldSpec spec = tiny_spec();
  spec.weak_noise_rate = 0.0;
  const World world = generate_world(spec);
  const Dataset ds = emit_dataset(world, 120, 1.0);
  REQUIRE(!ds.labels.empty());
  for (const auto& rec : ds.labels) {
    REQUIRE(rec.weak_label.has_value());
    CHECK(*rec.weak_label == rec.gold);
    REQUIRE(rec.strong_label.has_value());
    CHECK(*rec.strong_label == rec.gold);
  }
}

TEST_CASE("weak corruption rate converges to the configured noise rate") {
  WorldSpec spec = tiny_spec();
  spec.seed = 77;
  spec.weak_noise_rate = 0.2;
  const World world = generate_world(spec);
  // 4000 products x 3 attributes, ~85% with concrete gold.
  const Dataset ds = emit_dataset(world, 4000, 0.0);

  int concrete = 0, corrupted = 0;
  for (const auto& rec : ds.labels) {
    if (!rec.gold.is_values()) continue;
    ++concrete;
    if (*rec.weak_label != rec.gold) ++corrupted;
  }
  REQUIRE(concrete >= 10000);
  const double rate = static_cast<double>(corrupted) / concrete;
  CHECK(rate > 0.18);
  CHECK(rate < 0.22);
}

TEST_CASE("oracle consistency: value strings appear verbatim exactly for explicit records") {
  WorldSpec spec = tiny_spec();
  spec.seed = 5;
  spec.multi_value_rate = 0.3;
  const World world = generate_world(spec);
  const Dataset ds = emit_dataset(world, 400, 0.5);
  const auto by_id = index_products(ds);

  int explicit_seen = 0, hidden_seen = 0;
  for (const auto& rec : ds.labels) {
    const Product& prod = *by_id.at(rec.product_id);
    const std::string text = full_text(prod);
    switch (rec.phenomenon) {
      case Phenomenon::Explicit:
        ++explicit_seen;
        for (const auto& v : rec.gold.values) {
          CHECK(text.find(v) != std::string::npos);
        }
        break;
      case Phenomenon::Periphrastic:
      case Phenomenon::ImplicitDefault:
      case Phenomenon::Derivable:
        ++hidden_seen;
        for (const auto& v : rec.gold.values) {
          CAPTURE(rec.product_id);
          CAPTURE(v);
          CHECK(text.find(v) == std::string::npos);
        }
        break;
      case Phenomenon::NonObtainable:
      case Phenomenon::Inapplicable:
      case Phenomenon::ImageOnly:
        break;
    }
  }
  CHECK(explicit_seen > 100);
  CHECK(hidden_seen > 50);
}

TEST_CASE("gold kinds track phenomena") {
  const World world = generate_world(tiny_spec());
  const Dataset ds = emit_dataset(world, 300, 0.5);
  for (const auto& rec : ds.labels) {
    CHECK((rec.gold.kind == ValueKind::NA) == (rec.phenomenon == Phenomenon::Inapplicable));
    CHECK((rec.gold.kind == ValueKind::NO) == (rec.phenomenon == Phenomenon::NonObtainable));
    if (rec.strong_label) CHECK(*rec.strong_label == rec.gold);
  }
}

TEST_CASE("phenomenon frequencies converge to the mix") {
  WorldSpec spec = tiny_spec();
  spec.seed = 31;
  const World world = generate_world(spec);
  const Dataset ds = emit_dataset(world, 2500, 0.0);

  std::map<std::string, std::map<Phenomenon, int>> counts;
  std::map<std::string, int> totals;
  for (const auto& rec : ds.labels) {
    ++counts[rec.pac.attribute][rec.phenomenon];
    ++totals[rec.pac.attribute];
  }
  for (const auto& [attr, row] : spec.phenomenon_mix) {
    const int n = totals.at(attr);
    REQUIRE(n >= 2000);
    for (int i = 0; i < kNumMixPhenomena; ++i) {
      const double expected = row[static_cast<std::size_t>(i)];
      const double seen =
          static_cast<double>(counts[attr][static_cast<Phenomenon>(i)]) / n;
      CAPTURE(attr);
      CAPTURE(i);
      CHECK(std::abs(seen - expected) < 0.03);
    }
  }
}

TEST_CASE("dataset emission is deterministic and schedule-independent in form") {
  const World world = generate_world(tiny_spec());
  const Dataset a = emit_dataset(world, 50, 0.4);
  const Dataset b = emit_dataset(world, 50, 0.4);
  REQUIRE(a.products.size() == b.products.size());
  for (std::size_t i = 0; i < a.products.size(); ++i) {
    CHECK(a.products[i].id == b.products[i].id);
    CHECK(a.products[i].title == b.products[i].title);
    CHECK(a.products[i].bullets == b.products[i].bullets);
    CHECK(a.products[i].description == b.products[i].description);
  }
  REQUIRE(a.labels.size() == b.labels.size());
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    CHECK(a.labels[i].gold == b.labels[i].gold);
    CHECK(a.labels[i].weak_label == b.labels[i].weak_label);
    CHECK(a.labels[i].strong_label == b.labels[i].strong_label);
  }
  // A prefix of a larger emission matches: per-product streams are
  // index-derived, so adding products never disturbs earlier ones.
  const Dataset c = emit_dataset(world, 60, 0.4);
  for (std::size_t i = 0; i < a.products.size(); ++i) {
    CHECK(a.products[i].title == c.products[i].title);
  }
}

TEST_CASE("inapplicability markers are adjacent only for NA records") {
  WorldSpec spec = tiny_spec();
  spec.seed = 99;
  const World world = generate_world(spec);
  const Dataset ds = emit_dataset(world, 500, 0.0);
  const auto by_id = index_products(ds);

  int na_records = 0, teased_applicable = 0;
  for (const auto& rec : ds.labels) {
    const Product& prod = *by_id.at(rec.product_id);
    const auto& lex = world.devices(rec.pac.attribute, rec.pac.country);
    const bool adjacent = has_adjacent_pair(prod, lex.na_marker[0], lex.na_marker[1]);
    if (rec.phenomenon == Phenomenon::Inapplicable) {
      ++na_records;
      CHECK(adjacent);
    } else {
      CHECK_FALSE(adjacent);
      if (has_token(prod, lex.na_marker[0]) && has_token(prod, lex.na_marker[1])) {
        ++teased_applicable;
      }
    }
  }
  CHECK(na_records > 20);
  // Word presence alone cannot separate NA from applicable: a healthy share of
  // applicable products carries both marker words non-adjacently.
  CHECK(teased_applicable > 30);
}

TEST_CASE("split_pacs partitions deterministically") {
  // 50 PTs x 5 attributes x 4 countries = 1000 PACs.
  WorldSpec spec;
  spec.seed = 3;
  for (int i = 0; i < 50; ++i) spec.product_types.push_back("pt" + std::to_string(i));
  spec.countries = {"us", "de", "jp", "br"};
  const std::string cons = "zxqw";
  const std::string vows = "aeiou";
  int vi = 0;
  for (int a = 0; a < 5; ++a) {
    AttributeSchema attr;
    attr.name = "attr" + std::to_string(a);
    for (int k = 0; k < 2; ++k) {
      std::string w;
      w += cons[static_cast<std::size_t>(vi / 5 % 4)];
      w += vows[static_cast<std::size_t>(vi % 5)];
      w += cons[static_cast<std::size_t>(vi / 20 % 4)];
      w += vows[static_cast<std::size_t>(vi / 100 % 5)];
      ++vi;
      attr.value_domain.push_back(w);
    }
    std::sort(attr.value_domain.begin(), attr.value_domain.end());
    spec.phenomenon_mix[attr.name] = {1.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    spec.attributes.push_back(std::move(attr));
  }
  const World world = generate_world(spec);
  REQUIRE(world.pacs.size() == 1000);

  const auto [a, b] = split_pacs(world, 0.2, 17);
  CHECK(a.size() == 800);
  CHECK(b.size() == 200);

  std::set<std::string> keys;
  for (const auto& p : a) keys.insert(p.key());
  for (const auto& p : b) keys.insert(p.key());
  CHECK(keys.size() == 1000);  // disjoint partition covering everything

  const auto [a2, b2] = split_pacs(world, 0.2, 17);
  CHECK(a == a2);
  CHECK(b == b2);
  const auto [a3, b3] = split_pacs(world, 0.2, 18);
  CHECK(b != b3);  // different seed shuffles differently
}

TEST_CASE("split_pacs handles small worlds and rejects degenerate ones") {
  WorldSpec spec = tiny_spec();
  spec.product_types = {"lamp", "mug", "rug", "fan", "cot"};
  spec.countries = {"us", "de"};
  spec.attributes.resize(1);
  spec.phenomenon_mix = {{spec.attributes[0].name, spec.phenomenon_mix.at(spec.attributes[0].name)}};
  const World world = generate_world(spec);  // 5 x 1 x 2 = 10 PACs
  REQUIRE(world.pacs.size() == 10);
  const auto [a, b] = split_pacs(world, 0.5, 1);
  CHECK(a.size() == 5);
  CHECK(b.size() == 5);

  WorldSpec lone = tiny_spec();
  lone.product_types = {"lamp"};
  lone.countries = {"us"};
  lone.attributes.resize(1);
  lone.phenomenon_mix = {{lone.attributes[0].name, lone.phenomenon_mix.at(lone.attributes[0].name)}};
  const World one = generate_world(lone);
  REQUIRE(one.pacs.size() == 1);
  CHECK_THROWS_AS(split_pacs(one, 0.5, 1), ValidationError);
  CHECK_THROWS_AS(split_pacs(world, 0.0, 1), ValidationError);
}

TEST_CASE("embeddings carry the image value in the signal block") {
  DefaultWorldOptions opt;
  opt.seed = 8;
  opt.n_attrs = 1;
  opt.with_image_attr = true;
  opt.embedding_dim = 16;
  const WorldSpec spec = make_default_world_spec(opt);
  const World world = generate_world(spec);
  REQUIRE(world.image_attr == "visual");
  REQUIRE(!world.prototypes.empty());

  const std::string v0 = spec.attributes.back().value_domain[0];
  const std::string v1 = spec.attributes.back().value_domain[1];

  const auto e1 = synth_embedding(world, "prodA", ValueSet::single(v0));
  const auto e2 = synth_embedding(world, "prodB", ValueSet::single(v0));
  const auto e3 = synth_embedding(world, "prodA", ValueSet::single(v1));
  const int half = spec.embedding_dim / 2;

  bool signal_equal = true, noise_equal = true, signal_flipped = false;
  for (int j = 0; j < half; ++j) {
    signal_equal = signal_equal && e1[static_cast<std::size_t>(j)] == e2[static_cast<std::size_t>(j)];
    signal_flipped =
        signal_flipped || e1[static_cast<std::size_t>(j)] != e3[static_cast<std::size_t>(j)];
  }
  for (int j = half; j < spec.embedding_dim; ++j) {
    noise_equal = noise_equal && e1[static_cast<std::size_t>(j)] == e2[static_cast<std::size_t>(j)];
  }
  CHECK(signal_equal);       // same value, same prototype
  CHECK_FALSE(noise_equal);  // different product, different noise
  CHECK(signal_flipped);     // different value, different prototype

  // Nearest-prototype readout recovers every domain value exactly.
  for (const auto& v : spec.attributes.back().value_domain) {
    const auto emb = synth_embedding(world, "probe", ValueSet::single(v));
    CHECK(decode_embedding(world, emb) == v);
  }
}

TEST_CASE("image-only values never leak into text") {
  DefaultWorldOptions opt;
  opt.seed = 21;
  opt.n_attrs = 2;
  opt.with_image_attr = true;
  const World world = generate_world(make_default_world_spec(opt));
  const Dataset ds = emit_dataset(world, 300, 0.5);
  const auto by_id = index_products(ds);

  int image_records = 0;
  for (const auto& rec : ds.labels) {
    if (rec.pac.attribute != "visual") continue;
    const Product& prod = *by_id.at(rec.product_id);
    REQUIRE(prod.embedding.has_value());
    if (rec.phenomenon == Phenomenon::ImageOnly) {
      ++image_records;
      for (const auto& v : rec.gold.values) {
        CHECK(full_text(prod).find(v) == std::string::npos);
      }
      CHECK(decode_embedding(world, *prod.embedding) == rec.gold.values.front());
    }
  }
  CHECK(image_records > 50);
}

TEST_CASE("product split assignment is deterministic with stable fractions") {
  int train = 0, eval = 0, test = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::string id = "p" + std::to_string(i);
    const Split s = assign_split(id, 42);
    CHECK(assign_split(id, 42) == s);
    if (s == Split::Train) ++train;
    if (s == Split::Eval) ++eval;
    if (s == Split::Test) ++test;
  }
  CHECK(std::abs(train / 10000.0 - 0.7) < 0.02);
  CHECK(std::abs(eval / 10000.0 - 0.1) < 0.02);
  CHECK(std::abs(test / 10000.0 - 0.2) < 0.02);
}

TEST_CASE("dataset files round-trip through JSONL") {
  DefaultWorldOptions opt;
  opt.seed = 4;
  opt.n_attrs = 2;
  opt.with_image_attr = true;
  opt.multi_value_rate = 0.4;
  const World world = generate_world(make_default_world_spec(opt));
  const Dataset ds = emit_dataset(world, 40, 0.5);

  const auto dir = std::filesystem::temp_directory_path();
  const auto ppath = (dir / "attrgen_products_rt.jsonl").string();
  const auto lpath = (dir / "attrgen_labels_rt.jsonl").string();
  write_products_jsonl(ppath, ds.products);
  write_labels_jsonl(lpath, ds.labels);

  const auto products = read_products_jsonl(ppath);
  REQUIRE(products.size() == ds.products.size());
  for (std::size_t i = 0; i < products.size(); ++i) {
    CHECK(products[i].id == ds.products[i].id);
    CHECK(products[i].title == ds.products[i].title);
    CHECK(products[i].embedding == ds.products[i].embedding);
  }
  const auto labels = read_labels_jsonl(lpath);
  REQUIRE(labels.size() == ds.labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    CHECK(labels[i].product_id == ds.labels[i].product_id);
    CHECK(labels[i].pac == ds.labels[i].pac);
    CHECK(labels[i].gold == ds.labels[i].gold);
    CHECK(labels[i].phenomenon == ds.labels[i].phenomenon);
    CHECK(labels[i].weak_label == ds.labels[i].weak_label);
    CHECK(labels[i].strong_label == ds.labels[i].strong_label);
  }
  std::filesystem::remove(ppath);
  std::filesystem::remove(lpath);
}

TEST_CASE("world spec JSON round-trips into an identical world") {
  WorldSpec spec = tiny_spec();
  spec.multi_value_rate = 0.25;
  const std::string text = spec.to_json();
  const WorldSpec back = WorldSpec::from_json(text);
  const World w1 = generate_world(spec);
  const World w2 = generate_world(back);
  CHECK(w1.filler == w2.filler);
  CHECK(w1.pacs == w2.pacs);
}

TEST_CASE("multi-value golds appear for the multi-valued attribute") {
  WorldSpec spec = tiny_spec();
  spec.multi_value_rate = 0.5;
  const World world = generate_world(spec);
  const Dataset ds = emit_dataset(world, 400, 0.0);
  int multi = 0;
  for (const auto& rec : ds.labels) {
    if (rec.gold.is_values() && rec.gold.values.size() == 2) {
      ++multi;
      CHECK(rec.pac.attribute == "attr_a");  // only attr_a is multi_valued
    }
  }
  CHECK(multi > 20);
}

TEST_CASE("low applicability still leaves every attribute reachable") {
  DefaultWorldOptions opt;
  opt.seed = 15;
  opt.applicable_fraction = 0.05;
  opt.n_product_types = 3;
  const World world = generate_world(make_default_world_spec(opt));
  std::set<std::string> attrs_with_pac;
  for (const auto& pac : world.pacs) attrs_with_pac.insert(pac.attribute);
  CHECK(attrs_with_pac.size() == world.spec.attributes.size());
}
