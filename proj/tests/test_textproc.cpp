#include <doctest.h>

#include <filesystem>
#include <string>
#include <vector>

#include "attrgen/common.hpp"
#include "attrgen/rng.hpp"
#include "attrgen/textproc.hpp"
#include "attrgen/types.hpp"
#include "attrgen/valueset.hpp"

using namespace attrgen;
using namespace attrgen::textproc;

namespace {

Product make_product(std::string title, std::string bullets, std::string desc) {
  Product p;
  p.id = "p1";
  p.pt = "lamp";
  p.country = "us";
  p.title = std::move(title);
  p.bullets = std::move(bullets);
  p.description = std::move(desc);
  return p;
}

}  // namespace

TEST_CASE("normalize_value lowercases, trims, and collapses whitespace") {
  CHECK(normalize_value("  Light  BLUE ") == "light blue");
  CHECK(normalize_value("RED") == "red");
  CHECK(normalize_value("\t a\nb ") == "a b");
  CHECK(normalize_value("   ") == "");
}

TEST_CASE("ValueSet::of sorts, dedups, and rejects empties") {
  const ValueSet vs = ValueSet::of({"Red", "blue", "red "});
  CHECK(vs.kind == ValueKind::Values);
  CHECK(vs.values == std::vector<std::string>{"blue", "red"});
  CHECK(vs.is_canonical());
  CHECK_THROWS_AS(ValueSet::of({"", "  "}), ValidationError);

  CHECK(ValueSet::na().to_display() == "[NA]");
  CHECK(ValueSet::no().to_display() == "[NO]");
  CHECK(vs.to_display() == "blue, red");
  CHECK(ValueSet::single("Blue") == ValueSet::of({"blue"}));
}

TEST_CASE("tokenize lowercases and splits punctuation") {
  CHECK(tokenize("Red, BLUE!") == std::vector<std::string>{"red", ",", "blue", "!"});
  CHECK(tokenize("  a_b-c  ") == std::vector<std::string>{"a_b-c"});
  CHECK(tokenize("[NA]") == std::vector<std::string>{"[na]"});
  CHECK(tokenize("") == std::vector<std::string>{});
}

TEST_CASE("empty corpus yields exactly the reserved vocabulary") {
  const Vocabulary v = Vocabulary::build({}, 1);
  CHECK(v.size() == kNumReserved);
  CHECK(v.id("[PAD]") == kPad);
  CHECK(v.id("[BOS]") == kBos);
  CHECK(v.id("[EOS]") == kEos);
  CHECK(v.id("[UNK]") == kUnk);
  CHECK(v.id("[NA]") == kNa);
  CHECK(v.id("[NO]") == kNo);
  CHECK(v.id("[VSEP]") == kVsep);
  CHECK(v.id("[IMG]") == kImg);
}

TEST_CASE("min_count drops rare tokens to [UNK]") {
  const Vocabulary v = Vocabulary::build({"red red blue"}, 2);
  CHECK(v.contains("red"));
  CHECK_FALSE(v.contains("blue"));
  CHECK(v.id("blue") == kUnk);
  CHECK(v.token(v.id("red")) == "red");
}

TEST_CASE("vocabulary construction is deterministic") {
  const std::vector<std::string> corpus = {"solid oak table", "oak veneer", "solid brass"};
  const Vocabulary a = Vocabulary::build(corpus, 1);
  const Vocabulary b = Vocabulary::build(corpus, 1);
  CHECK(a.size() == b.size());
  for (int i = 0; i < a.size(); ++i) CHECK(a.token(i) == b.token(i));
  // first-appearance order after the reserved block
  CHECK(a.token(kNumReserved) == "solid");
  CHECK(a.token(kNumReserved + 1) == "oak");
}

TEST_CASE("vocabulary save/load round-trips") {
  const Vocabulary v = Vocabulary::build({"alpha beta gamma alpha"}, 1);
  const auto path = std::filesystem::temp_directory_path() / "attrgen_vocab_test.txt";
  v.save(path);
  const Vocabulary loaded = Vocabulary::load(path);
  REQUIRE(loaded.size() == v.size());
  for (int i = 0; i < v.size(); ++i) CHECK(loaded.token(i) == v.token(i));
  std::filesystem::remove(path);
}

TEST_CASE("vocabulary load rejects a corrupted reserved block") {
  const auto path = std::filesystem::temp_directory_path() / "attrgen_vocab_bad.txt";
  write_text_file(path, "[PAD]\n[BOGUS]\n");
  CHECK_THROWS_AS(Vocabulary::load(path), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("all-empty product serializes to the 8 sentinels") {
  const Vocabulary v = Vocabulary::build({}, 1);
  Product p;
  p.id = "p0";
  const auto seq = serialize_input(v, "", p, 64);
  CHECK(seq == std::vector<int>{kBos, kAttr, kPt, kMp, kTitle, kBullets, kDesc, kEos});
}

TEST_CASE("input serialization preserves the field order") {
  const Vocabulary v =
      Vocabulary::build({"color lamp us bright light warm glow soft shade"}, 1);
  const Product p = make_product("bright light", "warm glow", "soft shade");
  const auto seq = serialize_input(v, "color", p, 64);

  // Build the expectation explicitly; the layout is the contract under test.
  std::vector<int> want;
  want.push_back(kBos);
  want.push_back(kAttr);
  want.push_back(v.id("color"));
  want.push_back(kPt);
  want.push_back(v.id("lamp"));
  want.push_back(kMp);
  want.push_back(v.id("us"));
  want.push_back(kTitle);
  want.push_back(v.id("bright"));
  want.push_back(v.id("light"));
  want.push_back(kBullets);
  want.push_back(v.id("warm"));
  want.push_back(v.id("glow"));
  want.push_back(kDesc);
  want.push_back(v.id("soft"));
  want.push_back(v.id("shade"));
  want.push_back(kEos);
  CHECK(seq == want);
}

TEST_CASE("truncation drops description first and keeps the title intact") {
  const Vocabulary v = Vocabulary::build({"a b c d e f g h i j k l m n o p q r s t"}, 1);
  const Product p = make_product("a b c", "d e f", "g h i j k l m n o p");
  // 8 sentinels + attr(1) + pt(1) + mp(1) = 11 fixed; budget 7 for 16 words.
  const auto seq = serialize_input(v, "q", p, 18);
  CHECK(static_cast<int>(seq.size()) == 18);

  auto segment = [&](int from_sentinel, int to_sentinel) {
    std::vector<int> out;
    bool in = false;
    for (int id : seq) {
      if (id == to_sentinel) break;
      if (in) out.push_back(id);
      if (id == from_sentinel) in = true;
    }
    return out;
  };
  CHECK(segment(kTitle, kBullets) ==
        std::vector<int>{v.id("a"), v.id("b"), v.id("c")});  // title intact
  CHECK(segment(kBullets, kDesc) == std::vector<int>{v.id("d"), v.id("e"), v.id("f")});
  CHECK(segment(kDesc, kEos) == std::vector<int>{v.id("g")});  // desc cut from the right

  // Tighter budget: description gone, bullets truncated, title still intact.
  const auto seq2 = serialize_input(v, "q", p, 16);
  CHECK(segment(kTitle, kBullets) == std::vector<int>{v.id("a"), v.id("b"), v.id("c")});
  auto segment2 = [&](int from_sentinel, int to_sentinel) {
    std::vector<int> out;
    bool in = false;
    for (int id : seq2) {
      if (id == to_sentinel) break;
      if (in) out.push_back(id);
      if (id == from_sentinel) in = true;
    }
    return out;
  };
  CHECK(segment2(kBullets, kDesc) == std::vector<int>{v.id("d"), v.id("e")});
  CHECK(segment2(kDesc, kEos).empty());
}

TEST_CASE("output serialization of concrete, NA, and NO sets") {
  const Vocabulary v = Vocabulary::build({"blue red"}, 1);
  CHECK(serialize_output(v, ValueSet::of({"red", "blue"})) ==
        std::vector<int>{kBos, v.id("blue"), kVsep, v.id("red"), kEos});
  CHECK(serialize_output(v, ValueSet::na()) == std::vector<int>{kBos, kNa, kEos});
  CHECK(serialize_output(v, ValueSet::no()) == std::vector<int>{kBos, kNo, kEos});

  ValueSet broken;
  broken.kind = ValueKind::Values;
  broken.values = {"red", "blue"};  // unsorted: violates the invariant
  CHECK_THROWS_AS(serialize_output(v, broken), ValidationError);
}

TEST_CASE("parse_output is total and normalizes malformed sequences") {
  const Vocabulary v = Vocabulary::build({"red blue"}, 1);
  const int red = v.id("red");

  CHECK(parse_output(v, std::vector<int>{kBos, kVsep, red, kEos}) == ValueSet::of({"red"}));
  CHECK(parse_output(v, std::vector<int>{kBos, kNa, kEos}) == ValueSet::na());
  CHECK(parse_output(v, std::vector<int>{kBos, kNo, kEos}) == ValueSet::no());
  CHECK(parse_output(v, std::vector<int>{kBos, kEos}) == ValueSet::no());
  CHECK(parse_output(v, std::vector<int>{}) == ValueSet::no());
  // a negative atom after content is ignored
  CHECK(parse_output(v, std::vector<int>{kBos, red, kNa, kEos}) == ValueSet::of({"red"}));
  // a leading negative atom wins over trailing junk
  CHECK(parse_output(v, std::vector<int>{kBos, kNa, red, kEos}) == ValueSet::na());
  // duplicates collapse
  CHECK(parse_output(v, std::vector<int>{kBos, red, kVsep, red, kEos}) == ValueSet::of({"red"}));
  // tokens after [EOS] are ignored
  CHECK(parse_output(v, std::vector<int>{kBos, red, kEos, kNa}) == ValueSet::of({"red"}));
}

TEST_CASE("parse after serialize is the identity on canonical sets") {
  std::vector<std::string> words = {"ash",  "bay",  "crimson", "dune", "elm",
                                    "fern", "gold", "heather", "iris", "jade"};
  std::string corpus;
  for (const auto& w : words) corpus += w + " ";
  const Vocabulary v = Vocabulary::build({corpus}, 1);

  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    ValueSet vs;
    const auto kind = rng.next_below(4);
    if (kind == 0) {
      vs = ValueSet::na();
    } else if (kind == 1) {
      vs = ValueSet::no();
    } else {
      std::vector<std::string> chosen;
      const auto n = 1 + rng.next_below(3);
      for (std::size_t i = 0; i < n; ++i) {
        chosen.push_back(words[rng.next_below(words.size())]);
      }
      vs = ValueSet::of(chosen);
    }
    CAPTURE(trial);
    CHECK(parse_output(v, serialize_output(v, vs)) == vs);
  }
}

TEST_CASE("serialization is injective on distinct products below truncation") {
  const Vocabulary v = Vocabulary::build({"oak pine lamp chair us de"}, 1);
  const Product a = make_product("oak", "pine", "");
  Product b = make_product("oak pine", "", "");
  const auto sa = serialize_input(v, "wood", a, 64);
  const auto sb = serialize_input(v, "wood", b, 64);
  CHECK(sa != sb);  // same words, different fields → different sequences
}
