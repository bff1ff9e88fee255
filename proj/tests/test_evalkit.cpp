#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <vector>

#include "attrgen/common.hpp"
#include "attrgen/evalkit.hpp"
#include "attrgen/rng.hpp"

using namespace attrgen;
using namespace attrgen::evalkit;

namespace {

const PacScope kPac{"shoe", "color", "US"};

EvalRecord rec(ValueSet gold, ValueSet predicted, double confidence,
               const PacScope& pac = kPac) {
  EvalRecord r;
  r.pac = pac;
  r.product_id = "p";
  r.gold = std::move(gold);
  r.predicted = std::move(predicted);
  r.confidence = confidence;
  return r;
}

// Plain scan over every distinct candidate confidence, smallest first.
// No sorting tricks, no prefix sums: the reference the search must equal.
std::optional<ThresholdResult> oracle_search(const std::vector<EvalRecord>& records,
                                             double precision_target, int min_support) {
  int n_gold = 0;
  std::vector<std::pair<double, bool>> cands;
  for (const auto& r : records) {
    if (r.gold.kind == ValueKind::Values) ++n_gold;
    if (r.predicted.kind == ValueKind::Values) {
      cands.emplace_back(r.confidence, match(r.predicted, r.gold));
    }
  }
  std::set<double> thresholds;
  for (const auto& c : cands) thresholds.insert(c.first);
  for (double t : thresholds) {
    int support = 0, matches = 0;
    for (const auto& c : cands) {
      if (c.first >= t) {
        ++support;
        matches += c.second ? 1 : 0;
      }
    }
    if (support >= min_support &&
        static_cast<double>(matches) / static_cast<double>(support) >= precision_target) {
      ThresholdResult res;
      res.threshold = t;
      res.recall = n_gold == 0 ? 0.0 : static_cast<double>(matches) / static_cast<double>(n_gold);
      res.support = support;
      return res;
    }
  }
  return std::nullopt;
}

// Random per-PAC eval slices with deliberately quantized confidences so tied
// thresholds are common. Per-instance gold-applicability and model-quality
// rates vary widely so the search sees both acceptances and rejections.
std::vector<EvalRecord> random_records(Rng& rng, int max_n = 200) {
  const int n = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(max_n + 1)));
  const double values_rate = 0.5 + 0.5 * rng.next_double();
  const double quality = 0.5 + 0.5 * rng.next_double();
  std::vector<EvalRecord> records;
  records.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double conf =
        static_cast<double>(rng.next_below(20)) / 20.0 + 0.025;  // 0.025 .. 0.975
    ValueSet gold = rng.bernoulli(values_rate)
                        ? ValueSet::of({rng.bernoulli(0.5) ? "red" : "blue"})
                    : rng.bernoulli(0.5) ? ValueSet::na()
                                         : ValueSet::no();
    ValueSet predicted;
    if (rng.bernoulli(0.8)) {
      predicted = (gold.kind == ValueKind::Values && rng.bernoulli(quality))
                      ? gold
                      : ValueSet::of({"green"});
    } else {
      predicted = rng.bernoulli(0.5) ? ValueSet::na() : ValueSet::no();
    }
    records.push_back(rec(gold, predicted, conf));
  }
  return records;
}

}  // namespace

TEST_CASE("match is set equality over kinds and normalized values") {
  CHECK(match(ValueSet::of({"red", "blue"}), ValueSet::of({"blue", "red"})));
  CHECK(match(ValueSet::na(), ValueSet::na()));
  CHECK(match(ValueSet::no(), ValueSet::no()));
  CHECK_FALSE(match(ValueSet::na(), ValueSet::of({"red"})));
  CHECK_FALSE(match(ValueSet::na(), ValueSet::no()));
  CHECK_FALSE(match(ValueSet::of({"red"}), ValueSet::of({"red", "blue"})));
  // Non-canonical spellings still match after normalization.
  ValueSet sloppy;
  sloppy.kind = ValueKind::Values;
  sloppy.values = {"Red "};
  CHECK(match(sloppy, ValueSet::of({"red"})));
  CHECK(match(ValueSet::of({"red"}), sloppy));
}

TEST_CASE("threshold search on the worked four-record slice") {
  // (0.99,T) (0.98,T) (0.97,F) (0.96,T) at P=0.75, S=3: t=0.99..0.97 give
  // precision 1, 1, 2/3; t=0.96 gives 3/4 with support 4, the smallest
  // qualifying threshold.
  std::vector<EvalRecord> records{
      rec(ValueSet::of({"red"}), ValueSet::of({"red"}), 0.99),
      rec(ValueSet::of({"blue"}), ValueSet::of({"blue"}), 0.98),
      rec(ValueSet::of({"red"}), ValueSet::of({"blue"}), 0.97),
      rec(ValueSet::of({"red"}), ValueSet::of({"red"}), 0.96),
  };
  const auto res = threshold_search(records, 0.75, 3);
  REQUIRE(res.has_value());
  CHECK(res->threshold == 0.96);
  CHECK(res->support == 4);
  CHECK(res->recall == 0.75);  // 3 matches over 4 gold-valued records
}

TEST_CASE("threshold search with a perfect model returns the minimum confidence") {
  std::vector<EvalRecord> records;
  for (int i = 0; i < 10; ++i) {
    records.push_back(rec(ValueSet::of({"red"}), ValueSet::of({"red"}), 0.5 + 0.04 * i));
  }
  const auto res = threshold_search(records, 0.96, 1);
  REQUIRE(res.has_value());
  CHECK(res->threshold == 0.5);
  CHECK(res->recall == 1.0);
  CHECK(res->support == 10);
}

TEST_CASE("negative predictions are abstentions: they cost recall, not precision") {
  std::vector<EvalRecord> records{
      rec(ValueSet::of({"red"}), ValueSet::of({"red"}), 0.9),
      rec(ValueSet::of({"red"}), ValueSet::of({"red"}), 0.9),
      rec(ValueSet::of({"red"}), ValueSet::of({"red"}), 0.9),
      rec(ValueSet::of({"blue"}), ValueSet::no(), 0.99),  // wrong, but abstains
      rec(ValueSet::of({"blue"}), ValueSet::na(), 0.99),  // wrong, but abstains
  };
  const auto res = threshold_search(records, 0.96, 3);
  REQUIRE(res.has_value());
  CHECK(res->support == 3);      // the two negatives are not candidates
  CHECK(res->recall == 3.0 / 5.0);  // but their gold values stay in the denominator
}

TEST_CASE("threshold search equals the brute-force oracle on randomized slices") {
  int accepted = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(40000 + seed);
    const auto records = random_records(rng);
    const double p = 0.5 + 0.05 * static_cast<double>(rng.next_below(11));
    const int s = 1 + static_cast<int>(rng.next_below(40));
    const auto got = threshold_search(records, p, s);
    const auto want = oracle_search(records, p, s);
    REQUIRE(got.has_value() == want.has_value());
    if (got) {
      ++accepted;
      CHECK(got->threshold == want->threshold);
      CHECK(got->support == want->support);
      CHECK(got->recall == want->recall);
    }
  }
  // The instance mix must exercise both outcomes for the oracle to mean much.
  CHECK(accepted > 100);
  CHECK(accepted < 900);
}

TEST_CASE("raising the precision target never lowers the threshold") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(91000 + seed);
    const auto records = random_records(rng, 80);
    const auto lo = threshold_search(records, 0.6, 5);
    const auto hi = threshold_search(records, 0.85, 5);
    if (hi) {
      REQUIRE(lo.has_value());  // anything meeting 0.85 also meets 0.6
      CHECK(hi->threshold >= lo->threshold);
    }
  }
}

TEST_CASE("raising the support floor never converts a rejection into acceptance") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(92000 + seed);
    const auto records = random_records(rng, 80);
    const auto loose = threshold_search(records, 0.8, 3);
    const auto strict = threshold_search(records, 0.8, 20);
    if (!loose) CHECK_FALSE(strict.has_value());
    if (strict) CHECK(loose.has_value());
  }
}

TEST_CASE("accepted slices verify their precision floor independently") {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    Rng rng(93000 + seed);
    const auto records = random_records(rng, 120);
    const double p = 0.7 + 0.05 * static_cast<double>(rng.next_below(7));
    const auto res = threshold_search(records, p, 5);
    if (!res) continue;
    int support = 0, matches = 0;
    for (const auto& r : records) {
      if (r.predicted.kind == ValueKind::Values && r.confidence >= res->threshold) {
        ++support;
        matches += match(r.predicted, r.gold) ? 1 : 0;
      }
    }
    CHECK(support == res->support);
    CHECK(static_cast<double>(matches) / static_cast<double>(support) >= p);
  }
}

TEST_CASE("evaluate groups by PAC and reports in sorted key order") {
  const PacScope a{"mug", "capacity", "DE"};
  const PacScope b{"shoe", "color", "US"};
  std::vector<EvalRecord> records;
  for (int i = 0; i < 5; ++i) {
    records.push_back(rec(ValueSet::of({"red"}), ValueSet::of({"red"}), 0.9, b));
    records.push_back(rec(ValueSet::of({"1l"}), ValueSet::of({"2l"}), 0.9, a));
  }
  const auto reports = evaluate(records, 0.8, 3);
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].pac.key() == "mug|capacity|DE");
  CHECK(reports[1].pac.key() == "shoe|color|US");
  CHECK_FALSE(reports[0].accepted);
  CHECK(reports[0].n_gold == 5);
  CHECK(reports[0].support == 0);
  CHECK(reports[1].accepted);
  CHECK(reports[1].recall_at_p == 1.0);
}

TEST_CASE("aggregate folds reports order-independently") {
  std::vector<PacReport> reports;
  for (int i = 0; i < 10; ++i) {
    PacReport r;
    r.pac = PacScope{"pt" + std::to_string(i % 3), "attr" + std::to_string(i % 2), "US"};
    r.n_gold = 10 + i;
    if (i < 4) {
      r.accepted = true;
      r.threshold = 0.9;
      r.recall_at_p = 0.5 + 0.1 * i;
      r.support = 30;
    }
    reports.push_back(r);
  }
  const auto agg = aggregate(reports);
  CHECK(agg.n_pacs == 10);
  CHECK(agg.n_accepted == 4);
  CHECK(agg.ar_at_p == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(agg.recall_at_p == doctest::Approx(0.65).epsilon(1e-12));
  // n_gold-weighted: (0.5*10 + 0.6*11 + 0.7*12 + 0.8*13) / 46
  CHECK(agg.recall_at_p_weighted ==
        doctest::Approx((0.5 * 10 + 0.6 * 11 + 0.7 * 12 + 0.8 * 13) / 46.0).epsilon(1e-12));
  CHECK(agg.by_attribute.size() == 2);
  CHECK(agg.by_attribute.at("attr0").n_pacs == 5);

  auto shuffled = reports;
  Rng rng(7);
  rng.shuffle(shuffled);
  const auto agg2 = aggregate(shuffled);
  CHECK(agg2.ar_at_p == agg.ar_at_p);
  CHECK(*agg2.recall_at_p == *agg.recall_at_p);
  CHECK(*agg2.recall_at_p_weighted == *agg.recall_at_p_weighted);

  SUBCASE("no accepted PACs leaves recall absent") {
    std::vector<PacReport> none(reports.begin() + 4, reports.end());
    const auto agg3 = aggregate(none);
    CHECK(agg3.ar_at_p == 0.0);
    CHECK_FALSE(agg3.recall_at_p.has_value());
    CHECK_FALSE(agg3.recall_at_p_weighted.has_value());
  }
  SUBCASE("single accepted PAC reports its own recall") {
    std::vector<PacReport> one{reports[3]};
    const auto agg4 = aggregate(one);
    CHECK(*agg4.recall_at_p == doctest::Approx(0.8).epsilon(1e-15));
  }
  SUBCASE("empty input is an error") {
    CHECK_THROWS_AS(aggregate({}), ValidationError);
  }
}

TEST_CASE("applicability accuracy counts applicable-vs-NA decisions") {
  SUBCASE("all NA on both sides is perfect") {
    std::vector<EvalRecord> records{rec(ValueSet::na(), ValueSet::na(), 0.9),
                                    rec(ValueSet::na(), ValueSet::na(), 0.8)};
    const auto rep = applicability_accuracy(records);
    CHECK(*rep.overall == 1.0);
  }
  SUBCASE("hand-built six-record slice with four correct decisions") {
    std::vector<EvalRecord> records{
        rec(ValueSet::of({"red"}), ValueSet::of({"blue"}), 0.9),  // app vs app: correct
        rec(ValueSet::of({"red"}), ValueSet::na(), 0.9),          // app vs na: wrong
        rec(ValueSet::na(), ValueSet::na(), 0.9),                 // na vs na: correct
        rec(ValueSet::na(), ValueSet::of({"red"}), 0.9),          // na vs app: wrong
        rec(ValueSet::no(), ValueSet::no(), 0.9),                 // app vs app: correct
        rec(ValueSet::of({"red"}), ValueSet::of({"red"}), 0.9),   // app vs app: correct
    };
    const auto rep = applicability_accuracy(records);
    CHECK(*rep.overall == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
    // Gold applicability rate 4/6 <= 0.90, so the lone PAC sits in the low bucket.
    CHECK(rep.n_high_pacs == 0);
    CHECK(rep.n_low_pacs == 1);
    CHECK_FALSE(rep.high_bucket.has_value());
    CHECK(*rep.low_bucket == *rep.overall);
  }
  SUBCASE("bucket cut splits PACs at the gold applicability rate") {
    const PacScope high_pac{"shoe", "color", "US"};  // 10/10 applicable
    const PacScope low_pac{"mug", "capacity", "DE"};  // 9/10: exactly 0.9 goes low
    std::vector<EvalRecord> records;
    for (int i = 0; i < 10; ++i) {
      records.push_back(rec(ValueSet::of({"red"}), ValueSet::of({"red"}), 0.9, high_pac));
      records.push_back(
          rec(i == 0 ? ValueSet::na() : ValueSet::of({"1l"}), ValueSet::of({"1l"}), 0.9, low_pac));
    }
    const auto rep = applicability_accuracy(records, 0.90);
    CHECK(rep.n_high_pacs == 1);
    CHECK(rep.n_low_pacs == 1);
    CHECK(*rep.high_bucket == 1.0);
    CHECK(*rep.low_bucket == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(*rep.overall == doctest::Approx(19.0 / 20.0).epsilon(1e-12));
  }
}

TEST_CASE("pac report csv has the fixed column layout") {
  PacReport accepted;
  accepted.pac = PacScope{"shoe", "color", "US"};
  accepted.accepted = true;
  accepted.threshold = 0.96;
  accepted.recall_at_p = 0.75;
  accepted.support = 31;
  accepted.n_gold = 40;
  PacReport rejected;
  rejected.pac = PacScope{"mug", "capacity", "DE"};
  rejected.n_gold = 12;
  const auto csv = pac_reports_csv({accepted, rejected});
  CHECK(csv ==
        "pac,accepted,threshold,recall_at_p,support,n_gold\n"
        "shoe|color|US,true,0.96,0.75,31,40\n"
        "mug|capacity|DE,false,,,0,12\n");
  const auto j = pac_report_to_json(rejected);
  CHECK(j.at("accepted") == false);
  CHECK(j.at("threshold").is_null());
  const auto ja = aggregate_to_json(aggregate({accepted, rejected}));
  CHECK(ja.at("ar_at_p") == 0.5);
  CHECK(ja.at("recall_at_p") == 0.75);
}
