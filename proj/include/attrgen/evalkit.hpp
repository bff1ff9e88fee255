#pragma once

// Acceptance-style evaluation: exact-set match, per-slice confidence
// threshold search with a precision floor and a support floor, and the
// aggregates built on top of it (acceptance rate, mean recall on accepted
// slices, applicability accuracy).

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "attrgen/types.hpp"
#include "attrgen/valueset.hpp"

namespace attrgen::evalkit {

// One scored prediction against a held-out gold label.
struct EvalRecord {
  PacScope pac;
  std::string product_id;
  ValueSet gold;
  ValueSet predicted;
  double confidence = 0.0;
};

// True iff the kinds agree and, for concrete values, the normalized sets
// are equal. NA never matches a value set and never matches NO.
bool match(const ValueSet& predicted, const ValueSet& gold);

struct ThresholdResult {
  double threshold = 0.0;
  double recall = 0.0;   // matches above threshold / records with gold values
  int support = 0;       // backfill candidates at or above the threshold
};

// Smallest confidence t (over the distinct candidate confidences) whose
// accepted set A_t = {value predictions with confidence >= t} satisfies
// precision(A_t) >= precision_target and |A_t| >= min_support. NA/NO
// predictions are abstentions: never candidates, so a negative prediction
// on a gold-valued record costs recall, not precision. All records must
// share one PAC. Returns nothing when no threshold qualifies.
std::optional<ThresholdResult> threshold_search(const std::vector<EvalRecord>& records,
                                                double precision_target, int min_support);

constexpr double kDefaultPrecisionTarget = 0.96;
constexpr int kDefaultMinSupport = 30;

struct PacReport {
  PacScope pac;
  bool accepted = false;
  std::optional<double> threshold;
  std::optional<double> recall_at_p;
  int support = 0;  // 0 when not accepted
  int n_gold = 0;   // records with concrete gold values
};

// Groups records by PAC, runs threshold_search on each, and returns one
// report per PAC in sorted pac-key order.
std::vector<PacReport> evaluate(const std::vector<EvalRecord>& records, double precision_target,
                                int min_support);

struct AttributeBucket {
  int n_pacs = 0;
  int n_accepted = 0;
  double ar_at_p = 0.0;
  std::optional<double> recall_at_p;
};

struct AggregateReport {
  int n_pacs = 0;
  int n_accepted = 0;
  double ar_at_p = 0.0;
  // Unweighted mean of recall_at_p over accepted PACs; absent when none
  // accepted. The n_gold-weighted mean is an auxiliary diagnostic.
  std::optional<double> recall_at_p;
  std::optional<double> recall_at_p_weighted;
  std::map<std::string, AttributeBucket> by_attribute;
};

// Order-invariant fold over per-PAC reports. Empty input is an error.
AggregateReport aggregate(const std::vector<PacReport>& reports);

struct ApplicabilityReport {
  std::optional<double> overall;
  std::optional<double> high_bucket;  // PACs with gold applicability rate > cut
  std::optional<double> low_bucket;   // the rest
  int n_high_pacs = 0;
  int n_low_pacs = 0;
};

// Binary applicable-vs-NA decision accuracy: a prediction or gold counts as
// "applicable" when its kind is Values or NO, as "not applicable" when NA.
// Records are bucketed by their PAC's gold applicability rate at bucket_cut.
ApplicabilityReport applicability_accuracy(const std::vector<EvalRecord>& records,
                                           double bucket_cut = 0.90);

// CSV with fixed columns: pac, accepted, threshold, recall_at_p, support,
// n_gold. Absent optionals are empty cells.
std::string pac_reports_csv(const std::vector<PacReport>& reports);
void write_pac_reports_csv(const std::filesystem::path& path,
                           const std::vector<PacReport>& reports);

nlohmann::json pac_report_to_json(const PacReport& report);
nlohmann::json aggregate_to_json(const AggregateReport& report);
nlohmann::json applicability_to_json(const ApplicabilityReport& report);

}  // namespace attrgen::evalkit
