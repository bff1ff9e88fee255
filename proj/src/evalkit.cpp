#include "attrgen/evalkit.hpp"

#include <algorithm>
#include <sstream>

#include "attrgen/common.hpp"

namespace attrgen::evalkit {

using nlohmann::json;

bool match(const ValueSet& predicted, const ValueSet& gold) {
  if (predicted.kind != gold.kind) return false;
  if (predicted.kind != ValueKind::Values) return true;
  if (predicted.values.size() != gold.values.size()) return false;
  auto canon = [](const std::vector<std::string>& vals) {
    std::vector<std::string> out;
    out.reserve(vals.size());
    for (const auto& v : vals) out.push_back(normalize_value(v));
    std::sort(out.begin(), out.end());
    return out;
  };
  return canon(predicted.values) == canon(gold.values);
}

std::optional<ThresholdResult> threshold_search(const std::vector<EvalRecord>& records,
                                                double precision_target, int min_support) {
  if (min_support < 1) throw ValidationError("min_support must be >= 1");
  int n_gold = 0;
  // (confidence, matched) for the backfill candidates only. Abstentions
  // (NA/NO predictions) stay out of the precision denominator.
  std::vector<std::pair<double, bool>> candidates;
  for (const auto& r : records) {
    if (r.gold.kind == ValueKind::Values) ++n_gold;
    if (r.predicted.kind == ValueKind::Values) {
      candidates.emplace_back(r.confidence, match(r.predicted, r.gold));
    }
  }
  if (candidates.empty()) return std::nullopt;

  // Descending by confidence: prefix i covers every candidate >= that
  // confidence, so each distinct confidence is one candidate threshold.
  std::sort(candidates.begin(), candidates.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int> match_prefix(candidates.size() + 1, 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    match_prefix[i + 1] = match_prefix[i] + (candidates[i].second ? 1 : 0);
  }

  // Smallest qualifying threshold = largest qualifying accepted set, so scan
  // candidate thresholds from the smallest confidence upward.
  for (std::size_t end = candidates.size(); end >= 1; --end) {
    // Ties share one threshold; only prefixes that include a full tie group
    // correspond to a real threshold value.
    if (end < candidates.size() && candidates[end].first == candidates[end - 1].first) continue;
    const int support = static_cast<int>(end);
    if (support < min_support) break;
    const int matches = match_prefix[end];
    const double precision = static_cast<double>(matches) / static_cast<double>(support);
    if (precision >= precision_target) {
      ThresholdResult result;
      result.threshold = candidates[end - 1].first;
      result.recall =
          n_gold == 0 ? 0.0 : static_cast<double>(matches) / static_cast<double>(n_gold);
      result.support = support;
      return result;
    }
  }
  return std::nullopt;
}

std::vector<PacReport> evaluate(const std::vector<EvalRecord>& records, double precision_target,
                                int min_support) {
  std::map<std::string, std::vector<EvalRecord>> by_pac;
  for (const auto& r : records) by_pac[r.pac.key()].push_back(r);
  std::vector<PacReport> reports;
  reports.reserve(by_pac.size());
  for (const auto& [key, group] : by_pac) {
    PacReport report;
    report.pac = group.front().pac;
    for (const auto& r : group) {
      if (r.gold.kind == ValueKind::Values) ++report.n_gold;
    }
    if (const auto res = threshold_search(group, precision_target, min_support)) {
      report.accepted = true;
      report.threshold = res->threshold;
      report.recall_at_p = res->recall;
      report.support = res->support;
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

AggregateReport aggregate(const std::vector<PacReport>& reports) {
  if (reports.empty()) throw ValidationError("aggregate needs at least one PAC report");
  // Canonical fold order (pac key) so the result is bit-identical no matter
  // how the per-PAC reports arrive.
  std::vector<PacReport> sorted = reports;
  std::sort(sorted.begin(), sorted.end(),
            [](const PacReport& a, const PacReport& b) { return a.pac.key() < b.pac.key(); });
  AggregateReport agg;
  agg.n_pacs = static_cast<int>(sorted.size());
  double recall_sum = 0.0;
  double weighted_sum = 0.0;
  double weight_total = 0.0;
  std::map<std::string, std::pair<int, std::vector<double>>> buckets;  // attr -> (n, recalls)
  for (const auto& r : sorted) {
    auto& bucket = buckets[r.pac.attribute];
    bucket.first += 1;
    if (r.accepted) {
      agg.n_accepted += 1;
      recall_sum += *r.recall_at_p;
      weighted_sum += *r.recall_at_p * static_cast<double>(r.n_gold);
      weight_total += static_cast<double>(r.n_gold);
      bucket.second.push_back(*r.recall_at_p);
    }
  }
  agg.ar_at_p = static_cast<double>(agg.n_accepted) / static_cast<double>(agg.n_pacs);
  if (agg.n_accepted > 0) {
    agg.recall_at_p = recall_sum / static_cast<double>(agg.n_accepted);
    if (weight_total > 0.0) agg.recall_at_p_weighted = weighted_sum / weight_total;
  }
  for (const auto& [attr, bucket] : buckets) {
    AttributeBucket ab;
    ab.n_pacs = bucket.first;
    ab.n_accepted = static_cast<int>(bucket.second.size());
    ab.ar_at_p = static_cast<double>(ab.n_accepted) / static_cast<double>(ab.n_pacs);
    if (!bucket.second.empty()) {
      double sum = 0.0;
      for (double v : bucket.second) sum += v;
      ab.recall_at_p = sum / static_cast<double>(bucket.second.size());
    }
    agg.by_attribute.emplace(attr, std::move(ab));
  }
  return agg;
}

ApplicabilityReport applicability_accuracy(const std::vector<EvalRecord>& records,
                                           double bucket_cut) {
  auto applicable = [](const ValueSet& vs) { return vs.kind != ValueKind::NA; };
  // Per-PAC gold applicability rate decides the bucket for all its records.
  std::map<std::string, std::pair<int, int>> pac_counts;  // key -> (applicable, total)
  for (const auto& r : records) {
    auto& c = pac_counts[r.pac.key()];
    if (applicable(r.gold)) c.first += 1;
    c.second += 1;
  }
  std::map<std::string, bool> pac_high;
  ApplicabilityReport report;
  for (const auto& [key, c] : pac_counts) {
    const double rate = static_cast<double>(c.first) / static_cast<double>(c.second);
    const bool high = rate > bucket_cut;
    pac_high.emplace(key, high);
    (high ? report.n_high_pacs : report.n_low_pacs) += 1;
  }
  int correct = 0, total = 0, high_correct = 0, high_total = 0, low_correct = 0, low_total = 0;
  for (const auto& r : records) {
    const bool ok = applicable(r.predicted) == applicable(r.gold);
    total += 1;
    correct += ok ? 1 : 0;
    if (pac_high.at(r.pac.key())) {
      high_total += 1;
      high_correct += ok ? 1 : 0;
    } else {
      low_total += 1;
      low_correct += ok ? 1 : 0;
    }
  }
  if (total > 0) report.overall = static_cast<double>(correct) / static_cast<double>(total);
  if (high_total > 0) {
    report.high_bucket = static_cast<double>(high_correct) / static_cast<double>(high_total);
  }
  if (low_total > 0) {
    report.low_bucket = static_cast<double>(low_correct) / static_cast<double>(low_total);
  }
  return report;
}

std::string pac_reports_csv(const std::vector<PacReport>& reports) {
  std::ostringstream out;
  out << "pac,accepted,threshold,recall_at_p,support,n_gold\n";
  for (const auto& r : reports) {
    out << r.pac.key() << ',' << (r.accepted ? "true" : "false") << ','
        << (r.threshold ? format_double(*r.threshold) : "") << ','
        << (r.recall_at_p ? format_double(*r.recall_at_p) : "") << ',' << r.support << ','
        << r.n_gold << '\n';
  }
  return out.str();
}

void write_pac_reports_csv(const std::filesystem::path& path,
                           const std::vector<PacReport>& reports) {
  write_text_file(path, pac_reports_csv(reports));
}

json pac_report_to_json(const PacReport& report) {
  json j;
  j["pac"] = report.pac.key();
  j["accepted"] = report.accepted;
  j["threshold"] = report.threshold ? json(*report.threshold) : json(nullptr);
  j["recall_at_p"] = report.recall_at_p ? json(*report.recall_at_p) : json(nullptr);
  j["support"] = report.support;
  j["n_gold"] = report.n_gold;
  return j;
}

json aggregate_to_json(const AggregateReport& report) {
  json j;
  j["n_pacs"] = report.n_pacs;
  j["n_accepted"] = report.n_accepted;
  j["ar_at_p"] = report.ar_at_p;
  j["recall_at_p"] = report.recall_at_p ? json(*report.recall_at_p) : json(nullptr);
  j["recall_at_p_weighted"] =
      report.recall_at_p_weighted ? json(*report.recall_at_p_weighted) : json(nullptr);
  json buckets = json::object();
  for (const auto& [attr, b] : report.by_attribute) {
    json bj;
    bj["n_pacs"] = b.n_pacs;
    bj["n_accepted"] = b.n_accepted;
    bj["ar_at_p"] = b.ar_at_p;
    bj["recall_at_p"] = b.recall_at_p ? json(*b.recall_at_p) : json(nullptr);
    buckets[attr] = std::move(bj);
  }
  j["by_attribute"] = std::move(buckets);
  return j;
}

json applicability_to_json(const ApplicabilityReport& report) {
  json j;
  j["overall"] = report.overall ? json(*report.overall) : json(nullptr);
  j["high_bucket"] = report.high_bucket ? json(*report.high_bucket) : json(nullptr);
  j["low_bucket"] = report.low_bucket ? json(*report.low_bucket) : json(nullptr);
  j["n_high_pacs"] = report.n_high_pacs;
  j["n_low_pacs"] = report.n_low_pacs;
  return j;
}

}  // namespace attrgen::evalkit
