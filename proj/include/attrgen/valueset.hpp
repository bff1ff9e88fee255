#pragma once

#include <string>
#include <vector>

namespace attrgen {

enum class ValueKind { Values, NA, NO };

// Case-fold, collapse internal whitespace, trim.
std::string normalize_value(const std::string& s);

// The prediction/label domain: a canonical set of normalized value strings,
// or one of the special atoms NA (not applicable) / NO (not obtainable).
// Canonical form: values deduplicated and lexicographically sorted; the
// atoms carry no values.
struct ValueSet {
  ValueKind kind = ValueKind::NO;
  std::vector<std::string> values;

  static ValueSet na() { return {ValueKind::NA, {}}; }
  static ValueSet no() { return {ValueKind::NO, {}}; }
  // Normalizes, dedups and sorts. Empty input is invalid for kind Values.
  static ValueSet of(std::vector<std::string> vals);
  static ValueSet single(const std::string& v) { return of({v}); }

  bool is_values() const { return kind == ValueKind::Values; }
  bool is_canonical() const;

  std::string to_display() const;  // "[NA]", "[NO]" or "red, blue"

  friend bool operator==(const ValueSet& a, const ValueSet& b) = default;
};

inline const char* value_kind_name(ValueKind k) {
  switch (k) {
    case ValueKind::Values: return "values";
    case ValueKind::NA: return "na";
    default: return "no";
  }
}

}  // namespace attrgen
