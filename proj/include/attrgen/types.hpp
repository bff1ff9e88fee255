#pragma once

#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace attrgen {

// One scope at which models are evaluated and accepted: product type,
// attribute, country.
struct PacScope {
  std::string pt;
  std::string attribute;
  std::string country;

  std::string key() const { return pt + "|" + attribute + "|" + country; }

  friend bool operator==(const PacScope& a, const PacScope& b) = default;
  friend auto operator<=>(const PacScope& a, const PacScope& b) = default;
};

struct Product {
  std::string id;
  std::string pt;
  std::string country;
  std::string title;
  std::string bullets;
  std::string description;
  std::optional<std::vector<double>> embedding;
};

enum class Split { Train, Eval, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Eval: return "eval";
    default: return "test";
  }
}

}  // namespace attrgen
