#include "attrgen/jsonio.hpp"

#include <fstream>

#include "attrgen/common.hpp"

namespace attrgen {

nlohmann::json value_set_to_json(const ValueSet& vs) {
  if (vs.kind == ValueKind::NA) return "[NA]";
  if (vs.kind == ValueKind::NO) return "[NO]";
  return nlohmann::json(vs.values);
}

ValueSet value_set_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "[NA]") return ValueSet::na();
    if (s == "[NO]") return ValueSet::no();
    throw IoError("value set string must be \"[NA]\" or \"[NO]\", got: " + s);
  }
  if (!j.is_array()) throw IoError("value set must be an array or a negative marker");
  std::vector<std::string> vals;
  for (const auto& e : j) vals.push_back(e.get<std::string>());
  return ValueSet::of(std::move(vals));
}

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& row : rows) out << row.dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(nlohmann::json::parse(line));
  }
  return rows;
}

}  // namespace attrgen
