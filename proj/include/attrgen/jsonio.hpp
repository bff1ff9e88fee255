#pragma once

// JSON conventions shared by dataset, prediction, and report files:
// a ValueSet is an array of strings when concrete and the literal strings
// "[NA]" / "[NO]" otherwise; absent optionals are null.  Line-delimited JSON
// files carry one object per line with no trailing blank line requirements.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "attrgen/valueset.hpp"

namespace attrgen {

nlohmann::json value_set_to_json(const ValueSet& vs);
ValueSet value_set_from_json(const nlohmann::json& j);

// Serializes each object with nlohmann's default (sorted-key) formatting.
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows);
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

}  // namespace attrgen
