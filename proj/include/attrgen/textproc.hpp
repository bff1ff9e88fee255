#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "attrgen/types.hpp"
#include "attrgen/valueset.hpp"

namespace attrgen::textproc {

// Lowercases and splits on whitespace; punctuation other than '_', '-' and
// '[' ']' (which delimit special tokens) becomes standalone tokens.
std::vector<std::string> tokenize(const std::string& text);

// Token ids. Reserved tokens occupy the lowest ids in this fixed order.
enum ReservedId : int {
  kPad = 0,
  kBos = 1,
  kEos = 2,
  kUnk = 3,
  kNa = 4,
  kNo = 5,
  kVsep = 6,
  kAttr = 7,
  kPt = 8,
  kMp = 9,
  kTitle = 10,
  kBullets = 11,
  kDesc = 12,
  kImg = 13,
  kNumReserved = 14,
};

class Vocabulary {
public:
  Vocabulary();  // reserved tokens only

  // Whitespace/punctuation tokenization over the corpus; tokens seen fewer
  // than min_count times are not assigned ids (they map to [UNK]).
  // Id assignment follows first appearance in corpus order.
  static Vocabulary build(const std::vector<std::string>& corpus, std::size_t min_count);

  int id(const std::string& token) const;  // [UNK] id when missing
  bool contains(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(id_to_token_.size()); }

  // One token per line, line number = id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  // Adds a token if absent, returns its id. Used by builders only.
  int intern(const std::string& token);

private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

// Fixed input layout:
//   [BOS] [ATTR] a* [PT] p* [MP] m* [TITLE] t* [BULLETS] b* [DESC] d* [EOS]
// When over max_input_len, tokens are dropped from the right of the
// description first, then bullets, then title.
std::vector<int> serialize_input(const Vocabulary& vocab, const std::string& attribute,
                                 const Product& product, int max_input_len);

// Values -> [BOS] v1* [VSEP] v2* ... [EOS] in canonical (sorted) order;
// NA -> [BOS] [NA] [EOS]; NO -> [BOS] [NO] [EOS].
// Throws ValidationError if vs violates ValueSet invariants.
std::vector<int> serialize_output(const Vocabulary& vocab, const ValueSet& vs);

// Total inverse: never throws. Empty segments are dropped; a leading [NA] or
// [NO] wins over any trailing junk; an output with no value tokens parses
// as NO (the model produced nothing usable).
ValueSet parse_output(const Vocabulary& vocab, std::span<const int> tokens);

}  // namespace attrgen::textproc
