#include "attrgen/textproc.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "attrgen/common.hpp"

namespace attrgen {

std::string normalize_value(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool in_space = true;  // leading blanks dropped
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!in_space) out.push_back(' ');
      in_space = true;
    } else {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

ValueSet ValueSet::of(std::vector<std::string> vals) {
  ValueSet vs;
  vs.kind = ValueKind::Values;
  for (auto& v : vals) {
    std::string n = normalize_value(v);
    if (!n.empty()) vs.values.push_back(std::move(n));
  }
  std::sort(vs.values.begin(), vs.values.end());
  vs.values.erase(std::unique(vs.values.begin(), vs.values.end()), vs.values.end());
  if (vs.values.empty()) {
    throw ValidationError("ValueSet.of: no non-empty values supplied");
  }
  return vs;
}

bool ValueSet::is_canonical() const {
  if (kind != ValueKind::Values) return values.empty();
  if (values.empty()) return false;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] != normalize_value(values[i]) || values[i].empty()) return false;
    if (i > 0 && !(values[i - 1] < values[i])) return false;
  }
  return true;
}

std::string ValueSet::to_display() const {
  if (kind == ValueKind::NA) return "[NA]";
  if (kind == ValueKind::NO) return "[NO]";
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ", ";
    out += values[i];
  }
  return out;
}

namespace textproc {

namespace {

bool word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' ||
         c == '[' || c == ']';
}

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> kReserved = {
      "[PAD]", "[BOS]", "[EOS]", "[UNK]", "[NA]", "[NO]", "[VSEP]",
      "[ATTR]", "[PT]", "[MP]", "[TITLE]", "[BULLETS]", "[DESC]", "[IMG]"};
  return kReserved;
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (word_char(c)) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else {
      flush();
      tokens.push_back(std::string(1, c));
    }
  }
  flush();
  return tokens;
}

Vocabulary::Vocabulary() {
  for (const auto& t : reserved_tokens()) {
    token_to_id_.emplace(t, static_cast<int>(id_to_token_.size()));
    id_to_token_.push_back(t);
  }
}

int Vocabulary::intern(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  int id = static_cast<int>(id_to_token_.size());
  token_to_id_.emplace(token, id);
  id_to_token_.push_back(token);
  return id;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, std::size_t min_count) {
  std::unordered_map<std::string, std::size_t> counts;
  std::vector<std::string> order;  // first-appearance order
  for (const auto& doc : corpus) {
    for (auto& tok : tokenize(doc)) {
      auto [it, inserted] = counts.emplace(tok, 0);
      if (inserted) order.push_back(tok);
      ++it->second;
    }
  }
  Vocabulary v;
  for (const auto& tok : order) {
    if (counts[tok] >= min_count && !v.contains(tok)) v.intern(tok);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& token) const {
  return token_to_id_.count(token) > 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw ValidationError("token id out of range: " + std::to_string(id));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::string out;
  for (const auto& t : id_to_token_) {
    out += t;
    out += '\n';
  }
  write_text_file(path, out);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary: " + path.string());
  Vocabulary v;
  std::string line;
  int idx = 0;
  const auto& reserved = reserved_tokens();
  while (std::getline(in, line)) {
    if (idx < static_cast<int>(reserved.size())) {
      if (line != reserved[static_cast<std::size_t>(idx)]) {
        throw IoError("vocabulary file corrupt: reserved token mismatch at line " +
                      std::to_string(idx));
      }
    } else {
      v.intern(line);
    }
    ++idx;
  }
  return v;
}

namespace {

void append_tokens(std::vector<int>& out, const Vocabulary& vocab,
                   const std::vector<std::string>& words) {
  for (const auto& w : words) out.push_back(vocab.id(w));
}

}  // namespace

std::vector<int> serialize_input(const Vocabulary& vocab, const std::string& attribute,
                                 const Product& product, int max_input_len) {
  auto attr_toks = tokenize(attribute);
  auto pt_toks = tokenize(product.pt);
  auto mp_toks = tokenize(product.country);
  auto title_toks = tokenize(product.title);
  auto bullet_toks = tokenize(product.bullets);
  auto desc_toks = tokenize(product.description);

  constexpr int kSentinels = 8;  // BOS ATTR PT MP TITLE BULLETS DESC EOS
  const std::size_t fixed = static_cast<std::size_t>(kSentinels) + attr_toks.size() +
                            pt_toks.size() + mp_toks.size();
  std::size_t budget = static_cast<std::size_t>(max_input_len) > fixed
                           ? static_cast<std::size_t>(max_input_len) - fixed
                           : 0;
  // Truncation priority: drop description first, then bullets, then title.
  auto take = [&](std::vector<std::string>& v, std::size_t keep) {
    if (v.size() > keep) v.resize(keep);
  };
  std::size_t keep_title = std::min(title_toks.size(), budget);
  std::size_t keep_bullets = std::min(bullet_toks.size(), budget - keep_title);
  std::size_t keep_desc = std::min(desc_toks.size(), budget - keep_title - keep_bullets);
  take(title_toks, keep_title);
  take(bullet_toks, keep_bullets);
  take(desc_toks, keep_desc);

  std::vector<int> out;
  out.reserve(fixed + keep_title + keep_bullets + keep_desc);
  out.push_back(kBos);
  out.push_back(kAttr);
  append_tokens(out, vocab, attr_toks);
  out.push_back(kPt);
  append_tokens(out, vocab, pt_toks);
  out.push_back(kMp);
  append_tokens(out, vocab, mp_toks);
  out.push_back(kTitle);
  append_tokens(out, vocab, title_toks);
  out.push_back(kBullets);
  append_tokens(out, vocab, bullet_toks);
  out.push_back(kDesc);
  append_tokens(out, vocab, desc_toks);
  out.push_back(kEos);
  return out;
}

std::vector<int> serialize_output(const Vocabulary& vocab, const ValueSet& vs) {
  if (!vs.is_canonical()) {
    throw ValidationError("serialize_output: ValueSet is not canonical");
  }
  std::vector<int> out;
  out.push_back(kBos);
  if (vs.kind == ValueKind::NA) {
    out.push_back(kNa);
  } else if (vs.kind == ValueKind::NO) {
    out.push_back(kNo);
  } else {
    for (std::size_t i = 0; i < vs.values.size(); ++i) {
      if (i) out.push_back(kVsep);
      append_tokens(out, vocab, tokenize(vs.values[i]));
    }
  }
  out.push_back(kEos);
  return out;
}

ValueSet parse_output(const Vocabulary& vocab, std::span<const int> tokens) {
  std::vector<std::string> values;
  std::string segment;
  auto flush_segment = [&] {
    std::string n = normalize_value(segment);
    if (!n.empty()) values.push_back(std::move(n));
    segment.clear();
  };
  for (int id : tokens) {
    if (id == kBos || id == kEos || id == kPad) {
      if (id == kEos) break;
      continue;
    }
    if (id == kNa || id == kNo) {
      // A negative atom as the first piece of content decides the output.
      if (values.empty() && normalize_value(segment).empty()) {
        return id == kNa ? ValueSet::na() : ValueSet::no();
      }
      continue;  // stray atom amid values: ignore
    }
    if (id == kVsep) {
      flush_segment();
      continue;
    }
    if (id < 0 || id >= vocab.size()) continue;
    if (!segment.empty()) segment.push_back(' ');
    segment += vocab.token(id);
  }
  flush_segment();
  if (values.empty()) return ValueSet::no();
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  ValueSet vs;
  vs.kind = ValueKind::Values;
  vs.values = std::move(values);
  return vs;
}

}  // namespace textproc
}  // namespace attrgen
