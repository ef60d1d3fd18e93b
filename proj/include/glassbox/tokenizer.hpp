#pragma once

#include "glassbox/core.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace glassbox {

struct TokenSequence {
  std::vector<int> token_ids;
  std::string text;

  std::size_t size() const noexcept { return token_ids.size(); }
  bool empty() const noexcept { return token_ids.empty(); }
};

// Word-level tokenizer. A word is a maximal run of ASCII alphanumerics or
// non-ASCII bytes (so UTF-8 words stay whole); every other non-space
// character is a token of its own. Case is preserved.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEos = 2;
  static constexpr std::string_view kPadText = "<pad>";
  static constexpr std::string_view kUnkText = "<unk>";
  static constexpr std::string_view kEosText = "<eos>";

  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

  // `words` excludes the reserved tokens; they are prepended in fixed order.
  explicit Tokenizer(const std::vector<std::string>& words) {
    vocab_ = {std::string(kPadText), std::string(kUnkText), std::string(kEosText)};
    for (const auto& w : words) {
      if (w == kPadText || w == kUnkText || w == kEosText) continue;
      if (index_.count(w) != 0) continue;
      index_.emplace(w, static_cast<int>(vocab_.size()));
      vocab_.push_back(w);
    }
    for (int i = 0; i < 3; ++i) index_.emplace(vocab_[i], i);
  }

  // Vocabulary = reserved tokens + every distinct word of the corpus in
  // lexicographic order, so the id assignment does not depend on line order.
  static Tokenizer from_corpus(const std::vector<std::string>& lines) {
    std::set<std::string> words;
    for (const auto& line : lines)
      for (auto& w : split(line)) words.insert(std::move(w));
    return Tokenizer(std::vector<std::string>(words.begin(), words.end()));
  }

  static std::vector<std::string> split(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    };
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (std::isspace(c)) {
        flush();
      } else if (std::isalnum(c) || c >= 0x80) {
        cur.push_back(ch);
      } else {
        flush();
        out.emplace_back(1, ch);
      }
    }
    flush();
    return out;
  }

  TokenSequence tokenize(std::string_view text) const {
    require(!trim(text).empty(), errc::kEmptyInput, "tokenize: empty input");
    TokenSequence seq;
    seq.text = std::string(text);
    for (const auto& w : split(text)) {
      auto it = index_.find(w);
      seq.token_ids.push_back(it == index_.end() ? kUnk : it->second);
    }
    return seq;
  }

  std::string detokenize(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (!out.empty()) out.push_back(' ');
      out += token_text(id);
    }
    return out;
  }

  TokenSequence from_ids(std::vector<int> ids) const {
    for (int id : ids) check_id(id);
    TokenSequence seq;
    seq.text = detokenize(ids);
    seq.token_ids = std::move(ids);
    return seq;
  }

  const std::string& token_text(int id) const {
    check_id(id);
    return vocab_[static_cast<std::size_t>(id)];
  }

  int id_of(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& word) const { return index_.count(word) != 0; }

  int vocab_size() const noexcept { return static_cast<int>(vocab_.size()); }
  const std::vector<std::string>& vocab() const noexcept { return vocab_; }

  std::string vocab_hash() const { return sha256_hex(join_lines(vocab_)); }

 private:
  void check_id(int id) const {
    require(id >= 0 && id < vocab_size(), errc::kOutOfRange,
            "token id " + std::to_string(id) + " outside vocabulary of size " +
                std::to_string(vocab_size()));
  }

  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace glassbox
