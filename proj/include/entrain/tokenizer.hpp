#ifndef ENTRAIN_TOKENIZER_HPP_
#define ENTRAIN_TOKENIZER_HPP_

#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "entrain/error.hpp"

namespace entrain {

using TokenId = std::int32_t;

struct Token {
  TokenId id;
  std::string piece;  // decoded surface of this token
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  virtual std::vector<Token> tokenize(std::string_view text) const = 0;
  virtual std::string decode(TokenId id) const = 0;
  virtual std::size_t vocab_size() const = 0;
  /// True when a leading space changes the tokenization (byte-level BPE).
  virtual bool space_sensitive() const = 0;
  /// Id that out-of-vocabulary input collapses to, if the tokenizer has one.
  virtual std::optional<TokenId> unknown_id() const { return std::nullopt; }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (auto& t : tokenize(text)) ids.push_back(t.id);
    return ids;
  }
};

/// Word-level tokenizer with a closed vocabulary: letter runs, single digits
/// and single punctuation characters are tokens, whitespace is dropped.
/// Unknown words map to <unk>. Used by the reference model.
class WordTokenizer final : public Tokenizer {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kBos = 1;

  /// `words` must not contain the two specials; duplicates are ignored.
  explicit WordTokenizer(const std::vector<std::string>& words) {
    add("<unk>");
    add("<bos>");
    for (const auto& w : words) add(w);
  }

  static std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    };
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (std::isalpha(c) || c >= 0x80) {
        cur.push_back(ch);
      } else if (std::isdigit(c)) {
        flush();
        out.emplace_back(1, ch);
      } else {
        flush();
        if (!std::isspace(c)) out.emplace_back(1, ch);
      }
    }
    flush();
    return out;
  }

  std::vector<Token> tokenize(std::string_view text) const override {
    std::vector<Token> out;
    for (auto& w : split_words(text)) {
      auto it = index_.find(w);
      out.push_back({it == index_.end() ? kUnk : it->second, std::move(w)});
    }
    return out;
  }

  std::string decode(TokenId id) const override {
    require(id >= 0 && static_cast<std::size_t>(id) < words_.size(), ErrorCode::TokenOutOfVocab,
            "token id " + std::to_string(id));
    return words_[static_cast<std::size_t>(id)];
  }

  std::size_t vocab_size() const override { return words_.size(); }
  bool space_sensitive() const override { return false; }
  std::optional<TokenId> unknown_id() const override { return kUnk; }

  const std::vector<std::string>& words() const { return words_; }

 private:
  void add(const std::string& w) {
    if (index_.contains(w)) return;
    index_.emplace(w, static_cast<TokenId>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace entrain

#endif  // ENTRAIN_TOKENIZER_HPP_
