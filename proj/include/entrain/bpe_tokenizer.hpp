#ifndef ENTRAIN_BPE_TOKENIZER_HPP_
#define ENTRAIN_BPE_TOKENIZER_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "entrain/error.hpp"
#include "entrain/tokenizer.hpp"

namespace entrain {

/// GPT-2 byte-level BPE (encoder.json + vocab.bpe / vocab.json + merges.txt).
///
/// The pre-tokenizer reproduces GPT-2's split pattern
///   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
/// exactly for ASCII. Non-ASCII code points are classified with a small table
/// (Latin-1 / general punctuation blocks count as symbols, everything else as a
/// letter), which covers accented Latin text.
class Gpt2BpeTokenizer final : public Tokenizer {
 public:
  Gpt2BpeTokenizer(const std::filesystem::path& encoder_json, const std::filesystem::path& merges_file) {
    std::ifstream enc(encoder_json);
    if (!enc) fail(ErrorCode::ModelLoad, "cannot open " + encoder_json.string());
    nlohmann::json j;
    enc >> j;
    id_to_piece_.resize(j.size());
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto id = it.value().get<TokenId>();
      if (id < 0) fail(ErrorCode::ModelLoad, "negative token id in encoder");
      if (static_cast<std::size_t>(id) >= id_to_piece_.size()) id_to_piece_.resize(id + 1);
      id_to_piece_[id] = it.key();
      piece_to_id_.emplace(it.key(), id);
    }

    std::ifstream merges(merges_file);
    if (!merges) fail(ErrorCode::ModelLoad, "cannot open " + merges_file.string());
    std::string line;
    int rank = 0;
    while (std::getline(merges, line)) {
      if (line.empty() || line.starts_with("#version")) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos) continue;
      ranks_.emplace(line.substr(0, sp) + '\x01' + line.substr(sp + 1), rank++);
    }

    int n = 0;
    for (int b = 0; b < 256; ++b) {
      const bool printable = (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF);
      const std::uint32_t cp = printable ? static_cast<std::uint32_t>(b) : static_cast<std::uint32_t>(256 + n++);
      byte_to_unicode_[b] = utf8(cp);
      unicode_to_byte_.emplace(byte_to_unicode_[b], static_cast<unsigned char>(b));
    }
  }

  /// Loads from a directory holding either encoder.json/vocab.bpe or the
  /// HuggingFace vocab.json/merges.txt pair.
  static std::shared_ptr<Gpt2BpeTokenizer> from_directory(const std::filesystem::path& dir) {
    if (std::filesystem::exists(dir / "vocab.json") && std::filesystem::exists(dir / "merges.txt")) {
      return std::make_shared<Gpt2BpeTokenizer>(dir / "vocab.json", dir / "merges.txt");
    }
    return std::make_shared<Gpt2BpeTokenizer>(dir / "encoder.json", dir / "vocab.bpe");
  }

  std::vector<Token> tokenize(std::string_view text) const override {
    std::vector<Token> out;
    for (const auto& word : pretokenize(text)) {
      std::string mapped;
      for (unsigned char b : word) mapped += byte_to_unicode_[b];
      for (const auto& piece : bpe(mapped)) {
        auto it = piece_to_id_.find(piece);
        if (it == piece_to_id_.end()) fail(ErrorCode::TokenOutOfVocab, "BPE piece not in vocabulary");
        out.push_back({it->second, decode_piece(piece)});
      }
    }
    return out;
  }

  std::string decode(TokenId id) const override {
    require(id >= 0 && static_cast<std::size_t>(id) < id_to_piece_.size(), ErrorCode::TokenOutOfVocab,
            "token id " + std::to_string(id));
    return decode_piece(id_to_piece_[static_cast<std::size_t>(id)]);
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string s;
    for (auto id : ids) s += decode(id);
    return s;
  }

  std::size_t vocab_size() const override { return id_to_piece_.size(); }
  bool space_sensitive() const override { return true; }

  /// Splits text the way GPT-2's regex does (see class comment).
  static std::vector<std::string> pretokenize(std::string_view text) {
    std::vector<CodePoint> cps = decode_utf8(text);
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = cps.size();
    auto emit = [&](std::size_t from, std::size_t to) {
      out.emplace_back(text.substr(cps[from].offset, (to < n ? cps[to].offset : text.size()) - cps[from].offset));
    };
    while (i < n) {
      if (cps[i].cp == '\'') {
        static constexpr std::array<std::string_view, 7> kSuffixes = {"s", "t", "re", "ve", "m", "ll", "d"};
        std::size_t matched = 0;
        for (auto suf : kSuffixes) {
          if (i + suf.size() >= n) continue;
          bool ok = true;
          for (std::size_t k = 0; k < suf.size(); ++k) {
            ok = ok && cps[i + 1 + k].cp == static_cast<std::uint32_t>(suf[k]);
          }
          if (ok) {
            matched = 1 + suf.size();
            break;
          }
        }
        if (matched > 0) {
          emit(i, i + matched);
          i += matched;
          continue;
        }
      }
      bool matched = false;
      for (Class cls : {Class::Letter, Class::Number, Class::Other}) {
        std::size_t body = i;
        if (cps[i].cp == ' ' && i + 1 < n && classify(cps[i + 1].cp) == cls) body = i + 1;
        if (classify(cps[body].cp) != cls) continue;
        std::size_t j = body;
        while (j < n && classify(cps[j].cp) == cls) ++j;
        emit(i, j);
        i = j;
        matched = true;
        break;
      }
      if (matched) continue;
      // \s+(?!\S) then \s+
      std::size_t j = i;
      while (j < n && is_space(cps[j].cp)) ++j;
      if (j == n || j - i == 1) {
        emit(i, j);
        i = j;
      } else {
        emit(i, j - 1);
        i = j - 1;
      }
    }
    return out;
  }

 private:
  enum class Class { Letter, Number, Space, Other };
  struct CodePoint {
    std::uint32_t cp;
    std::size_t offset;
  };

  static bool is_space(std::uint32_t cp) {
    return cp == ' ' || (cp >= '\t' && cp <= '\r') || cp == 0x85 || cp == 0xA0 || cp == 0x1680 ||
           (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 || cp == 0x202F || cp == 0x205F ||
           cp == 0x3000;
  }

  static Class classify(std::uint32_t cp) {
    if (is_space(cp)) return Class::Space;
    if (cp < 0x80) {
      if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return Class::Letter;
      if (cp >= '0' && cp <= '9') return Class::Number;
      return Class::Other;
    }
    if (cp == 0xAA || cp == 0xB5 || cp == 0xBA) return Class::Letter;
    if (cp == 0xB2 || cp == 0xB3 || cp == 0xB9 || (cp >= 0xBC && cp <= 0xBE)) return Class::Number;
    if (cp < 0xC0 || cp == 0xD7 || cp == 0xF7) return Class::Other;
    if ((cp >= 0x2010 && cp <= 0x206F) || (cp >= 0x20A0 && cp <= 0x20CF) || (cp >= 0x2100 && cp <= 0x2BFF) ||
        (cp >= 0x3000 && cp <= 0x303F) || (cp >= 0x1F000 && cp <= 0x1FAFF)) {
      return Class::Other;
    }
    return Class::Letter;
  }

  static std::vector<CodePoint> decode_utf8(std::string_view s) {
    std::vector<CodePoint> out;
    std::size_t i = 0;
    while (i < s.size()) {
      const auto c = static_cast<unsigned char>(s[i]);
      std::size_t len = 1;
      std::uint32_t cp = c;
      const std::size_t remaining = s.size() - i;
      if (c >= 0xF0 && remaining >= 4) {
        len = 4;
        cp = c & 0x07;
      } else if (c >= 0xE0 && remaining >= 3) {
        len = 3;
        cp = c & 0x0F;
      } else if (c >= 0xC0 && remaining >= 2) {
        len = 2;
        cp = c & 0x1F;
      }
      for (std::size_t k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
      out.push_back({cp, i});
      i += len;
    }
    return out;
  }

  static std::string utf8(std::uint32_t cp) {
    std::string s;
    if (cp < 0x80) {
      s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return s;
  }

  std::string decode_piece(const std::string& piece) const {
    std::string bytes;
    std::size_t i = 0;
    while (i < piece.size()) {
      const auto c = static_cast<unsigned char>(piece[i]);
      const std::size_t len = c < 0x80 ? 1 : (c < 0xE0 ? 2 : (c < 0xF0 ? 3 : 4));
      auto it = unicode_to_byte_.find(piece.substr(i, len));
      if (it != unicode_to_byte_.end()) bytes.push_back(static_cast<char>(it->second));
      i += len;
    }
    return bytes;
  }

  std::vector<std::string> bpe(const std::string& mapped) const {
    {
      std::lock_guard lock(cache_mutex_);
      auto it = cache_.find(mapped);
      if (it != cache_.end()) return it->second;
    }
    std::vector<std::string> symbols;
    for (std::size_t i = 0; i < mapped.size();) {
      const auto c = static_cast<unsigned char>(mapped[i]);
      const std::size_t len = c < 0x80 ? 1 : (c < 0xE0 ? 2 : (c < 0xF0 ? 3 : 4));
      symbols.push_back(mapped.substr(i, len));
      i += len;
    }
    while (symbols.size() > 1) {
      int best_rank = std::numeric_limits<int>::max();
      std::size_t best = 0;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = ranks_.find(symbols[i] + '\x01' + symbols[i + 1]);
        if (it != ranks_.end() && it->second < best_rank) {
          best_rank = it->second;
          best = i;
        }
      }
      if (best_rank == std::numeric_limits<int>::max()) break;
      const std::string first = symbols[best];
      const std::string second = symbols[best + 1];
      std::vector<std::string> merged;
      for (std::size_t i = 0; i < symbols.size();) {
        if (i + 1 < symbols.size() && symbols[i] == first && symbols[i + 1] == second) {
          merged.push_back(first + second);
          i += 2;
        } else {
          merged.push_back(symbols[i]);
          ++i;
        }
      }
      symbols = std::move(merged);
    }
    std::lock_guard lock(cache_mutex_);
    cache_.emplace(mapped, symbols);
    return symbols;
  }

  std::vector<std::string> id_to_piece_;
  std::unordered_map<std::string, TokenId> piece_to_id_;
  std::unordered_map<std::string, int> ranks_;
  std::array<std::string, 256> byte_to_unicode_;
  std::unordered_map<std::string, unsigned char> unicode_to_byte_;
  mutable std::mutex cache_mutex_;
  mutable std::unordered_map<std::string, std::vector<std::string>> cache_;
};

}  // namespace entrain

#endif  // ENTRAIN_BPE_TOKENIZER_HPP_
