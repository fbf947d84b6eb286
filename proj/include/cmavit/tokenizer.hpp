#pragma once

// Deterministic hash tokenizer. Text is lowercased and split on
// whitespace/punctuation; runs of digits are emitted one digit at a
// time. Each token maps to 2 + (fnv1a64(token) mod (vocab - 2)), with
// id 0 reserved for PAD and id 1 for BOS. Constants in docs/tokenizer.md.

#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cmavit {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kBosId = 1;
inline constexpr std::size_t kDefaultVocabSize = 4096;

struct TokenIds {
  std::vector<std::size_t> ids;  // length == max_len, BOS first, PAD tail
  std::size_t max_len = 0;
  std::size_t n_real = 0;  // count of non-pad positions, including BOS
};

namespace detail {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

inline TokenIds tokenize(std::string_view text, std::size_t max_len = 128,
                         std::size_t vocab_size = kDefaultVocabSize) {
  TokenIds out;
  out.max_len = max_len;
  out.ids.assign(max_len, kPadId);
  out.ids[0] = kBosId;
  out.n_real = 1;

  auto push = [&](std::string_view tok) {
    if (out.n_real >= max_len) return;  // truncate
    out.ids[out.n_real++] = 2 + detail::fnv1a64(tok) % (vocab_size - 2);
  };

  std::string word;
  auto flush = [&] {
    if (!word.empty()) push(word);
    word.clear();
  };
  for (const char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isalpha(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isdigit(c)) {
      // digits tokenize individually so numbers share structure
      flush();
      const char digit[2] = {static_cast<char>(c), '\0'};
      push(digit);
    } else {
      flush();  // whitespace and punctuation both split
    }
  }
  flush();
  return out;
}

// key-keep mask for attention: true where a real token sits
inline std::vector<char> token_keep_mask(const TokenIds& t) {
  std::vector<char> keep(t.max_len, 0);
  for (std::size_t i = 0; i < t.n_real; ++i) keep[i] = 1;
  return keep;
}

}  // namespace cmavit
