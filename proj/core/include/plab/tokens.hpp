#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace plab {

// Symbols 0-9a-z occupy token ids 0..35; two control tokens follow.
inline constexpr std::string_view kAlphabet = "0123456789abcdefghijklmnopqrstuvwxyz";
inline constexpr int kAlphabetSize = 36;
inline constexpr int kBos = 36;
inline constexpr int kSep = 37;
inline constexpr int kVocabSize = 38;

inline int symbol_to_token(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'z') return 10 + (c - 'a');
  throw std::invalid_argument(std::string("symbol outside alphabet: '") + c + "'");
}

inline char token_to_symbol(int t) {
  if (t < 0 || t >= kAlphabetSize) throw std::invalid_argument("token is not a symbol");
  return kAlphabet[static_cast<std::size_t>(t)];
}

// A rectangular batch of token sequences. loss_mask[n*seq_len + t] marks
// position t of sequence n as a target; the prediction for it is read from
// the logits at position t-1.
struct TokenBatch {
  int n = 0;
  int seq_len = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> loss_mask;

  std::int32_t token(int seq, int pos) const { return tokens[static_cast<std::size_t>(seq * seq_len + pos)]; }
  bool is_target(int seq, int pos) const { return loss_mask[static_cast<std::size_t>(seq * seq_len + pos)] != 0; }
};

}  // namespace plab
