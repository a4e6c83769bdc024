#include "viral_lab/vocab.hpp"

#include "viral_lab/error.hpp"

#include <sstream>

namespace viral {

std::string_view to_string(ShapeKind s) { return kVocabulary[shape_token(s)]; }
std::string_view to_string(Color c) { return kVocabulary[color_token(c)]; }

std::size_t token_id(std::string_view word) {
  for (std::size_t i = 0; i < kVocabulary.size(); ++i)
    if (kVocabulary[i] == word) return i;
  throw FormatError("unknown word '" + std::string(word) + "'");
}

std::string_view token_word(std::size_t id) {
  if (id >= kVocabSize) throw FormatError("token id " + std::to_string(id) + " out of range");
  return kVocabulary[id];
}

std::size_t shape_token(ShapeKind s) { return token_id("circle") + static_cast<std::size_t>(s); }
std::size_t color_token(Color c) { return token_id("red") + static_cast<std::size_t>(c); }

std::size_t digit_token(std::size_t n) {
  if (n > 8) throw FormatError("no digit token for " + std::to_string(n));
  return token_id("0") + n;
}

std::vector<std::size_t> tokenize(std::string_view text) {
  std::vector<std::size_t> ids;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) ids.push_back(token_id(w));
  return ids;
}

std::string detokenize(std::span<const std::size_t> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token_word(ids[i]);
  }
  return out;
}

}  // namespace viral
