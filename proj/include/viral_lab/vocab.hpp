#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace viral {

enum class ShapeKind : std::uint8_t { circle, square, triangle };
enum class Color : std::uint8_t { red, green, blue, yellow };

inline constexpr std::size_t kShapeCount = 3;
inline constexpr std::size_t kColorCount = 4;

std::string_view to_string(ShapeKind s);
std::string_view to_string(Color c);

/// Closed word-level vocabulary. Ids are stable: specials first, then the
/// question words, shapes, colors, digits 0-8, yes/no.
namespace tok {
inline constexpr std::size_t pad = 0;
inline constexpr std::size_t bos = 1;
inline constexpr std::size_t eos = 2;
inline constexpr std::size_t sep = 3;
}  // namespace tok

inline constexpr std::array<std::string_view, 35> kVocabulary = {
    "<pad>", "<bos>", "<eos>", "<sep>",                                              //
    "how", "many", "what", "is", "left", "right", "of", "above", "below", "the",     //
    "there", "a", "?",                                                               //
    "circle", "square", "triangle",                                                  //
    "red", "green", "blue", "yellow",                                                //
    "0", "1", "2", "3", "4", "5", "6", "7", "8",                                     //
    "yes", "no"};

inline constexpr std::size_t kVocabSize = kVocabulary.size();

/// Throws FormatError for words outside the vocabulary.
std::size_t token_id(std::string_view word);
std::string_view token_word(std::size_t id);

std::size_t shape_token(ShapeKind s);
std::size_t color_token(Color c);
std::size_t digit_token(std::size_t n);

std::vector<std::size_t> tokenize(std::string_view text);
std::string detokenize(std::span<const std::size_t> ids);

}  // namespace viral
