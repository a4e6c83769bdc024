#pragma once

#include "viral_lab/scene.hpp"
#include "viral_lab/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace viral {

enum class Category : std::uint8_t { count, spatial, exist };
inline constexpr std::size_t kCategoryCount = 3;

std::string_view to_string(Category c);
Category category_from_string(std::string_view s);

enum class Relation : std::uint8_t { left_of, right_of, above, below };

struct QASample {
  std::uint64_t scene_id = 0;
  Category category = Category::count;
  std::vector<std::size_t> question_tokens;
  std::vector<std::size_t> answer_tokens;
  friend bool operator==(const QASample&, const QASample&) = default;
};

/// Exhaustive grid scan. Count questions take a color or a shape
/// ("how many red ?"), spatial questions name a relation and a referent
/// ("what is left of the red circle ?"), exist questions a color and a shape
/// ("is there a blue square ?"). Spatial relations refer to the adjacent cell.
/// Throws FormatError for malformed questions and for spatial questions
/// whose referent is not unique or whose answer cell is empty.
std::vector<std::size_t> answer_oracle(const Scene& scene, std::span<const std::size_t> question);

/// Category mix used when none is forced: 40% count, 40% spatial, 20% exist.
Category sample_category(std::uint64_t seed);

/// Samples a question of the given category; nullopt when no template applies
/// within `attempts` tries.
std::optional<QASample> try_gen_qa(const Scene& scene, std::uint64_t seed, Category category,
                                   std::size_t attempts = 100);

/// Throws Error when no valid question is found after 100 attempts.
QASample gen_qa(const Scene& scene, std::uint64_t seed, std::optional<Category> category = std::nullopt);

inline constexpr std::size_t kMaxTextTokens = 24;

/// <bos> question <sep> answer <eos>
std::vector<std::size_t> full_text(const QASample& qa);
/// <bos> question <sep>
std::vector<std::size_t> prompt_text(const QASample& qa);

struct DatasetSpec {
  std::uint64_t seed = 1;
  std::size_t n_samples = 20000;
  std::size_t grid = 4;
  double eval_fraction = 0.1;
};

struct DataItem {
  Scene scene;
  QASample qa;
  bool eval = false;
  Tensor z;  // N x D_z, frozen encoder features
  Tensor y;  // N x d, frozen teacher features
};

struct Dataset {
  DatasetSpec spec;
  EncoderSpec encoder;
  TeacherSpec teacher;
  std::vector<DataItem> items;

  std::vector<std::size_t> split_indices(bool eval) const;
};

/// Per-item seeds are derive_seed(seed, "item", i), so item i does not depend
/// on generation order. One scene per item; the split is drawn per scene.
Dataset build_dataset(const DatasetSpec& spec, const EncoderSpec& enc, const TeacherSpec& teacher);

void to_json(nlohmann::json& j, const EncoderSpec& s);
void from_json(const nlohmann::json& j, EncoderSpec& s);
void to_json(nlohmann::json& j, const TeacherSpec& s);
void from_json(const nlohmann::json& j, TeacherSpec& s);
void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Throws ConfigError when `j` has keys outside `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view where);

nlohmann::json scene_to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);

/// Writes <dir>/dataset.vrt (z, y stacked as n x N x dim) and
/// <dir>/dataset.json (scenes, token lists, split tags).
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace viral
