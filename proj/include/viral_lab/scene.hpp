#pragma once

#include "viral_lab/tensor.hpp"
#include "viral_lab/vocab.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace viral {

struct Object {
  ShapeKind shape;
  Color color;
  friend bool operator==(const Object&, const Object&) = default;
};

using Cell = std::optional<Object>;

/// G x G grid of optional objects, row-major. Stands in for the input image.
struct Scene {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  std::size_t grid = 4;
  std::vector<Cell> cells;

  std::size_t tokens() const { return grid * grid; }
  const Cell& at(std::size_t row, std::size_t col) const { return cells.at(row * grid + col); }
  std::size_t object_count() const;
  friend bool operator==(const Scene&, const Scene&) = default;
};

inline constexpr std::size_t kMinObjects = 3;
inline constexpr std::size_t kMaxObjects = 8;

/// Uniform object count in [3, 8] (or `forced_count`), cells without
/// replacement, uniform attributes. Throws ConfigError when the grid is
/// smaller than 2 or cannot hold the requested objects.
Scene sample_scene(std::uint64_t seed, std::size_t grid, std::optional<std::size_t> forced_count = std::nullopt);

/// one-hot shape (3) | one-hot color (4) | empty flag (1) | (row, col) / (G - 1)
inline constexpr std::size_t kAttrDim = 10;
inline constexpr std::size_t kAttrPositionOffset = 8;

std::array<double, kAttrDim> attribute_vector(const Cell& cell, std::size_t row, std::size_t col, std::size_t grid);
/// N x 10 attribute rows of every cell, row-major cell order.
Tensor attribute_matrix(const Scene& scene);

struct EncoderSpec {
  std::uint64_t seed = 7;
  std::size_t output_dim = 32;
  std::size_t rank = 6;
  double noise_sigma = 0.05;
  bool drop_position = true;
};

/// Frozen stand-in for the vision encoder: z_i = W2 (W1 a_i') + eps_i with a
/// rank-r bottleneck and per-scene Gaussian noise. a_i' drops the positional
/// components when drop_position is set.
class VisualEncoder {
 public:
  explicit VisualEncoder(EncoderSpec spec);

  const EncoderSpec& spec() const { return spec_; }
  std::size_t input_dim() const { return spec_.drop_position ? kAttrPositionOffset : kAttrDim; }
  const Tensor& bottleneck() const { return w1_; }  // rank x input_dim
  const Tensor& expansion() const { return w2_; }   // output_dim x rank

  /// N x output_dim
  Tensor encode(const Scene& scene) const;

 private:
  EncoderSpec spec_;
  Tensor w1_;
  Tensor w2_;
};

Tensor encode_visual(const Scene& scene, const EncoderSpec& spec);

enum class TeacherKind { structured_synthetic, file };

struct TeacherSpec {
  TeacherKind kind = TeacherKind::structured_synthetic;
  std::string path;  // file kind only
  std::size_t output_dim = 16;
  std::uint64_t seed = 11;
};

/// Frozen stand-in for the VFM teacher. Structured features are
/// y_i = Q pad(a_i) with Q a seeded orthogonal matrix; file features are
/// read per scene from a tensor container (tensor "scene_<id>", N x d).
class Teacher {
 public:
  explicit Teacher(TeacherSpec spec);

  const TeacherSpec& spec() const { return spec_; }
  const Tensor& mixing() const { return q_; }

  /// N x output_dim. Throws ShapeError on a file tensor with the wrong shape
  /// and FormatError when the scene is missing from the file.
  Tensor features(const Scene& scene) const;

 private:
  TeacherSpec spec_;
  Tensor q_;
  std::map<std::string, Tensor> file_rows_;
};

Tensor teacher_features(const Scene& scene, const TeacherSpec& spec);

std::string teacher_file_key(std::uint64_t scene_id);

}  // namespace viral
