#include "viral_lab/scene.hpp"

#include "viral_lab/container.hpp"
#include "viral_lab/error.hpp"
#include "viral_lab/rng.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <numeric>

namespace viral {

std::size_t Scene::object_count() const {
  return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const Cell& c) { return c.has_value(); }));
}

Scene sample_scene(std::uint64_t seed, std::size_t grid, std::optional<std::size_t> forced_count) {
  if (grid < 2) throw ConfigError("grid size must be at least 2");
  Rng rng(seed, "scene");
  const std::size_t n_cells = grid * grid;
  const std::size_t count = forced_count ? *forced_count : kMinObjects + rng.below(kMaxObjects - kMinObjects + 1);
  if (count > n_cells)
    throw ConfigError("cannot place " + std::to_string(count) + " objects on a " + std::to_string(grid) + "x" +
                      std::to_string(grid) + " grid");
  Scene s;
  s.seed = seed;
  s.grid = grid;
  s.cells.assign(n_cells, std::nullopt);
  auto order = rng.permutation(n_cells);
  for (std::size_t i = 0; i < count; ++i) {
    const auto shape = static_cast<ShapeKind>(rng.below(kShapeCount));
    const auto color = static_cast<Color>(rng.below(kColorCount));
    s.cells[order[i]] = Object{shape, color};
  }
  return s;
}

std::array<double, kAttrDim> attribute_vector(const Cell& cell, std::size_t row, std::size_t col, std::size_t grid) {
  std::array<double, kAttrDim> a{};
  if (cell) {
    a[static_cast<std::size_t>(cell->shape)] = 1.0;
    a[kShapeCount + static_cast<std::size_t>(cell->color)] = 1.0;
  } else {
    a[kShapeCount + kColorCount] = 1.0;
  }
  const double denom = static_cast<double>(grid - 1);
  a[kAttrPositionOffset] = static_cast<double>(row) / denom;
  a[kAttrPositionOffset + 1] = static_cast<double>(col) / denom;
  return a;
}

Tensor attribute_matrix(const Scene& scene) {
  Tensor out({scene.tokens(), kAttrDim});
  for (std::size_t r = 0; r < scene.grid; ++r)
    for (std::size_t c = 0; c < scene.grid; ++c) {
      const auto a = attribute_vector(scene.at(r, c), r, c, scene.grid);
      std::copy(a.begin(), a.end(), out.row(r * scene.grid + c).begin());
    }
  return out;
}

VisualEncoder::VisualEncoder(EncoderSpec spec) : spec_(spec) {
  if (spec_.rank == 0 || spec_.output_dim == 0) throw ConfigError("encoder rank and output_dim must be positive");
  if (spec_.noise_sigma < 0.0) throw ConfigError("encoder noise_sigma must be nonnegative");
  const std::size_t in = input_dim();
  Rng rng(spec_.seed, "encoder-weights");
  w1_ = Tensor({spec_.rank, in});
  for (double& v : w1_.data()) v = rng.normal() / std::sqrt(static_cast<double>(in));
  w2_ = Tensor({spec_.output_dim, spec_.rank});
  for (double& v : w2_.data()) v = rng.normal() / std::sqrt(static_cast<double>(spec_.rank));
}

Tensor VisualEncoder::encode(const Scene& scene) const {
  const Tensor attrs = attribute_matrix(scene);
  const std::size_t in = input_dim();
  RowMatrix a = attrs.mat().leftCols(static_cast<Eigen::Index>(in));
  RowMatrix z = a * w1_.mat().transpose() * w2_.mat().transpose();
  if (spec_.noise_sigma > 0.0) {
    Rng noise(spec_.seed, "encoder-noise", scene.seed);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] += spec_.noise_sigma * noise.normal();
  }
  return Tensor::from_matrix(z);
}

Tensor encode_visual(const Scene& scene, const EncoderSpec& spec) { return VisualEncoder(spec).encode(scene); }

std::string teacher_file_key(std::uint64_t scene_id) { return "scene_" + std::to_string(scene_id); }

Teacher::Teacher(TeacherSpec spec) : spec_(std::move(spec)) {
  if (spec_.kind == TeacherKind::structured_synthetic) {
    if (spec_.output_dim < kAttrDim)
      throw ConfigError("structured teacher needs output_dim >= " + std::to_string(kAttrDim));
    const auto d = static_cast<Eigen::Index>(spec_.output_dim);
    Rng rng(spec_.seed, "teacher-mixing");
    RowMatrix g(d, d);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    Eigen::HouseholderQR<RowMatrix> qr(g);
    RowMatrix q = qr.householderQ();
    q_ = Tensor::from_matrix(q);
  } else {
    const TensorContainer c = read_container(spec_.path);
    for (const auto& e : c.entries()) file_rows_.emplace(e.name, e.tensor);
  }
}

Tensor Teacher::features(const Scene& scene) const {
  const std::size_t n = scene.tokens();
  if (spec_.kind == TeacherKind::file) {
    auto it = file_rows_.find(teacher_file_key(scene.id));
    if (it == file_rows_.end()) throw FormatError("teacher file has no features for scene " + std::to_string(scene.id));
    const Tensor& t = it->second;
    if (t.rank() != 2 || t.dim(0) != n || t.dim(1) != spec_.output_dim)
      throw ShapeError("teacher features for scene " + std::to_string(scene.id) + " have shape " +
                       shape_string(t.shape()) + ", expected " + shape_string({n, spec_.output_dim}));
    return t;
  }
  const Tensor attrs = attribute_matrix(scene);
  RowMatrix padded = RowMatrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(spec_.output_dim));
  padded.leftCols(kAttrDim) = attrs.mat();
  return Tensor::from_matrix(padded * q_.mat().transpose());
}

Tensor teacher_features(const Scene& scene, const TeacherSpec& spec) { return Teacher(spec).features(scene); }

}  // namespace viral
