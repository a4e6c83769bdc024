#pragma once

#include "viral_lab/dataset.hpp"
#include "viral_lab/evaluate.hpp"
#include "viral_lab/model.hpp"
#include "viral_lab/scene.hpp"

#include <Eigen/Core>

#include "json.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace viral {

inline constexpr double kDuplicateJitter = 1e-9;

/// Perturbs every repeated row (second and later occurrences) by 1e-9
/// scaled Gaussian noise from a fixed stream. Returns the number of rows
/// touched.
std::size_t jitter_duplicate_rows(Tensor& m, std::uint64_t seed = 0);

/// Mutual k-nearest-neighbour centered kernel alignment.
///
/// Columns of both inputs are centered, K = Phi Phi^T and L = Psi Psi^T.
/// knn(i) holds the k largest off-diagonal entries of row i (ties to the lower
/// index). For a pair (X, Y), alpha_ij = 1 iff j is in both knn_X(i) and
/// knn_Y(i), and A(X, Y) = sum_{i != j} alpha_ij X_ij Y_ij; the score is
/// A(K, L) / sqrt(A(K, K) A(L, L)). Each term uses its own pair's mask, so
/// A(K, K) runs over knn_K alone.
///
/// Duplicate rows are jittered first (count written to `jittered`). Throws
/// ShapeError when n < k + 2 and DegenerateInputError on an empty mask or a
/// non-positive denominator.
double cknna(const Tensor& phi, const Tensor& psi, std::size_t k, std::size_t* jittered = nullptr);

struct AlignmentProfile {
  std::vector<double> values;  // index l - 1 for layer l
  std::size_t scenes = 0;
  std::size_t tokens = 0;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::size_t jittered_rows = 0;
};

struct ProfileOptions {
  std::size_t k = 10;
  std::size_t tokens = 512;
  std::uint64_t seed = 0;
};

using FeatureFn = std::function<Tensor(const Scene&)>;

/// Pools the visual-token states of every probe scene (prefix only: under the
/// causal mask visual states never see the text), subsamples `tokens` of them
/// with a fixed stream, and scores each layer against the pooled targets.
/// Needs at least 8 probe scenes.
AlignmentProfile alignment_profile(const ModelParams& params, const ModelConfig& cfg,
                                   std::span<const Scene> probe_scenes, const VisualEncoder& encoder,
                                   const FeatureFn& targets, const ProfileOptions& opts = {});

/// Spatial entropy of an attention map over a G x G grid: binarize at the
/// map's mean (cells >= mean are on), split the on-cells into 4-connected
/// components, and return -sum p_c ln p_c over component masses. Throws
/// DegenerateInputError for negative weights or an all-zero map.
double spatial_entropy(std::span<const double> attention, std::size_t grid);

struct EntropyReport {
  std::vector<std::vector<double>> mean;  // [layer - 1][head]
  std::size_t items = 0;
  std::size_t tokens = 0;
};

struct EntropyProbe {
  const Tensor* z = nullptr;
  const QASample* qa = nullptr;
};

/// For each answer token (teacher-forced oracle answer), each layer and head:
/// attention row restricted to the visual prefix, renormalized, scored with
/// spatial_entropy; averaged over tokens and items. All probes must be
/// spatial questions.
EntropyReport entropy_report(const ModelParams& params, const ModelConfig& cfg, std::span<const EntropyProbe> probes);

struct PcaResult {
  Eigen::MatrixXd loadings;       // D x k, unit columns, largest-|entry| positive
  std::vector<double> variances;  // eigenvalues, descending
  Tensor projections;             // N x k
};

/// Top-k principal components of mean-centered rows.
PcaResult pca(const Tensor& features, std::size_t k);

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> rgb;  // row-major, 3 values per pixel in [0, 1]
};

/// Top-3 PCA projection of N = G^2 tokens, each channel min-max normalized to
/// [0, 1]. Channels whose component has (near) zero variance are 0.5.
RgbImage pca_rgb(const Tensor& features, std::size_t grid);

/// Plain-text PPM (P3, 8-bit). Each token becomes a `scale` x `scale` block.
void write_ppm(const std::filesystem::path& path, const RgbImage& image, std::size_t scale = 1);
std::string ppm_text(const RgbImage& image, std::size_t scale = 1);

struct PermutationReport {
  double acc_original = 0.0;
  double acc_shuffled = 0.0;
  double delta = 0.0;
  std::array<double, kCategoryCount> original{};
  std::array<double, kCategoryCount> shuffled{};
  std::array<double, kCategoryCount> category_delta{};
  std::uint64_t seed = 0;
  std::size_t items = 0;
};

struct PermutationOptions {
  std::uint64_t seed = 0;
  bool identity = false;
};

/// Accuracy with and without a visual-token shuffle applied to z before the
/// projector. Item i uses the permutation drawn from (seed, "permute", i).
PermutationReport permutation_eval(const ModelParams& params, const ModelConfig& cfg, std::span<const EvalItem> items,
                                   const PermutationOptions& opts);

nlohmann::json to_json(const AlignmentProfile& p);
nlohmann::json to_json(const EntropyReport& r);
nlohmann::json to_json(const PermutationReport& r);
std::string profile_csv(const AlignmentProfile& p);
std::string entropy_csv(const EntropyReport& r);

}  // namespace viral
