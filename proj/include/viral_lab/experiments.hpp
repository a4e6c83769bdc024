#pragma once

#include "viral_lab/dataset.hpp"
#include "viral_lab/metrics.hpp"
#include "viral_lab/model.hpp"
#include "viral_lab/run_config.hpp"
#include "viral_lab/trainer.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace viral {

/// A finished (or interrupted) run: its config snapshot, latest checkpoint
/// and regenerated dataset.
struct LoadedRun {
  std::filesystem::path dir;
  RunConfig cfg;
  ModelParams params;
  std::size_t step = 0;
  Dataset data;

  std::filesystem::path analysis_dir() const { return dir / "analysis"; }
  /// First entry of align_layers.
  std::size_t aligned_layer() const { return cfg.model.align_layers.front(); }
};

LoadedRun load_run(const std::filesystem::path& dir);

/// CKNNA of every layer's visual states against the teacher (or encoder)
/// features of the first probe.profile_scenes eval scenes. Writes
/// analysis/profile.csv (header `layer,cknna`) and analysis/profile.json.
AlignmentProfile analyze_profile(const LoadedRun& run, AlignTarget target = AlignTarget::teacher);

/// Spatial entropy over the first probe.entropy_items spatial eval items.
/// Writes analysis/entropy.csv (header `layer,head,entropy`) and entropy.json.
EntropyReport analyze_entropy(const LoadedRun& run);

/// PCA images of layer `layer` visual states (plus encoder and teacher
/// features) for the first probe.pca_items eval scenes, as P3 PPMs.
std::vector<std::filesystem::path> analyze_pca(const LoadedRun& run, std::size_t layer, std::size_t scale = 16);

/// Accuracy drop under a seeded visual-token shuffle on the eval split.
/// Writes analysis/permute.json.
PermutationReport analyze_permutation(const LoadedRun& run, std::optional<std::uint64_t> seed = std::nullopt);

/// Everything compare/ablate need about one run; analyses missing on disk
/// are computed (and written) first.
nlohmann::json run_summary(const std::filesystem::path& dir);

/// Side-by-side report of two runs (final accuracies, eval curves, CKNNA
/// profiles, entropy, permutation deltas) with a winner per metric. Writes
/// comparison.json and comparison.csv into out_dir. Throws ConfigError when
/// the runs used different data seeds.
nlohmann::json compare_runs(const std::filesystem::path& a, const std::filesystem::path& b,
                            const std::filesystem::path& out_dir);

enum class AblationAxis { align_layer, lambda, objective, variant, target };
std::string_view to_string(AblationAxis a);
AblationAxis ablation_axis_from_string(std::string_view s);

/// Applies one axis value to a config. Align layers accept "4" or a
/// multi-layer set "3+4+5"; alignment axes switch the variant to vra.
RunConfig apply_ablation(const RunConfig& base, AblationAxis axis, const std::string& value);

struct AblationOptions {
  std::function<void(const std::string&)> log;
};

/// One run directory per value (<out_dir>/<axis>-<value>), then
/// <out_dir>/ablation_<axis>.{json,csv} and an aggregate
/// <out_dir>/ablation_report.json covering every axis swept so far.
nlohmann::json ablate(const RunConfig& base, AblationAxis axis, const std::vector<std::string>& values,
                      const std::filesystem::path& out_dir, const AblationOptions& opts = {});

/// Relative drop of the vra term between the first and last 10 logged steps
/// of the first `window` steps: (early - late) / |early|.
double vra_relative_drop(const std::filesystem::path& metrics_csv, std::size_t window = 500);

/// Rows of a CSV file with a numeric header; throws FormatError on mismatch.
std::vector<std::vector<double>> read_numeric_csv(const std::filesystem::path& path, const std::string& header);

}  // namespace viral
