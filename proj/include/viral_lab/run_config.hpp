#pragma once

#include "viral_lab/dataset.hpp"
#include "viral_lab/model.hpp"
#include "viral_lab/scene.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace viral {

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;
};

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t init = 2;
  std::uint64_t train = 3;
};

/// Where the alignment targets come from: the teacher features y (default)
/// or the encoder features z themselves.
enum class AlignTarget { teacher, encoder };
std::string_view to_string(AlignTarget t);
AlignTarget align_target_from_string(std::string_view s);

/// Probe-set sizes and seeds used by the analysis commands.
struct ProbeConfig {
  std::size_t profile_scenes = 64;
  std::size_t profile_tokens = 512;
  std::size_t cknna_k = 10;
  std::uint64_t profile_seed = 0;
  std::size_t entropy_items = 200;
  std::uint64_t permute_seed = 0;
  std::size_t pca_items = 4;
};

struct RunConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  std::size_t batch_size = 32;
  std::size_t steps = 3000;
  std::size_t eval_every = 500;
  Seeds seeds;
  DatasetSpec data;  // data.seed mirrors seeds.data
  EncoderSpec encoder;
  TeacherSpec teacher;
  AlignTarget align_target = AlignTarget::teacher;
  ProbeConfig probe;
  std::string output_dir = "runs/default";
  /// Optional directory written by gen-data; rebuilt from the specs if empty.
  std::string data_dir;
  /// wall_ms in metrics.csv is 0 unless set, so repeated runs stay byte-identical.
  bool log_wall_time = false;
  bool keep_all_checkpoints = false;

  DatasetSpec dataset_spec() const;
  /// Cross-field checks (model sizes vs data/encoder/teacher); throws ConfigError.
  void validate() const;
};

/// Every field is written explicitly.
void to_json(nlohmann::json& j, const RunConfig& c);
/// Unknown keys are rejected. Missing model sizes that follow from the data,
/// encoder and teacher specs (visual_tokens, encoder_dim, teacher_dim) are
/// filled in from them; all other missing fields take their defaults.
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& c);

}  // namespace viral
