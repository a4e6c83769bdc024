#pragma once

#include "viral_lab/container.hpp"
#include "viral_lab/dataset.hpp"
#include "viral_lab/evaluate.hpp"
#include "viral_lab/model.hpp"
#include "viral_lab/run_config.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace viral {

inline constexpr const char* kMetricsHeader = "step,lm_loss,vra_loss,total_loss,wall_ms";
inline constexpr const char* kEvalHeader = "step,acc_count,acc_spatial,acc_exist,acc_all";

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::size_t step = 0;  // completed updates
};

/// One optimizer update: global-norm clip to `clip_norm`, then bias-corrected
/// Adam without weight decay. Returns the pre-clip gradient norm.
double adam_update(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state,
                   const OptimizerConfig& opt);

struct Checkpoint {
  ModelParams params;
  ModelConfig model;
  std::optional<RunConfig> run;  // present when written by the trainer
  std::optional<AdamState> adam;
};

/// Named parameter tensors, optional Adam moments ("adam.m/<name>",
/// "adam.v/<name>", "state.step") and the config snapshot as embedded JSON.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& model,
                     const RunConfig* run = nullptr, const AdamState* adam = nullptr);

/// Throws FormatError on a corrupt file. When `expected` is given, a config
/// snapshot that differs throws ConfigError naming every differing field; so
/// does a parameter set that does not match the snapshot.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

/// Highest-step checkpoint in <run_dir>/checkpoints, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& run_dir);

/// Dataset for a run: loaded from data_dir when set (and checked against the
/// specs), otherwise generated.
Dataset load_or_build_dataset(const RunConfig& cfg);

/// Alignment targets of one item per cfg.align_target.
const Tensor& alignment_target(const RunConfig& cfg, const DataItem& item);

struct StepMetrics {
  std::size_t step = 0;
  double lm = 0.0;
  double vra = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
};

struct EvalRecord {
  std::size_t step = 0;
  AccuracyReport report;
};

struct TrainOptions {
  /// Continue from the latest checkpoint in the output directory.
  bool resume = false;
  /// Stop (after checkpointing) once this many steps are done; simulates an
  /// interrupted run.
  std::optional<std::size_t> stop_after;
  /// Reuse an already built dataset (must match the config's specs).
  const Dataset* data = nullptr;
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  ModelParams params;
  std::vector<StepMetrics> metrics;  // this invocation only
  std::vector<EvalRecord> evals;
  std::size_t final_step = 0;
};

/// Adam on L_total over seeded shuffled batches. The sample order is a pure
/// function of (train seed, step), so resuming only needs the step counter
/// and the optimizer moments stored in the checkpoint. Writes config.json,
/// metrics.csv, eval.csv and checkpoints/step_<s>.vrt to the output directory;
/// evaluation and checkpointing happen every eval_every steps and at the end.
///
/// A non-finite loss aborts with NonFiniteError after writing
/// checkpoints/nonfinite_step_<s>.vrt and nonfinite.json.
TrainResult train(const RunConfig& cfg, const TrainOptions& opts = {});

/// Sample indices (into the train split) used at 0-based step s.
std::vector<std::size_t> batch_indices(std::uint64_t train_seed, std::size_t n_train, std::size_t batch_size,
                                       std::size_t step);

std::string format_metrics_row(const StepMetrics& m);
std::string format_eval_row(const EvalRecord& r);

}  // namespace viral
