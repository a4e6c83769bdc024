#pragma once

#include "viral_lab/autodiff.hpp"
#include "viral_lab/model.hpp"

#include <span>
#include <vector>

namespace viral {

/// Mean cross-entropy over the unmasked (answer) positions.
Var lm_loss(Var logits, std::span<const std::size_t> targets, std::span<const double> mask);

/// Alignment head P_pi for one layer: three linear maps with SiLU between.
struct AlignHead {
  Var w1, b1, w2, b2, w3, b3;
  static AlignHead bind(const BoundParams& p, std::size_t layer);
  Var operator()(Var e) const;
};

/// -(1/n) sum_i cos(projected_i, y_i). `y` is expected to be a constant
/// leaf; it never receives a gradient.
Var cosine_alignment(Var projected, Var y);
/// Mean over groups of rows (one group per image, `group` rows each) of the
/// mean squared difference between cosine self-similarity matrices.
Var relation_alignment(Var projected, Var y, std::size_t group);

Var vra_cos_loss(Var e, Var y, const AlignHead& head);
Var relation_loss(Var e, Var y, const AlignHead& head, std::size_t group);

struct LossBreakdown {
  Var lm;
  Var vra;  // scalar 0 when inactive
  Var total;
  Var teacher;  // constant leaf holding teacher_y; invalid when inactive
  double lm_value = 0.0;
  double vra_value = 0.0;
  double total_value = 0.0;
  std::vector<double> per_layer_vra;  // one per cfg.align_layers entry when active
};

/// total = lm + lambda * vra. For the vra variant the alignment term is the
/// unweighted mean of the per-layer objective over cfg.align_layers, each
/// layer with its own head. Other variants report vra = 0, total = lm.
/// `teacher_y` stacks the targets of every sequence (B*N x d); it is required
/// for the vra variant (ConfigError otherwise).
LossBreakdown total_loss(Tape& tape, const BatchForward& fwd, const BoundParams& p, const ModelConfig& cfg,
                         std::span<const std::size_t> targets, std::span<const double> mask, const Tensor* teacher_y);

}  // namespace viral
