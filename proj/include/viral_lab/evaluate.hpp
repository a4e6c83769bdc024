#pragma once

#include "viral_lab/dataset.hpp"
#include "viral_lab/model.hpp"

#include <array>
#include <span>
#include <vector>

namespace viral {

struct EvalItem {
  const Tensor* z = nullptr;
  const QASample* qa = nullptr;
};

struct AccuracyReport {
  std::array<std::size_t, kCategoryCount> total{};
  std::array<std::size_t, kCategoryCount> correct{};

  /// Exact-match accuracy in [0, 1]; 0 for a category with no items.
  double accuracy(Category c) const;
  double overall() const;
  /// Pooled accuracy over count and spatial items.
  double count_spatial() const;
};

/// Exact token match of predictions against the stored oracle answers.
AccuracyReport score_predictions(std::span<const EvalItem> items,
                                 std::span<const std::vector<std::size_t>> predictions);

/// Greedy-decodes every item (in batches, optionally in parallel) and scores
/// it. Independent of item order.
AccuracyReport evaluate(const ModelParams& params, const ModelConfig& cfg, std::span<const EvalItem> items,
                        std::size_t batch_size = 64);

std::vector<EvalItem> eval_items(const Dataset& data, bool eval_split);

}  // namespace viral
