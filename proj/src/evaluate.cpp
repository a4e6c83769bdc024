#include "viral_lab/evaluate.hpp"

#include "viral_lab/error.hpp"
#include "viral_lab/parallel.hpp"

#include <algorithm>

namespace viral {

double AccuracyReport::accuracy(Category c) const {
  const auto i = static_cast<std::size_t>(c);
  return total[i] ? static_cast<double>(correct[i]) / static_cast<double>(total[i]) : 0.0;
}

double AccuracyReport::overall() const {
  std::size_t t = 0, c = 0;
  for (std::size_t i = 0; i < kCategoryCount; ++i) {
    t += total[i];
    c += correct[i];
  }
  return t ? static_cast<double>(c) / static_cast<double>(t) : 0.0;
}

double AccuracyReport::count_spatial() const {
  const std::size_t t = total[0] + total[1];
  return t ? static_cast<double>(correct[0] + correct[1]) / static_cast<double>(t) : 0.0;
}

AccuracyReport score_predictions(std::span<const EvalItem> items,
                                 std::span<const std::vector<std::size_t>> predictions) {
  if (items.size() != predictions.size()) throw ShapeError("prediction count does not match item count");
  AccuracyReport r;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto c = static_cast<std::size_t>(items[i].qa->category);
    ++r.total[c];
    if (predictions[i] == items[i].qa->answer_tokens) ++r.correct[c];
  }
  return r;
}

AccuracyReport evaluate(const ModelParams& params, const ModelConfig& cfg, std::span<const EvalItem> items,
                        std::size_t batch_size) {
  batch_size = std::max<std::size_t>(1, batch_size);
  std::vector<std::vector<std::size_t>> predictions(items.size());
  const std::size_t chunks = (items.size() + batch_size - 1) / batch_size;
  parallel_for(chunks, [&](std::size_t chunk) {
    const std::size_t begin = chunk * batch_size;
    const std::size_t end = std::min(items.size(), begin + batch_size);
    std::vector<GenerationRequest> reqs;
    for (std::size_t i = begin; i < end; ++i) reqs.push_back({items[i].z, items[i].qa->question_tokens});
    auto answers = generate_answers(params, cfg, reqs);
    for (std::size_t i = begin; i < end; ++i) predictions[i] = std::move(answers[i - begin]);
  });
  return score_predictions(items, predictions);
}

std::vector<EvalItem> eval_items(const Dataset& data, bool eval_split) {
  std::vector<EvalItem> out;
  for (const DataItem& it : data.items)
    if (it.eval == eval_split) out.push_back({&it.z, &it.qa});
  return out;
}

}  // namespace viral
