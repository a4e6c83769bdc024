#include "viral_lab/objectives.hpp"

#include "viral_lab/error.hpp"

namespace viral {

Var lm_loss(Var logits, std::span<const std::size_t> targets, std::span<const double> mask) {
  return ad::cross_entropy(logits, targets, mask);
}

AlignHead AlignHead::bind(const BoundParams& p, std::size_t layer) {
  const std::string pre = "pi.l" + std::to_string(layer) + ".";
  return {p[pre + "w1"], p[pre + "b1"], p[pre + "w2"], p[pre + "b2"], p[pre + "w3"], p[pre + "b3"]};
}

Var AlignHead::operator()(Var e) const {
  Var h = ad::silu(ad::linear(e, w1, b1));
  h = ad::silu(ad::linear(h, w2, b2));
  return ad::linear(h, w3, b3);
}

namespace {

Var mean_of(const std::vector<Var>& scalars) {
  Var acc = scalars.at(0);
  for (std::size_t i = 1; i < scalars.size(); ++i) acc = ad::add(acc, scalars[i]);
  return scalars.size() == 1 ? acc : ad::scale(acc, 1.0 / static_cast<double>(scalars.size()));
}

}  // namespace

Var cosine_alignment(Var projected, Var y) { return ad::scale(ad::mean(ad::cosine_sim_rows(projected, y)), -1.0); }

Var relation_alignment(Var projected, Var y, std::size_t group) {
  const std::size_t rows = projected.rows();
  if (group == 0 || rows % group != 0) throw ShapeError("relation loss: rows not divisible into groups");
  if (y.rows() != rows) throw ShapeError("relation loss: projected and target row counts differ");
  std::vector<Var> terms;
  for (std::size_t start = 0; start < rows; start += group) {
    Var a = ad::normalize_rows(ad::slice_rows(projected, start, group));
    Var b = ad::normalize_rows(ad::slice_rows(y, start, group));
    Var diff = ad::sub(ad::matmul(a, ad::transpose(a)), ad::matmul(b, ad::transpose(b)));
    terms.push_back(ad::mean(ad::mul(diff, diff)));
  }
  return mean_of(terms);
}

Var vra_cos_loss(Var e, Var y, const AlignHead& head) { return cosine_alignment(head(e), y); }

Var relation_loss(Var e, Var y, const AlignHead& head, std::size_t group) {
  return relation_alignment(head(e), y, group);
}

LossBreakdown total_loss(Tape& tape, const BatchForward& fwd, const BoundParams& p, const ModelConfig& cfg,
                         std::span<const std::size_t> targets, std::span<const double> mask, const Tensor* teacher_y) {
  LossBreakdown out;
  out.lm = lm_loss(fwd.logits, targets, mask);
  out.lm_value = out.lm.value().item();
  if (cfg.variant != Variant::vra) {
    out.vra = tape.constant(Tensor::scalar(0.0));
    out.total = out.lm;
    out.total_value = out.lm_value;
    return out;
  }
  if (!teacher_y) throw ConfigError("vra variant needs teacher features");
  Var y = tape.constant(*teacher_y);
  out.teacher = y;
  std::vector<Var> per_layer;
  for (auto l : cfg.align_layers) {
    const Var& e = fwd.visual_states.at(l);
    if (!e.valid()) throw Error("visual states for layer " + std::to_string(l) + " were not captured");
    if (e.rows() != teacher_y->rows()) throw ShapeError("teacher features do not match the visual token count");
    const AlignHead head = AlignHead::bind(p, l);
    Var term = cfg.objective == Objective::cosine ? vra_cos_loss(e, y, head)
                                                  : relation_loss(e, y, head, cfg.visual_tokens);
    out.per_layer_vra.push_back(term.value().item());
    per_layer.push_back(term);
  }
  out.vra = mean_of(per_layer);
  out.vra_value = out.vra.value().item();
  out.total = ad::add(out.lm, ad::scale(out.vra, cfg.lambda));
  out.total_value = out.total.value().item();
  return out;
}

}  // namespace viral
