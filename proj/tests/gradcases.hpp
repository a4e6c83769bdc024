#pragma once
// Full-model losses on a tiny transformer (2 layers, hidden 16, N = 4,
// vocab 12) as LossBuilders over every trainable tensor.

#include "oracles.hpp"

#include "viral_lab/gradcheck.hpp"
#include "viral_lab/model.hpp"
#include "viral_lab/objectives.hpp"

#include <map>
#include <string>
#include <vector>

namespace gradcase {

enum class Kind { lm, cosine, relation, total };

inline const char* name(Kind k) {
  switch (k) {
    case Kind::lm: return "lm";
    case Kind::cosine: return "vra_cosine";
    case Kind::relation: return "relation";
    case Kind::total: return "total";
  }
  return "";
}

struct Case {
  viral::ModelConfig cfg;
  std::vector<std::string> names;
  std::vector<viral::Tensor> params;
  std::vector<viral::Tensor> z;
  viral::Tensor y;
  std::vector<std::vector<std::size_t>> texts;
  viral::LossBuilder loss;
};

inline viral::ModelConfig tiny_config(Kind k) {
  viral::ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.ffn_mult = 2;
  c.vocab_size = 12;
  c.visual_tokens = 4;
  c.max_text = 24;
  c.encoder_dim = 6;
  c.teacher_dim = 5;
  c.variant = k == Kind::lm ? viral::Variant::baseline : viral::Variant::vra;
  c.objective = k == Kind::relation ? viral::Objective::relation : viral::Objective::cosine;
  c.align_layers = {1};
  c.inject_layer = 1;
  c.lambda = 0.5;
  return c;
}

/// Two sequences; the second is one token longer so packing is exercised.
inline Case make(Kind kind, std::uint64_t seed) {
  Case c;
  c.cfg = tiny_config(kind);
  // Larger init than training so that gradients are well above FD noise.
  const viral::ModelParams p = viral::init_params(c.cfg, seed);
  viral::Rng rng(seed, "gradcase");
  for (const auto& [n, t] : p.tensors) {
    c.names.push_back(n);
    viral::Tensor u = t;
    for (auto& v : u.data()) v += 0.3 * rng.normal();
    c.params.push_back(u);
  }
  for (int b = 0; b < 2; ++b) c.z.push_back(oracle::random_tensor({4, 6}, seed * 10 + b));
  c.y = oracle::random_tensor({8, 5}, seed * 10 + 7);
  c.texts = {{1, 4, 5, 7, 3, 9, 2}, {1, 6, 8, 3, 10, 11, 2, 0}};
  return c;
}

/// Binds the LossBuilder; call after the Case has reached its final address.
inline void bind(Case& c, Kind kind) {
  c.loss = [&c, kind](viral::Tape& tape, std::span<const viral::Var> vars) {
    std::map<std::string, viral::Var> m;
    for (std::size_t i = 0; i < vars.size(); ++i) m.emplace(c.names[i], vars[i]);
    const viral::BoundParams bound(std::move(m));
    std::vector<viral::SequenceInput> batch;
    std::vector<std::size_t> targets;
    std::vector<double> mask;
    for (std::size_t b = 0; b < c.texts.size(); ++b) {
      batch.push_back({&c.z[b], c.texts[b]});
      std::vector<std::size_t> t;
      std::vector<double> mk;
      viral::answer_targets(c.texts[b], t, mk);
      targets.insert(targets.end(), t.begin(), t.end());
      mask.insert(mask.end(), mk.begin(), mk.end());
    }
    const viral::BatchForward fwd = viral::forward_batch(tape, bound, c.cfg, batch);
    if (kind == Kind::lm) return viral::lm_loss(fwd.logits, targets, mask);
    const viral::LossBreakdown l = viral::total_loss(tape, fwd, bound, c.cfg, targets, mask, &c.y);
    return kind == Kind::total ? l.total : l.vra;
  };
}

}  // namespace gradcase
