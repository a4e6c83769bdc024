#include "viral_lab/model.hpp"

#include "viral_lab/dataset.hpp"
#include "viral_lab/error.hpp"
#include "viral_lab/rng.hpp"

#include <algorithm>
#include <cmath>

namespace viral {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::residual_post: return "residual_post";
    case Variant::residual_pre: return "residual_pre";
    case Variant::vra: return "vra";
  }
  return "?";
}

std::string_view to_string(Objective o) { return o == Objective::cosine ? "cosine" : "relation"; }

Variant variant_from_string(std::string_view s) {
  for (Variant v : {Variant::baseline, Variant::residual_post, Variant::residual_pre, Variant::vra})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

Objective objective_from_string(std::string_view s) {
  if (s == "cosine") return Objective::cosine;
  if (s == "relation") return Objective::relation;
  throw ConfigError("unknown objective '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
  if (layers == 0) fail("layers must be positive");
  if (hidden == 0 || heads == 0) fail("hidden and heads must be positive");
  if (hidden % heads != 0) fail("hidden (" + std::to_string(hidden) + ") not divisible by heads (" + std::to_string(heads) + ")");
  if (ffn_mult == 0) fail("ffn_mult must be positive");
  if (vocab_size <= tok::sep) fail("vocab_size must cover the special tokens");
  if (visual_tokens == 0 || max_text < 2) fail("visual_tokens must be positive and max_text at least 2");
  if (encoder_dim == 0 || teacher_dim == 0) fail("encoder_dim and teacher_dim must be positive");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda must be finite and >= 0");
  if (align_layers.empty()) fail("align_layers must not be empty");
  for (auto l : align_layers)
    if (l < 1 || l > layers) fail("align layer " + std::to_string(l) + " outside [1, " + std::to_string(layers) + "]");
  std::vector<std::size_t> sorted = align_layers;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) fail("align_layers has duplicates");
  if (inject_layer < 1 || inject_layer > layers)
    fail("inject_layer " + std::to_string(inject_layer) + " outside [1, " + std::to_string(layers) + "]");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"layers", c.layers},
       {"hidden", c.hidden},
       {"heads", c.heads},
       {"ffn_mult", c.ffn_mult},
       {"vocab_size", c.vocab_size},
       {"visual_tokens", c.visual_tokens},
       {"max_text", c.max_text},
       {"encoder_dim", c.encoder_dim},
       {"teacher_dim", c.teacher_dim},
       {"variant", to_string(c.variant)},
       {"objective", to_string(c.objective)},
       {"align_layers", c.align_layers},
       {"lambda", c.lambda},
       {"inject_layer", c.inject_layer}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  reject_unknown_keys(j,
                      {"layers", "hidden", "heads", "ffn_mult", "vocab_size", "visual_tokens", "max_text",
                       "encoder_dim", "teacher_dim", "variant", "objective", "align_layers", "lambda", "inject_layer"},
                      "model");
  ModelConfig d;
  c.layers = j.value("layers", d.layers);
  c.hidden = j.value("hidden", d.hidden);
  c.heads = j.value("heads", d.heads);
  c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.visual_tokens = j.value("visual_tokens", d.visual_tokens);
  c.max_text = j.value("max_text", d.max_text);
  c.encoder_dim = j.value("encoder_dim", d.encoder_dim);
  c.teacher_dim = j.value("teacher_dim", d.teacher_dim);
  c.variant = variant_from_string(j.value("variant", std::string(to_string(d.variant))));
  c.objective = objective_from_string(j.value("objective", std::string(to_string(d.objective))));
  const std::size_t mid = std::max<std::size_t>(1, c.layers / 2);
  c.align_layers = j.contains("align_layers") ? j.at("align_layers").get<std::vector<std::size_t>>()
                                              : std::vector<std::size_t>{mid};
  c.lambda = j.value("lambda", d.lambda);
  c.inject_layer = j.value("inject_layer", mid);
}

std::vector<std::string> config_differences(const ModelConfig& a, const ModelConfig& b) {
  const nlohmann::json ja = a, jb = b;
  std::vector<std::string> out;
  for (const auto& [key, va] : ja.items()) {
    const auto& vb = jb.at(key);
    if (va != vb) out.push_back(key + ": " + va.dump() + " != " + vb.dump());
  }
  return out;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

namespace {

std::string block_name(std::size_t l, const char* leaf) { return "theta.block" + std::to_string(l) + "." + leaf; }
std::string head_name(std::size_t l, const char* leaf) { return "pi.l" + std::to_string(l) + "." + leaf; }

enum class Init { normal, output, zeros, ones };

}  // namespace

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t V = cfg.vocab_size, D = cfg.hidden, F = cfg.ffn_width(), L = cfg.layers;
  const std::size_t P = cfg.max_sequence(), Dz = cfg.encoder_dim, d = cfg.teacher_dim;
  std::size_t n = V * D + P * D;             // embeddings
  n += L * (4 * D * D + 2 * D * F + 9 * D + F);  // blocks
  n += 2 * D + D * V + V;                    // final norm + head
  n += Dz * D + D + D * D + D;               // projector
  if (cfg.has_align_heads()) n += cfg.align_layers.size() * (2 * D * D + 2 * D + D * d + d);
  if (cfg.has_adapter()) n += Dz * D + D;
  return n;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams p;
  const double out_std = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  auto make = [&](const std::string& name, Shape shape, Init kind) {
    Tensor t(std::move(shape));
    if (kind == Init::ones) {
      for (double& v : t.data()) v = 1.0;
    } else if (kind != Init::zeros) {
      const double std = kind == Init::output ? out_std : 0.02;
      Rng rng(seed, "init/" + name);
      for (double& v : t.data()) v = std * rng.normal();
    }
    p.tensors.emplace(name, std::move(t));
  };
  const std::size_t V = cfg.vocab_size, D = cfg.hidden, F = cfg.ffn_width();
  make("theta.tok_emb", {V, D}, Init::normal);
  make("theta.pos_emb", {cfg.max_sequence(), D}, Init::normal);
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    make(block_name(l, "ln1.gamma"), {D}, Init::ones);
    make(block_name(l, "ln1.beta"), {D}, Init::zeros);
    make(block_name(l, "attn.wq"), {D, D}, Init::normal);
    make(block_name(l, "attn.bq"), {D}, Init::zeros);
    make(block_name(l, "attn.wk"), {D, D}, Init::normal);
    make(block_name(l, "attn.bk"), {D}, Init::zeros);
    make(block_name(l, "attn.wv"), {D, D}, Init::normal);
    make(block_name(l, "attn.bv"), {D}, Init::zeros);
    make(block_name(l, "attn.wo"), {D, D}, Init::output);
    make(block_name(l, "attn.bo"), {D}, Init::zeros);
    make(block_name(l, "ln2.gamma"), {D}, Init::ones);
    make(block_name(l, "ln2.beta"), {D}, Init::zeros);
    make(block_name(l, "ffn.w1"), {D, F}, Init::normal);
    make(block_name(l, "ffn.b1"), {F}, Init::zeros);
    make(block_name(l, "ffn.w2"), {F, D}, Init::output);
    make(block_name(l, "ffn.b2"), {D}, Init::zeros);
  }
  make("theta.ln_f.gamma", {D}, Init::ones);
  make("theta.ln_f.beta", {D}, Init::zeros);
  make("theta.head.w", {D, V}, Init::normal);
  make("theta.head.b", {V}, Init::zeros);
  make("phi.w1", {cfg.encoder_dim, D}, Init::normal);
  make("phi.b1", {D}, Init::zeros);
  make("phi.w2", {D, D}, Init::normal);
  make("phi.b2", {D}, Init::zeros);
  if (cfg.has_align_heads()) {
    for (auto l : cfg.align_layers) {
      make(head_name(l, "w1"), {D, D}, Init::normal);
      make(head_name(l, "b1"), {D}, Init::zeros);
      make(head_name(l, "w2"), {D, D}, Init::normal);
      make(head_name(l, "b2"), {D}, Init::zeros);
      make(head_name(l, "w3"), {D, cfg.teacher_dim}, Init::normal);
      make(head_name(l, "b3"), {cfg.teacher_dim}, Init::zeros);
    }
  }
  if (cfg.has_adapter()) {
    make("phi_prime.w", {cfg.encoder_dim, D}, Init::normal);
    make("phi_prime.b", {D}, Init::zeros);
  }
  return p;
}

BoundParams::BoundParams(Tape& tape, const ModelParams& params, bool trainable) {
  for (const auto& [name, t] : params.tensors) vars_.emplace(name, trainable ? tape.parameter(t) : tape.constant(t));
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

namespace {

Var linear(Var x, Var w, Var b) { return ad::linear(x, w, b); }

}  // namespace

Var project_visual(const BoundParams& p, Var z) {
  Var h = ad::gelu(linear(z, p["phi.w1"], p["phi.b1"]));
  return linear(h, p["phi.w2"], p["phi.b2"]);
}

BatchForward forward_batch(Tape& tape, const BoundParams& p, const ModelConfig& cfg,
                           std::span<const SequenceInput> batch, const ForwardOptions& opts) {
  if (batch.empty()) throw ShapeError("forward on an empty batch");
  const std::size_t B = batch.size(), N = cfg.visual_tokens, Dz = cfg.encoder_dim;

  std::vector<double> zrows;
  zrows.reserve(B * N * Dz);
  std::vector<std::size_t> text_ids;
  BatchForward out;
  for (const SequenceInput& s : batch) {
    if (!s.z || s.z->rank() != 2 || s.z->rows() != N || s.z->cols() != Dz)
      throw ShapeError("visual features must be " + shape_string({N, Dz}));
    if (s.text.empty()) throw ShapeError("text must hold at least one token");
    if (s.text.size() > cfg.max_text)
      throw ShapeError("text length " + std::to_string(s.text.size()) + " exceeds max_text " +
                       std::to_string(cfg.max_text));
    for (auto id : s.text)
      if (id >= cfg.vocab_size) throw ShapeError("token id " + std::to_string(id) + " outside vocabulary");
    zrows.insert(zrows.end(), s.z->data().begin(), s.z->data().end());
    out.text_offsets.push_back(text_ids.size());
    out.text_lengths.push_back(s.text.size());
    text_ids.insert(text_ids.end(), s.text.begin(), s.text.end());
  }

  // Packed layout: each sequence is its N visual rows followed by its text rows.
  std::vector<std::size_t> order, positions, visual_rows, text_rows;
  std::vector<Segment> segments;
  std::size_t row = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t K = out.text_lengths[b];
    segments.push_back({row, N + K});
    for (std::size_t i = 0; i < N; ++i) {
      order.push_back(b * N + i);
      positions.push_back(i);
      visual_rows.push_back(row++);
    }
    for (std::size_t j = 0; j < K; ++j) {
      order.push_back(B * N + out.text_offsets[b] + j);
      positions.push_back(N + j);
      text_rows.push_back(row++);
    }
  }

  Var z = tape.constant(Tensor({B * N, Dz}, std::move(zrows)));
  out.visual_features = z;
  out.visual_input = project_visual(p, z);
  Var text = ad::embedding(p["theta.tok_emb"], text_ids);
  const Var parts[] = {out.visual_input, text};
  Var x = ad::gather_rows(ad::concat_rows(parts), order);
  x = ad::add(x, ad::embedding(p["theta.pos_emb"], positions));

  std::vector<bool> capture(cfg.layers + 1, opts.all_layers);
  if (cfg.has_align_heads())
    for (auto l : cfg.align_layers) capture.at(l) = true;
  out.visual_states.resize(cfg.layers + 1);
  if (opts.capture_attention) out.attention.resize(cfg.layers + 1);

  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    auto P = [&](const char* leaf) { return p[block_name(l, leaf)]; };
    Var a = ad::layernorm(x, P("ln1.gamma"), P("ln1.beta"));
    Var q = linear(a, P("attn.wq"), P("attn.bq"));
    Var k = linear(a, P("attn.wk"), P("attn.bk"));
    Var v = linear(a, P("attn.wv"), P("attn.bv"));
    Var att = ad::causal_attention(q, k, v, segments, cfg.heads, opts.capture_attention ? &out.attention[l] : nullptr);
    x = ad::add(x, linear(att, P("attn.wo"), P("attn.bo")));
    Var f = ad::gelu(linear(ad::layernorm(x, P("ln2.gamma"), P("ln2.beta")), P("ffn.w1"), P("ffn.b1")));
    x = ad::add(x, linear(f, P("ffn.w2"), P("ffn.b2")));

    if (l == cfg.inject_layer) {
      if (cfg.variant == Variant::residual_post) {
        x = ad::add_rows_at(x, out.visual_input, visual_rows);
      } else if (cfg.variant == Variant::residual_pre) {
        x = ad::add_rows_at(x, linear(z, p["phi_prime.w"], p["phi_prime.b"]), visual_rows);
      }
    }
    if (capture[l]) out.visual_states[l] = ad::gather_rows(x, visual_rows);
  }

  Var t = ad::gather_rows(x, text_rows);
  t = ad::layernorm(t, p["theta.ln_f.gamma"], p["theta.ln_f.beta"]);
  out.logits = linear(t, p["theta.head.w"], p["theta.head.b"]);
  return out;
}

ForwardTrace forward(const ModelParams& params, const ModelConfig& cfg, const Tensor& z,
                     std::span<const std::size_t> text, const Tensor* teacher_y) {
  if (teacher_y && (teacher_y->rank() != 2 || teacher_y->rows() != cfg.visual_tokens ||
                    teacher_y->cols() != cfg.teacher_dim))
    throw ShapeError("teacher features must be " + shape_string({cfg.visual_tokens, cfg.teacher_dim}));
  Tape tape;
  BoundParams bound(tape, params, false);
  const SequenceInput in{&z, text};
  ForwardOptions opts;
  opts.all_layers = true;
  opts.capture_attention = true;
  BatchForward f = forward_batch(tape, bound, cfg, std::span(&in, 1), opts);
  ForwardTrace trace;
  trace.logits = f.logits.value();
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    trace.visual_states.push_back(f.visual_states[l].value());
    trace.attention.push_back(std::move(f.attention[l]));
  }
  return trace;
}

const Tensor& extract_visual_states(const ForwardTrace& trace, std::size_t layer) {
  if (layer < 1 || layer > trace.visual_states.size())
    throw ShapeError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(trace.visual_states.size()) +
                     "]");
  return trace.visual_states[layer - 1];
}

Tensor permute_visual(const Tensor& z, std::span<const std::size_t> perm) {
  const std::size_t n = z.rows();
  if (perm.size() != n) throw ConfigError("permutation length does not match token count");
  std::vector<bool> seen(n, false);
  for (auto i : perm) {
    if (i >= n || seen[i]) throw ConfigError("permutation is not a bijection");
    seen[i] = true;
  }
  Tensor out(z.shape());
  for (std::size_t i = 0; i < n; ++i) std::copy_n(z.row(perm[i]).begin(), z.cols(), out.row(i).begin());
  return out;
}

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv.at(perm[i]) = i;
  return inv;
}

void answer_targets(std::span<const std::size_t> text, std::vector<std::size_t>& targets, std::vector<double>& mask) {
  targets.assign(text.size(), 0);
  mask.assign(text.size(), 0.0);
  const auto sep = std::find(text.begin(), text.end(), tok::sep);
  if (sep == text.end()) return;
  const auto answer_start = static_cast<std::size_t>(sep - text.begin()) + 1;
  for (std::size_t j = 0; j + 1 < text.size(); ++j) {
    targets[j] = text[j + 1];
    if (j + 1 >= answer_start) mask[j] = 1.0;
  }
}

std::vector<std::vector<std::size_t>> generate_answers(const ModelParams& params, const ModelConfig& cfg,
                                                       std::span<const GenerationRequest> requests) {
  std::vector<std::vector<std::size_t>> texts, answers(requests.size());
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    std::vector<std::size_t> t{tok::bos};
    t.insert(t.end(), requests[i].question.begin(), requests[i].question.end());
    t.push_back(tok::sep);
    texts.push_back(std::move(t));
    active.push_back(i);
  }
  for (std::size_t step = 0; step < kMaxAnswerTokens && !active.empty(); ++step) {
    std::vector<std::size_t> still;
    std::vector<SequenceInput> batch;
    for (auto i : active) {
      if (texts[i].size() >= cfg.max_text) continue;
      batch.push_back({requests[i].z, texts[i]});
      still.push_back(i);
    }
    if (batch.empty()) break;
    Tape tape;
    BoundParams bound(tape, params, false);
    BatchForward f = forward_batch(tape, bound, cfg, batch);
    const Tensor& logits = f.logits.value();
    active.clear();
    for (std::size_t b = 0; b < still.size(); ++b) {
      const std::size_t r = f.text_offsets[b] + f.text_lengths[b] - 1;
      auto row = logits.row(r);
      const auto next = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      const std::size_t i = still[b];
      if (next == tok::eos) continue;
      answers[i].push_back(next);
      texts[i].push_back(next);
      active.push_back(i);
    }
  }
  return answers;
}

std::vector<std::size_t> generate_answer(const ModelParams& params, const ModelConfig& cfg, const Tensor& z,
                                         std::span<const std::size_t> question) {
  const GenerationRequest r{&z, question};
  return generate_answers(params, cfg, std::span(&r, 1)).front();
}

}  // namespace viral
