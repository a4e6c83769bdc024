#pragma once

#include "viral_lab/autodiff.hpp"
#include "viral_lab/tensor.hpp"
#include "viral_lab/vocab.hpp"

#include "json.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace viral {

enum class Variant { baseline, residual_post, residual_pre, vra };
enum class Objective { cosine, relation };

std::string_view to_string(Variant v);
std::string_view to_string(Objective o);
Variant variant_from_string(std::string_view s);
Objective objective_from_string(std::string_view s);

struct ModelConfig {
  std::size_t layers = 8;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab_size = kVocabSize;
  std::size_t visual_tokens = 16;  // N = G^2
  std::size_t max_text = 24;       // K_max
  std::size_t encoder_dim = 32;    // D_z
  std::size_t teacher_dim = 16;    // d
  Variant variant = Variant::baseline;
  Objective objective = Objective::cosine;
  std::vector<std::size_t> align_layers = {4};  // 1-based
  double lambda = 0.5;
  std::size_t inject_layer = 4;  // 1-based

  std::size_t ffn_width() const { return ffn_mult * hidden; }
  std::size_t max_sequence() const { return visual_tokens + max_text; }
  bool has_align_heads() const { return variant == Variant::vra; }
  bool has_adapter() const { return variant == Variant::residual_pre; }

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

/// Missing align_layers / inject_layer default to layers / 2.
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Field-by-field differences, "name: a != b". Empty when equal.
std::vector<std::string> config_differences(const ModelConfig& a, const ModelConfig& b);

/// All learnable tensors keyed by name:
///   theta.*      token/positional embeddings, blocks, final norm, output head
///   phi.*        visual projector (2-layer GELU MLP, D_z -> D -> D)
///   pi.l<k>.*    alignment head for layer k (3-layer SiLU MLP, D -> D -> D -> d)
///   phi_prime.*  residual adapter (linear D_z -> D)
struct ModelParams {
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  std::size_t count() const;
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Closed-form parameter count; see README for the formula.
std::size_t parameter_count(const ModelConfig& cfg);

/// Gaussian init with std 0.02 (0.02 / sqrt(2L) for attention and FFN
/// output projections), zero biases, unit norm gains. Each tensor draws from
/// its own named stream, so the result only depends on (cfg, seed).
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Parameters registered on a tape, by name.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ModelParams& params, bool trainable);
  /// Wraps leaves created elsewhere (e.g. by grad_check).
  explicit BoundParams(std::map<std::string, Var> vars) : vars_(std::move(vars)) {}
  Var operator[](const std::string& name) const;
  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  std::map<std::string, Var> vars_;
};

/// One sequence of a packed batch: visual features z (N x D_z) followed by
/// text tokens.
struct SequenceInput {
  const Tensor* z = nullptr;
  std::span<const std::size_t> text;
};

struct ForwardOptions {
  /// Capture visual states at every layer instead of only the aligned ones.
  bool all_layers = false;
  bool capture_attention = false;
};

/// Result of a packed forward pass on a tape.
struct BatchForward {
  Var logits;                      // sum(K_b) x V, text positions only
  Var visual_features;             // z, B*N x D_z, constant leaf
  Var visual_input;                // e^img = P_phi(z), B*N x D
  std::vector<Var> visual_states;  // index l in [1, L]; invalid if not captured
  std::vector<std::size_t> text_offsets;  // first logits row of each sequence
  std::vector<std::size_t> text_lengths;
  /// layer-major, then sequence, then head; empty unless captured
  std::vector<std::vector<Tensor>> attention;
};

/// Visual projector P_phi applied row-wise.
Var project_visual(const BoundParams& p, Var z);

/// Causal attention over each whole sequence (visual prefix included).
/// residual_post adds P_phi(z) and residual_pre adds A_phi'(z) to the visual
/// rows right after block inject_layer; visual_states[l] is read after that.
BatchForward forward_batch(Tape& tape, const BoundParams& p, const ModelConfig& cfg,
                           std::span<const SequenceInput> batch, const ForwardOptions& opts = {});

struct ForwardTrace {
  std::vector<Tensor> visual_states;            // L entries, N x D each
  std::vector<std::vector<Tensor>> attention;  // L x H, (N+K) x (N+K)
  Tensor logits;                               // K x V
};

/// Single-sequence forward with full tracing. Throws ShapeError on a text
/// longer than max_text or mismatched z / teacher shapes.
ForwardTrace forward(const ModelParams& params, const ModelConfig& cfg, const Tensor& z,
                     std::span<const std::size_t> text, const Tensor* teacher_y = nullptr);

/// Visual states at 1-based layer l. Throws ShapeError when out of range.
const Tensor& extract_visual_states(const ForwardTrace& trace, std::size_t layer);

/// out[i] = z[perm[i]]. Throws ConfigError unless perm is a bijection on [0, N).
Tensor permute_visual(const Tensor& z, std::span<const std::size_t> perm);
std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm);

inline constexpr std::size_t kMaxAnswerTokens = 4;

/// Greedy decoding after "<bos> question <sep>" until <eos> or 4 tokens; the
/// returned answer excludes <eos>.
std::vector<std::size_t> generate_answer(const ModelParams& params, const ModelConfig& cfg, const Tensor& z,
                                         std::span<const std::size_t> question);

struct GenerationRequest {
  const Tensor* z = nullptr;
  std::span<const std::size_t> question;
};

/// Batched greedy decoding; identical to calling generate_answer per item.
std::vector<std::vector<std::size_t>> generate_answers(const ModelParams& params, const ModelConfig& cfg,
                                                       std::span<const GenerationRequest> requests);

/// Teacher-forcing targets: logits row j predicts text[j + 1]; only rows whose
/// target lies after <sep> (answer tokens and <eos>) are unmasked.
void answer_targets(std::span<const std::size_t> text, std::vector<std::size_t>& targets,
                    std::vector<double>& mask);

}  // namespace viral
