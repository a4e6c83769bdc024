#include "oracles.hpp"
#include "tiny.hpp"

#include "viral_lab/autodiff.hpp"
#include "viral_lab/error.hpp"
#include "viral_lab/model.hpp"
#include "viral_lab/objectives.hpp"

#include <gtest/gtest.h>

using namespace viral;

namespace {

std::size_t formula_count(const ModelConfig& c) {
  const std::size_t V = c.vocab_size, D = c.hidden, F = c.ffn_width(), L = c.layers, Dz = c.encoder_dim,
                    P = c.max_sequence(), d = c.teacher_dim;
  std::size_t n = V * D + P * D + L * (4 * D * D + 2 * D * F + 9 * D + F) + 2 * D + D * V + V + Dz * D + D + D * D + D;
  if (c.variant == Variant::vra) n += c.align_layers.size() * (2 * D * D + 2 * D + D * d + d);
  if (c.variant == Variant::residual_pre) n += Dz * D + D;
  return n;
}

}  // namespace

TEST(Model, ParameterCountMatchesFormula) {
  for (auto v : {Variant::baseline, Variant::residual_post, Variant::residual_pre, Variant::vra}) {
    ModelConfig c = tiny::model_config(v);
    c.align_layers = {1, 2};
    EXPECT_EQ(parameter_count(c), formula_count(c)) << to_string(v);
    EXPECT_EQ(init_params(c, 0).count(), parameter_count(c)) << to_string(v);
  }
  ModelConfig def;
  def.variant = Variant::vra;
  EXPECT_EQ(parameter_count(def), formula_count(def));
}

TEST(Model, InitIsSeededPerTensor) {
  const ModelConfig c = tiny::model_config(Variant::vra);
  EXPECT_EQ(init_params(c, 3), init_params(c, 3));
  EXPECT_NE(init_params(c, 3), init_params(c, 4));
  // Adding the adapter leaves every shared tensor unchanged.
  const ModelParams a = init_params(tiny::model_config(Variant::baseline), 3);
  const ModelParams b = init_params(tiny::model_config(Variant::residual_pre), 3);
  for (const auto& [name, t] : a.tensors) EXPECT_EQ(b.at(name), t) << name;
  EXPECT_EQ(a.at("theta.ln_f.gamma"), Tensor({c.hidden}, 1.0));
  EXPECT_EQ(a.at("theta.head.b"), Tensor({c.vocab_size}, 0.0));
}

TEST(Model, ConfigValidationAndJson) {
  ModelConfig c = tiny::model_config(Variant::vra);
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny::model_config(Variant::vra);
  c.align_layers = {3};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny::model_config(Variant::vra);
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>().align_layers, c.align_layers);
  EXPECT_TRUE(config_differences(j.get<ModelConfig>(), c).empty());
  j.erase("align_layers");
  j.erase("inject_layer");
  j["layers"] = 6;
  const auto d = j.get<ModelConfig>();
  EXPECT_EQ(d.align_layers, std::vector<std::size_t>{3});
  EXPECT_EQ(d.inject_layer, 3u);
  EXPECT_EQ(config_differences(c, d).size(), 3u);
}

TEST(Model, VariantIsolationResidualPostBitExact) {
  const auto data = tiny::items(3, 5);
  ModelParams base = init_params(tiny::model_config(Variant::baseline), 9);
  for (const char* n : {"phi.w1", "phi.b1", "phi.w2", "phi.b2"})
    for (auto& v : base.at(n).data()) v = 0.0;
  for (const auto& it : data) {
    const auto text = full_text(it.qa);
    const Tensor a = forward(base, tiny::model_config(Variant::baseline), it.z, text).logits;
    const Tensor b = forward(base, tiny::model_config(Variant::residual_post), it.z, text).logits;
    EXPECT_EQ(a, b);
  }
}

TEST(Model, VariantIsolationResidualPreBitExact) {
  const auto data = tiny::items(3, 6);
  ModelParams pre = init_params(tiny::model_config(Variant::residual_pre), 9);
  for (const char* n : {"phi_prime.w", "phi_prime.b"})
    for (auto& v : pre.at(n).data()) v = 0.0;
  ModelParams base = pre;
  base.tensors.erase("phi_prime.w");
  base.tensors.erase("phi_prime.b");
  for (const auto& it : data) {
    const auto text = full_text(it.qa);
    EXPECT_EQ(forward(base, tiny::model_config(Variant::baseline), it.z, text).logits,
              forward(pre, tiny::model_config(Variant::residual_pre), it.z, text).logits);
  }
}

TEST(Model, InjectionOnlyTouchesLaterLayers) {
  const auto it = tiny::items(1, 7)[0];
  const auto text = full_text(it.qa);
  ModelConfig cb = tiny::model_config(Variant::baseline), cp = tiny::model_config(Variant::residual_post);
  cb.layers = cp.layers = 3;
  cb.inject_layer = cp.inject_layer = 2;
  const ModelParams p = init_params(cb, 2);
  const auto a = forward(p, cb, it.z, text), b = forward(p, cp, it.z, text);
  EXPECT_EQ(a.visual_states[0], b.visual_states[0]);
  EXPECT_GT(max_abs_diff(a.visual_states[1], b.visual_states[1]), 1e-6);
  EXPECT_GT(max_abs_diff(a.logits, b.logits), 1e-9);
}

TEST(Model, PackedBatchMatchesSingleSequences) {
  const ModelConfig cfg = tiny::model_config(Variant::vra);
  const ModelParams p = init_params(cfg, 5);
  const auto data = tiny::items(4, 8);
  std::vector<std::vector<std::size_t>> texts;
  std::vector<SequenceInput> batch;
  for (const auto& it : data) texts.push_back(full_text(it.qa));
  for (std::size_t i = 0; i < data.size(); ++i) batch.push_back({&data[i].z, texts[i]});
  Tape tape;
  BoundParams bound(tape, p, false);
  const BatchForward fwd = forward_batch(tape, bound, cfg, batch);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor single = forward(p, cfg, data[i].z, texts[i]).logits;
    const Tensor packed = fwd.logits.value().rows_slice(fwd.text_offsets[i], fwd.text_lengths[i]);
    EXPECT_LT(max_abs_diff(single, packed), 1e-12);
  }
}

TEST(Model, VisualStatesDoNotSeeText) {
  const ModelConfig cfg = tiny::model_config(Variant::baseline);
  const ModelParams p = init_params(cfg, 5);
  const auto it = tiny::items(1, 9)[0];
  const std::vector<std::size_t> t1 = {tok::bos, 4, 5}, t2 = {tok::bos, 9, 10, 11, 3};
  const auto a = forward(p, cfg, it.z, t1), b = forward(p, cfg, it.z, t2);
  for (std::size_t l = 1; l <= cfg.layers; ++l) EXPECT_EQ(extract_visual_states(a, l), extract_visual_states(b, l));
  EXPECT_THROW(extract_visual_states(a, 0), ShapeError);
  EXPECT_THROW(extract_visual_states(a, cfg.layers + 1), ShapeError);
}

TEST(Model, AttentionRowsAreCausalDistributions) {
  const ModelConfig cfg = tiny::model_config(Variant::baseline);
  const auto it = tiny::items(1, 10)[0];
  const auto tr = forward(init_params(cfg, 1), cfg, it.z, full_text(it.qa));
  ASSERT_EQ(tr.attention.size(), cfg.layers);
  for (const auto& layer : tr.attention) {
    ASSERT_EQ(layer.size(), cfg.heads);
    for (const Tensor& a : layer)
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
          if (j > i) EXPECT_EQ(a(i, j), 0.0);
          s += a(i, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
}

TEST(Model, ShapeErrors) {
  const ModelConfig cfg = tiny::model_config(Variant::baseline);
  const ModelParams p = init_params(cfg, 1);
  const Tensor z({cfg.visual_tokens, cfg.encoder_dim});
  std::vector<std::size_t> long_text(cfg.max_text + 1, tok::bos);
  EXPECT_THROW(forward(p, cfg, z, long_text), ShapeError);
  EXPECT_THROW(forward(p, cfg, Tensor({cfg.visual_tokens + 1, cfg.encoder_dim}), std::vector<std::size_t>{1}),
               ShapeError);
  const Tensor bad_y({cfg.visual_tokens, cfg.teacher_dim + 1});
  EXPECT_THROW(forward(p, cfg, z, std::vector<std::size_t>{1}, &bad_y), ShapeError);
}

TEST(Model, BatchedDecodingMatchesSingle) {
  const ModelConfig cfg = tiny::model_config(Variant::residual_pre);
  const ModelParams p = init_params(cfg, 12);
  const auto data = tiny::items(5, 11);
  std::vector<GenerationRequest> reqs;
  for (const auto& it : data) reqs.push_back({&it.z, it.qa.question_tokens});
  const auto batched = generate_answers(p, cfg, reqs);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto single = generate_answer(p, cfg, data[i].z, data[i].qa.question_tokens);
    EXPECT_EQ(batched[i], single);
    EXPECT_LE(single.size(), kMaxAnswerTokens);
  }
}

TEST(Model, PermutationHelpers) {
  const Tensor z = oracle::random_tensor({4, 3}, 1);
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  const Tensor pz = permute_visual(z, perm);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(pz(i, c), z(perm[i], c));
  EXPECT_EQ(permute_visual(pz, inverse_permutation(perm)), z);
  const std::vector<std::size_t> dup = {0, 0, 1, 2};
  EXPECT_THROW(permute_visual(z, dup), ConfigError);
}

TEST(Model, AnswerTargetsMaskOnlyAnswerAndEos) {
  const std::vector<std::size_t> text = {tok::bos, 4, 5, 20, 16, tok::sep, 26, tok::eos};
  std::vector<std::size_t> tg;
  std::vector<double> mask;
  answer_targets(text, tg, mask);
  ASSERT_EQ(tg.size(), text.size());
  for (std::size_t j = 0; j + 1 < text.size(); ++j) EXPECT_EQ(tg[j], text[j + 1]);
  const std::vector<double> want = {0, 0, 0, 0, 0, 1, 1, 0};
  EXPECT_EQ(mask, want);
}

class StopGradient : public ::testing::TestWithParam<Variant> {};

TEST_P(StopGradient, EncoderAndTeacherFeaturesGetExactlyZero) {
  ModelConfig cfg = tiny::model_config(GetParam());
  const ModelParams p = init_params(cfg, 4);
  const auto data = tiny::items(2, 12);
  std::vector<std::vector<std::size_t>> texts;
  std::vector<SequenceInput> batch;
  std::vector<std::size_t> targets;
  std::vector<double> mask;
  std::vector<double> yrows;
  for (const auto& it : data) {
    texts.push_back(full_text(it.qa));
    yrows.insert(yrows.end(), it.y.data().begin(), it.y.data().end());
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    batch.push_back({&data[i].z, texts[i]});
    std::vector<std::size_t> t;
    std::vector<double> m;
    answer_targets(texts[i], t, m);
    targets.insert(targets.end(), t.begin(), t.end());
    mask.insert(mask.end(), m.begin(), m.end());
  }
  const Tensor y({data.size() * cfg.visual_tokens, cfg.teacher_dim}, yrows);
  Tape tape;
  BoundParams bound(tape, p, true);
  const BatchForward fwd = forward_batch(tape, bound, cfg, batch);
  const LossBreakdown loss = total_loss(tape, fwd, bound, cfg, targets, mask, &y);
  tape.backward(loss.total);

  EXPECT_FALSE(tape.requires_grad(fwd.visual_features));
  EXPECT_EQ(tape.grad(fwd.visual_features), Tensor(fwd.visual_features.shape()));
  if (cfg.variant == Variant::vra) {
    ASSERT_TRUE(loss.teacher.valid());
    EXPECT_FALSE(tape.requires_grad(loss.teacher));
    EXPECT_EQ(tape.grad(loss.teacher), Tensor(y.shape()));
    EXPECT_GT(tape.grad(bound["pi.l1.w1"]).max_abs(), 0.0);
  }
  // The projector right above z does receive gradient.
  EXPECT_GT(tape.grad(bound["phi.w1"]).max_abs(), 0.0);
}

INSTANTIATE_TEST_SUITE_P(AllVariants, StopGradient,
                         ::testing::Values(Variant::baseline, Variant::residual_post, Variant::residual_pre,
                                           Variant::vra),
                         [](const auto& info) { return std::string(to_string(info.param)); });
