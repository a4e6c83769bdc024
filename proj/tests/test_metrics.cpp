#include "oracles.hpp"
#include "tiny.hpp"

#include "viral_lab/error.hpp"
#include "viral_lab/evaluate.hpp"
#include "viral_lab/metrics.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace viral;

namespace {

Tensor rotate(const Tensor& x, std::uint64_t seed) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(oracle::random_tensor({x.cols(), x.cols()}, seed).mat()));
  const Eigen::MatrixXd q = qr.householderQ();
  return Tensor::from_matrix(RowMatrix(Eigen::MatrixXd(x.mat()) * q));
}

std::vector<double> grid_map(std::size_t g, std::initializer_list<std::pair<std::size_t, double>> cells) {
  std::vector<double> m(g * g, 0.0);
  for (auto [i, v] : cells) m[i] = v;
  return m;
}

}  // namespace

TEST(Cknna, MatchesBruteForce) {
  Rng rng(1, "cknna-instances");
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t k = 1 + rng.below(5);
    const std::size_t n = k + 2 + rng.below(32 - k - 1);
    const std::size_t d1 = 1 + rng.below(8), d2 = 1 + rng.below(8);
    const Tensor a = oracle::random_tensor({n, d1}, 1000 + inst), b = oracle::random_tensor({n, d2}, 2000 + inst);
    const double want = oracle::cknna(a, b, k);
    if (std::isnan(want))
      EXPECT_THROW(cknna(a, b, k), DegenerateInputError);
    else
      EXPECT_NEAR(cknna(a, b, k), want, 1e-12) << "n=" << n << " k=" << k;
  }
}

TEST(Cknna, SelfRotationTranslationAndNull) {
  const Tensor x = oracle::random_tensor({40, 6}, 3);
  EXPECT_NEAR(cknna(x, x, 5), 1.0, 1e-10);
  const Tensor y = oracle::random_tensor({40, 4}, 4);
  EXPECT_NEAR(cknna(rotate(x, 5), y, 5), cknna(x, y, 5), 1e-9);
  Tensor shifted = x;
  for (auto& v : shifted.data()) v += 3.0;
  EXPECT_NEAR(cknna(shifted, y, 5), cknna(x, y, 5), 1e-9);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const double v = cknna(oracle::random_tensor({256, 8}, 100 + s), oracle::random_tensor({256, 8}, 200 + s), 10);
    EXPECT_LT(std::abs(v), 0.1) << s;
  }
}

TEST(Cknna, ErrorsAndDuplicates) {
  EXPECT_THROW(cknna(Tensor({5, 2}, 1.0), Tensor({5, 2}, 1.0), 4), ShapeError);
  EXPECT_THROW(cknna(Tensor({6, 2}), Tensor({7, 2}), 2), ShapeError);
  Tensor dup = oracle::random_tensor({10, 3}, 6);
  for (std::size_t c = 0; c < 3; ++c) dup(7, c) = dup(2, c);
  Tensor copy = dup;
  EXPECT_EQ(jitter_duplicate_rows(copy), 1u);
  EXPECT_GT(max_abs_diff(copy, dup), 0.0);
  EXPECT_LT(max_abs_diff(copy, dup), 1e-7);
  std::size_t j = 0;
  cknna(dup, oracle::random_tensor({10, 2}, 7), 3, &j);
  EXPECT_EQ(j, 1u);
}

TEST(SpatialEntropy, HandCases) {
  EXPECT_EQ(spatial_entropy(grid_map(4, {{0, 0.5}, {1, 0.5}}), 4), 0.0);
  EXPECT_EQ(spatial_entropy(std::vector<double>(16, 1.0 / 16), 4), 0.0);
  EXPECT_NEAR(spatial_entropy(grid_map(4, {{0, 0.5}, {15, 0.5}}), 4), std::numbers::ln2, 1e-12);
  EXPECT_NEAR(spatial_entropy(grid_map(4, {{0, 0.5}, {3, 0.25}, {15, 0.25}}), 4), 1.5 * std::numbers::ln2, 1e-12);
  // Diagonal neighbours are separate components.
  EXPECT_NEAR(spatial_entropy(grid_map(4, {{0, 0.5}, {5, 0.5}}), 4), std::numbers::ln2, 1e-12);
  // Unnormalized maps give the same value.
  EXPECT_NEAR(spatial_entropy(grid_map(4, {{0, 2.0}, {3, 1.0}, {15, 1.0}}), 4), 1.5 * std::numbers::ln2, 1e-12);
  // Below-mean cells are dropped from the masses.
  EXPECT_NEAR(spatial_entropy(grid_map(3, {{0, 0.45}, {8, 0.45}, {4, 0.1}}), 3), std::numbers::ln2, 1e-12);
}

TEST(SpatialEntropy, RejectsDegenerateMaps) {
  EXPECT_THROW(spatial_entropy(std::vector<double>(16, 0.0), 4), DegenerateInputError);
  EXPECT_THROW(spatial_entropy(grid_map(4, {{0, 1.0}, {1, -0.1}}), 4), DegenerateInputError);
  EXPECT_THROW(spatial_entropy(std::vector<double>(15, 1.0), 4), ShapeError);
}

TEST(Pca, MatchesCovarianceEigenvectors) {
  const Tensor x = oracle::random_tensor({30, 5}, 9);
  const PcaResult r = pca(x, 3);
  Eigen::MatrixXd c = Eigen::MatrixXd(x.mat()).rowwise() - Eigen::MatrixXd(x.mat()).colwise().mean();
  const Eigen::MatrixXd cov = c.transpose() * c / 29.0;
  for (int j = 0; j < 3; ++j) {
    const Eigen::VectorXd v = r.loadings.col(j);
    EXPECT_NEAR(v.norm(), 1.0, 1e-12);
    EXPECT_LT((cov * v - r.variances[j] * v).norm(), 1e-10);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(v(arg), 0.0);
    if (j > 0) EXPECT_GE(r.variances[j - 1], r.variances[j]);
    for (std::size_t i = 0; i < 30; ++i) EXPECT_NEAR(r.projections(i, j), c.row(i).dot(v), 1e-12);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  EXPECT_NEAR(r.variances[0], es.eigenvalues()(4), 1e-12);
}

TEST(Pca, RgbImageAndPpm) {
  const Tensor x = oracle::random_tensor({16, 6}, 10);
  const RgbImage img = pca_rgb(x, 4);
  EXPECT_EQ(img.width, 4u);
  EXPECT_EQ(img.rgb.size(), 48u);
  for (int ch = 0; ch < 3; ++ch) {
    double lo = 1, hi = 0;
    for (std::size_t i = 0; i < 16; ++i) {
      lo = std::min(lo, img.rgb[3 * i + ch]);
      hi = std::max(hi, img.rgb[3 * i + ch]);
    }
    EXPECT_EQ(lo, 0.0);
    EXPECT_EQ(hi, 1.0);
  }
  const RgbImage flat = pca_rgb(Tensor({16, 6}, 2.0), 4);
  for (double v : flat.rgb) EXPECT_EQ(v, 0.5);
  const std::string ppm = ppm_text(img, 2);
  EXPECT_EQ(ppm.rfind("P3\n8 8\n255\n", 0), 0u);
  std::size_t values = 0;
  std::istringstream in(ppm.substr(std::string("P3\n8 8\n255\n").size()));
  for (int v; in >> v; ++values) {
    EXPECT_GE(v, 0);
    EXPECT_LE(v, 255);
  }
  EXPECT_EQ(values, 8u * 8 * 3);
}

TEST(Profile, DeterministicAndBounded) {
  const auto data = build_dataset(DatasetSpec{2, 12, 3, 0.0}, tiny::encoder(), tiny::teacher());
  std::vector<Scene> scenes;
  for (const auto& it : data.items) scenes.push_back(it.scene);
  const ModelConfig cfg = tiny::model_config(Variant::baseline);
  const ModelParams p = init_params(cfg, 1);
  const VisualEncoder enc(tiny::encoder());
  const Teacher teach(tiny::teacher());
  const FeatureFn f = [&](const Scene& s) { return teach.features(s); };
  const ProfileOptions o{3, 30, 5};
  const AlignmentProfile a = alignment_profile(p, cfg, scenes, enc, f, o);
  const AlignmentProfile b = alignment_profile(p, cfg, scenes, enc, f, o);
  ASSERT_EQ(a.values.size(), cfg.layers);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.tokens, 30u);
  for (double v : a.values) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(profile_csv(a).rfind("layer,cknna\n", 0), 0u);
  const std::vector<Scene> few(scenes.begin(), scenes.begin() + 4);
  EXPECT_THROW(alignment_profile(p, cfg, few, enc, f, o), Error);
}

TEST(Entropy, ReportShapeAndRange) {
  const auto data = build_dataset(DatasetSpec{5, 40, 3, 0.0}, tiny::encoder(), tiny::teacher());
  std::vector<EntropyProbe> probes;
  std::vector<EntropyProbe> non_spatial;
  for (const auto& it : data.items) {
    if (it.qa.category == Category::spatial)
      probes.push_back({&it.z, &it.qa});
    else
      non_spatial.push_back({&it.z, &it.qa});
  }
  ASSERT_FALSE(probes.empty());
  const ModelConfig cfg = tiny::model_config(Variant::baseline);
  const EntropyReport r = entropy_report(init_params(cfg, 2), cfg, probes);
  ASSERT_EQ(r.mean.size(), cfg.layers);
  for (const auto& layer : r.mean) {
    ASSERT_EQ(layer.size(), cfg.heads);
    for (double v : layer) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, std::log(9.0) + 1e-12);
    }
  }
  EXPECT_EQ(entropy_csv(r).rfind("layer,head,entropy\n", 0), 0u);
  ASSERT_FALSE(non_spatial.empty());
  const std::vector<EntropyProbe> bad = {non_spatial.front()};
  EXPECT_THROW(entropy_report(init_params(cfg, 2), cfg, bad), Error);
}

TEST(Permutation, IdentityGivesZeroDeltaAndSeedsAreStable) {
  const auto data = build_dataset(DatasetSpec{6, 30, 3, 0.0}, tiny::encoder(), tiny::teacher());
  const auto items = eval_items(data, false);
  const ModelConfig cfg = tiny::model_config(Variant::residual_post);
  const ModelParams p = init_params(cfg, 3);
  const PermutationReport id = permutation_eval(p, cfg, items, {0, true});
  EXPECT_EQ(id.delta, 0.0);
  EXPECT_EQ(id.acc_original, evaluate(p, cfg, items).overall());
  const PermutationReport a = permutation_eval(p, cfg, items, {4, false});
  const PermutationReport b = permutation_eval(p, cfg, items, {4, false});
  EXPECT_EQ(a.acc_shuffled, b.acc_shuffled);
  EXPECT_EQ(a.delta, a.acc_original - a.acc_shuffled);
  EXPECT_EQ(a.items, items.size());
}

TEST(Evaluate, ScoresExactMatchPerCategory) {
  const auto data = build_dataset(DatasetSpec{7, 12, 3, 0.0}, tiny::encoder(), tiny::teacher());
  const auto items = eval_items(data, false);
  std::vector<std::vector<std::size_t>> preds;
  std::array<std::size_t, kCategoryCount> total{}, right{};
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto cat = static_cast<std::size_t>(items[i].qa->category);
    ++total[cat];
    if (i % 2 == 0) {
      preds.push_back(items[i].qa->answer_tokens);
      ++right[cat];
    } else {
      preds.push_back({tok::pad});
    }
  }
  const AccuracyReport r = score_predictions(items, preds);
  for (std::size_t c = 0; c < kCategoryCount; ++c) {
    EXPECT_EQ(r.total[c], total[c]);
    EXPECT_EQ(r.correct[c], right[c]);
  }
  EXPECT_DOUBLE_EQ(r.overall(), double(right[0] + right[1] + right[2]) / items.size());
  EXPECT_DOUBLE_EQ(r.count_spatial(), double(right[0] + right[1]) / (total[0] + total[1]));
}
