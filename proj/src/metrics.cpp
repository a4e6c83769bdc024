#include "viral_lab/metrics.hpp"

#include "viral_lab/error.hpp"
#include "viral_lab/parallel.hpp"
#include "viral_lab/rng.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace viral {

std::size_t jitter_duplicate_rows(Tensor& m, std::uint64_t seed) {
  const std::size_t n = m.rows(), c = m.cols();
  std::map<std::vector<double>, std::size_t> seen;
  std::size_t touched = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> key(m.row(i).begin(), m.row(i).end());
    if (seen.emplace(std::move(key), i).second) continue;
    Rng rng(seed, "cknna-jitter", i);
    for (std::size_t j = 0; j < c; ++j) m(i, j) += kDuplicateJitter * rng.normal();
    ++touched;
  }
  return touched;
}

namespace {

RowMatrix centered_gram(const Tensor& x) {
  RowMatrix c = x.mat();
  c.rowwise() -= c.colwise().mean();
  return c * c.transpose();
}

std::vector<std::vector<std::size_t>> knn_sets(const RowMatrix& gram, std::size_t k) {
  const auto n = static_cast<std::size_t>(gram.rows());
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) {
    idx.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) idx.push_back(j);
    const auto row = static_cast<Eigen::Index>(i);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double va = gram(row, static_cast<Eigen::Index>(a));
                        const double vb = gram(row, static_cast<Eigen::Index>(b));
                        return va > vb || (va == vb && a < b);
                      });
    out[i].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out[i].begin(), out[i].end());
  }
  return out;
}

}  // namespace

double cknna(const Tensor& phi, const Tensor& psi, std::size_t k, std::size_t* jittered) {
  if (phi.rank() != 2 || psi.rank() != 2 || phi.rows() != psi.rows())
    throw ShapeError("cknna needs two matrices with the same number of rows");
  const std::size_t n = phi.rows();
  if (k == 0 || n < k + 2) throw ShapeError("cknna needs n >= k + 2 (n=" + std::to_string(n) + ", k=" + std::to_string(k) + ")");
  Tensor a = phi, b = psi;
  const std::size_t touched = jitter_duplicate_rows(a, 1) + jitter_duplicate_rows(b, 2);
  if (jittered) *jittered = touched;

  const RowMatrix K = centered_gram(a);
  const RowMatrix L = centered_gram(b);
  const auto nk = knn_sets(K, k);
  const auto nl = knn_sets(L, k);

  // A(X, Y) sums over the pair's own mutual mask, so A(K, K) runs over knn_K.
  double kl = 0.0, kk = 0.0, ll = 0.0;
  std::size_t mask = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> both;
    std::set_intersection(nk[i].begin(), nk[i].end(), nl[i].begin(), nl[i].end(), std::back_inserter(both));
    const auto r = static_cast<Eigen::Index>(i);
    for (auto j : both) kl += K(r, static_cast<Eigen::Index>(j)) * L(r, static_cast<Eigen::Index>(j));
    for (auto j : nk[i]) kk += K(r, static_cast<Eigen::Index>(j)) * K(r, static_cast<Eigen::Index>(j));
    for (auto j : nl[i]) ll += L(r, static_cast<Eigen::Index>(j)) * L(r, static_cast<Eigen::Index>(j));
    mask += both.size();
  }
  if (mask == 0) throw DegenerateInputError("cknna: mutual-neighbour mask is empty");
  const double denom = kk * ll;
  if (!(denom > 0.0)) throw DegenerateInputError("cknna: non-positive denominator");
  return kl / std::sqrt(denom);
}

AlignmentProfile alignment_profile(const ModelParams& params, const ModelConfig& cfg,
                                   std::span<const Scene> probe_scenes, const VisualEncoder& encoder,
                                   const FeatureFn& targets, const ProfileOptions& opts) {
  if (probe_scenes.size() < 8) throw ConfigError("alignment profile needs at least 8 probe scenes");
  const std::size_t N = cfg.visual_tokens;
  std::vector<Tensor> zs;
  std::vector<double> target_rows;
  std::size_t target_dim = 0;
  for (const Scene& s : probe_scenes) {
    zs.push_back(encoder.encode(s));
    Tensor t = targets(s);
    if (t.rows() != N) throw ShapeError("target features must have one row per visual token");
    if (target_dim == 0) target_dim = t.cols();
    if (t.cols() != target_dim) throw ShapeError("target feature width varies across scenes");
    target_rows.insert(target_rows.end(), t.data().begin(), t.data().end());
  }
  const std::size_t total = probe_scenes.size() * N;
  const Tensor pooled_targets({total, target_dim}, std::move(target_rows));

  const std::size_t bos[] = {tok::bos};
  std::vector<SequenceInput> batch;
  for (const Tensor& z : zs) batch.push_back({&z, bos});
  Tape tape;
  BoundParams bound(tape, params, false);
  ForwardOptions fo;
  fo.all_layers = true;
  const BatchForward f = forward_batch(tape, bound, cfg, batch, fo);

  std::vector<std::size_t> pick(total);
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  if (total > opts.tokens) {
    pick = Rng(opts.seed, "profile-subsample").permutation(total);
    pick.resize(opts.tokens);
    std::sort(pick.begin(), pick.end());
  }
  auto select = [&](const Tensor& m) {
    Tensor out({pick.size(), m.cols()});
    for (std::size_t i = 0; i < pick.size(); ++i) std::copy_n(m.row(pick[i]).begin(), m.cols(), out.row(i).begin());
    return out;
  };
  const Tensor target_sel = select(pooled_targets);

  AlignmentProfile prof;
  prof.scenes = probe_scenes.size();
  prof.tokens = pick.size();
  prof.k = opts.k;
  prof.seed = opts.seed;
  prof.values.resize(cfg.layers);
  std::vector<std::size_t> jitter(cfg.layers);
  parallel_for(cfg.layers, [&](std::size_t i) {
    prof.values[i] = cknna(select(f.visual_states[i + 1].value()), target_sel, opts.k, &jitter[i]);
  });
  prof.jittered_rows = std::accumulate(jitter.begin(), jitter.end(), std::size_t{0});
  return prof;
}

double spatial_entropy(std::span<const double> attention, std::size_t grid) {
  if (attention.size() != grid * grid) throw ShapeError("attention map does not cover a G x G grid");
  double total = 0.0;
  for (double v : attention) {
    if (v < 0.0 || !std::isfinite(v)) throw DegenerateInputError("attention weights must be finite and nonnegative");
    total += v;
  }
  if (!(total > 0.0)) throw DegenerateInputError("attention map is all zero");
  const double threshold = total / static_cast<double>(attention.size());
  std::vector<bool> on(attention.size());
  for (std::size_t i = 0; i < attention.size(); ++i) on[i] = attention[i] >= threshold * (1.0 - 1e-12);

  std::vector<int> label(attention.size(), -1);
  std::vector<double> mass;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < attention.size(); ++start) {
    if (!on[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(mass.size());
    mass.push_back(0.0);
    stack.push_back(start);
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t cell = stack.back();
      stack.pop_back();
      mass[static_cast<std::size_t>(id)] += attention[cell];
      const std::size_t r = cell / grid, c = cell % grid;
      const std::size_t nbrs[4] = {r > 0 ? cell - grid : cell, r + 1 < grid ? cell + grid : cell,
                                   c > 0 ? cell - 1 : cell, c + 1 < grid ? cell + 1 : cell};
      for (auto nb : nbrs) {
        if (nb == cell || !on[nb] || label[nb] >= 0) continue;
        label[nb] = id;
        stack.push_back(nb);
      }
    }
  }
  const double on_mass = std::accumulate(mass.begin(), mass.end(), 0.0);
  if (mass.size() <= 1) return 0.0;
  double h = 0.0;
  for (double m : mass) {
    const double p = m / on_mass;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

EntropyReport entropy_report(const ModelParams& params, const ModelConfig& cfg, std::span<const EntropyProbe> probes) {
  if (probes.empty()) throw ConfigError("entropy report needs at least one probe item");
  const std::size_t N = cfg.visual_tokens;
  const auto grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(N))));
  if (grid * grid != N) throw ConfigError("visual token count is not a square grid");
  for (const auto& p : probes)
    if (p.qa->category != Category::spatial) throw ConfigError("entropy probes must be spatial questions");

  std::vector<std::vector<std::vector<double>>> sums(probes.size());
  std::vector<std::size_t> token_counts(probes.size());
  parallel_for(probes.size(), [&](std::size_t i) {
    const auto text = full_text(*probes[i].qa);
    const ForwardTrace trace = forward(params, cfg, *probes[i].z, text);
    // Text row j predicts text[j + 1]; answer content sits between <sep> and <eos>.
    const std::size_t sep = probes[i].qa->question_tokens.size() + 1;
    const std::size_t n_answer = probes[i].qa->answer_tokens.size();
    auto& acc = sums[i];
    acc.assign(cfg.layers, std::vector<double>(cfg.heads, 0.0));
    std::vector<double> row(N);
    for (std::size_t a = 0; a < n_answer; ++a) {
      const std::size_t seq_row = N + sep + a;
      for (std::size_t l = 0; l < cfg.layers; ++l)
        for (std::size_t h = 0; h < cfg.heads; ++h) {
          const Tensor& att = trace.attention[l][h];
          double s = 0.0;
          for (std::size_t c = 0; c < N; ++c) s += (row[c] = att(seq_row, c));
          for (double& v : row) v /= s;
          acc[l][h] += spatial_entropy(row, grid);
        }
    }
    token_counts[i] = n_answer;
  });

  EntropyReport r;
  r.items = probes.size();
  r.tokens = std::accumulate(token_counts.begin(), token_counts.end(), std::size_t{0});
  r.mean.assign(cfg.layers, std::vector<double>(cfg.heads, 0.0));
  for (const auto& s : sums)
    for (std::size_t l = 0; l < cfg.layers; ++l)
      for (std::size_t h = 0; h < cfg.heads; ++h) r.mean[l][h] += s[l][h];
  for (auto& layer : r.mean)
    for (double& v : layer) v /= static_cast<double>(std::max<std::size_t>(1, r.tokens));
  return r;
}

PcaResult pca(const Tensor& features, std::size_t k) {
  const auto n = static_cast<Eigen::Index>(features.rows());
  const auto d = static_cast<Eigen::Index>(features.cols());
  if (static_cast<Eigen::Index>(k) > d) throw ShapeError("pca: more components than feature dimensions");
  Eigen::MatrixXd x = features.mat();
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(std::max<Eigen::Index>(1, n - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  PcaResult r;
  r.loadings.resize(d, static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < k; ++c) {
    const Eigen::Index src = d - 1 - static_cast<Eigen::Index>(c);
    Eigen::VectorXd v = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < d; ++i)
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    if (v(arg) < 0.0) v = -v;
    r.loadings.col(static_cast<Eigen::Index>(c)) = v;
    r.variances.push_back(std::max(0.0, eig.eigenvalues()(src)));
  }
  const Eigen::MatrixXd proj = x * r.loadings;
  r.projections = Tensor({features.rows(), k});
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(k); ++c)
      r.projections(static_cast<std::size_t>(i), static_cast<std::size_t>(c)) = proj(i, c);
  return r;
}

RgbImage pca_rgb(const Tensor& features, std::size_t grid) {
  if (features.rank() != 2 || features.rows() != grid * grid) throw ShapeError("pca_rgb needs N = G^2 feature rows");
  if (features.cols() < 3) throw ShapeError("pca_rgb needs at least 3 feature dimensions");
  const PcaResult p = pca(features, 3);
  const double total_var = std::accumulate(p.variances.begin(), p.variances.end(), 0.0);
  double scale = 0.0;
  for (double v : features.data()) scale = std::max(scale, std::abs(v));
  const double var_floor = 1e-20 * std::max(1.0, scale * scale);
  RgbImage img{grid, grid, std::vector<double>(grid * grid * 3, 0.5)};
  const std::size_t n = grid * grid;
  for (std::size_t c = 0; c < 3; ++c) {
    if (!(p.variances[c] > var_floor) || !(p.variances[c] > 1e-12 * total_var)) continue;
    double lo = p.projections(0, c), hi = lo;
    for (std::size_t i = 1; i < n; ++i) {
      lo = std::min(lo, p.projections(i, c));
      hi = std::max(hi, p.projections(i, c));
    }
    if (!(hi - lo > 0.0)) continue;
    for (std::size_t i = 0; i < n; ++i) img.rgb[i * 3 + c] = (p.projections(i, c) - lo) / (hi - lo);
  }
  return img;
}

std::string ppm_text(const RgbImage& image, std::size_t scale) {
  scale = std::max<std::size_t>(1, scale);
  std::ostringstream os;
  os << "P3\n" << image.width * scale << ' ' << image.height * scale << "\n255\n";
  for (std::size_t y = 0; y < image.height * scale; ++y) {
    for (std::size_t x = 0; x < image.width * scale; ++x) {
      const std::size_t px = (y / scale) * image.width + x / scale;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.rgb[px * 3 + c], 0.0, 1.0);
        os << (x || c ? " " : "") << static_cast<int>(std::lround(v * 255.0));
      }
    }
    os << '\n';
  }
  return os.str();
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image, std::size_t scale) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << ppm_text(image, scale);
}

PermutationReport permutation_eval(const ModelParams& params, const ModelConfig& cfg, std::span<const EvalItem> items,
                                   const PermutationOptions& opts) {
  std::vector<Tensor> shuffled(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::size_t n = items[i].z->rows();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (!opts.identity) perm = Rng(opts.seed, "permute", i).permutation(n);
    shuffled[i] = permute_visual(*items[i].z, perm);
  }
  std::vector<EvalItem> permuted(items.begin(), items.end());
  for (std::size_t i = 0; i < items.size(); ++i) permuted[i].z = &shuffled[i];

  const AccuracyReport a = evaluate(params, cfg, items);
  const AccuracyReport b = evaluate(params, cfg, permuted);
  PermutationReport r;
  r.seed = opts.seed;
  r.items = items.size();
  r.acc_original = a.overall();
  r.acc_shuffled = b.overall();
  r.delta = r.acc_original - r.acc_shuffled;
  for (std::size_t c = 0; c < kCategoryCount; ++c) {
    r.original[c] = a.accuracy(static_cast<Category>(c));
    r.shuffled[c] = b.accuracy(static_cast<Category>(c));
    r.category_delta[c] = r.original[c] - r.shuffled[c];
  }
  return r;
}

nlohmann::json to_json(const AlignmentProfile& p) {
  return {{"cknna", p.values}, {"scenes", p.scenes},       {"tokens", p.tokens},
          {"k", p.k},          {"seed", p.seed},           {"jittered_rows", p.jittered_rows},
          {"jitter", kDuplicateJitter}};
}

nlohmann::json to_json(const EntropyReport& r) {
  double all = 0.0;
  std::vector<double> per_layer;
  for (const auto& layer : r.mean) {
    const double m = std::accumulate(layer.begin(), layer.end(), 0.0) / static_cast<double>(layer.size());
    per_layer.push_back(m);
    all += m;
  }
  return {{"entropy", r.mean},
          {"layer_mean", per_layer},
          {"overall_mean", r.mean.empty() ? 0.0 : all / static_cast<double>(r.mean.size())},
          {"items", r.items},
          {"tokens", r.tokens}};
}

nlohmann::json to_json(const PermutationReport& r) {
  nlohmann::json cats;
  for (std::size_t c = 0; c < kCategoryCount; ++c)
    cats[std::string(to_string(static_cast<Category>(c)))] = {
        {"original", r.original[c]}, {"shuffled", r.shuffled[c]}, {"delta", r.category_delta[c]}};
  return {{"acc_original", r.acc_original},
          {"acc_shuffled", r.acc_shuffled},
          {"delta", r.delta},
          {"per_category", cats},
          {"seed", r.seed},
          {"items", r.items}};
}

std::string profile_csv(const AlignmentProfile& p) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,cknna\n";
  for (std::size_t l = 0; l < p.values.size(); ++l) os << l + 1 << ',' << p.values[l] << '\n';
  return os.str();
}

std::string entropy_csv(const EntropyReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,head,entropy\n";
  for (std::size_t l = 0; l < r.mean.size(); ++l)
    for (std::size_t h = 0; h < r.mean[l].size(); ++h) os << l + 1 << ',' << h << ',' << r.mean[l][h] << '\n';
  return os.str();
}

}  // namespace viral
