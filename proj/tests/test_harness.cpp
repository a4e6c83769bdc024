#include "oracles.hpp"
#include "tiny.hpp"

#include "viral_lab/error.hpp"
#include "viral_lab/experiments.hpp"
#include "viral_lab/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

using namespace viral;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

}  // namespace

TEST(Adam, MatchesScalarReference) {
  ModelParams p;
  p.tensors["a"] = Tensor::matrix(1, 3, {0.5, -1.0, 2.0});
  p.tensors["b"] = Tensor::matrix(1, 2, {0.1, 0.2});
  const std::vector<std::map<std::string, Tensor>> grads = {
      {{"a", Tensor::matrix(1, 3, {3.0, -4.0, 0.0})}, {"b", Tensor::matrix(1, 2, {0.0, 12.0})}},  // clipped
      {{"a", Tensor::matrix(1, 3, {0.1, 0.2, -0.3})}, {"b", Tensor::matrix(1, 2, {0.05, 0.0})}},  // not clipped
  };
  OptimizerConfig opt;
  opt.lr = 0.01;
  AdamState st;
  // Reference state as flat vectors over a then b.
  std::vector<double> x = {0.5, -1.0, 2.0, 0.1, 0.2}, m(5, 0.0), v(5, 0.0);
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    std::vector<double> g;
    for (const char* n : {"a", "b"})
      for (double e : grads[t - 1].at(n).data()) g.push_back(e);
    double norm = 0;
    for (double e : g) norm += e * e;
    norm = std::sqrt(norm);
    EXPECT_DOUBLE_EQ(adam_update(p, grads[t - 1], st, opt), norm);
    const double s = norm > 1.0 ? 1.0 / norm : 1.0;
    for (std::size_t i = 0; i < 5; ++i) {
      const double gi = g[i] * s;
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, double(t))), vh = v[i] / (1 - std::pow(0.999, double(t)));
      x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    const std::vector<double> got = {p.at("a")[0], p.at("a")[1], p.at("a")[2], p.at("b")[0], p.at("b")[1]};
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(got[i], x[i], 1e-15) << "step " << t << " entry " << i;
  }
  EXPECT_EQ(st.step, 2u);
  std::map<std::string, Tensor> bad = {{"a", Tensor::matrix(1, 3, {NAN, 0, 0})}};
  EXPECT_THROW(adam_update(p, bad, st, opt), NonFiniteError);
}

TEST(RunConfig, JsonRoundTripAndValidation) {
  RunConfig c = tiny::run_config(Variant::vra, "x");
  c.model.align_layers = {1, 2};
  const nlohmann::json j = c;
  for (const char* key : {"model", "optimizer", "batch_size", "steps", "eval_every", "seeds", "data", "encoder",
                          "teacher", "align_target", "probe", "output_dir", "log_wall_time"})
    EXPECT_TRUE(j.contains(key)) << key;
  const RunConfig d = j.get<RunConfig>();
  EXPECT_EQ(nlohmann::json(d), j);

  nlohmann::json unknown = j;
  unknown["lr"] = 0.1;
  EXPECT_THROW(unknown.get<RunConfig>(), ConfigError);
  nlohmann::json seeded = j;
  seeded["data"]["seed"] = 5;
  EXPECT_THROW(seeded.get<RunConfig>(), ConfigError);

  RunConfig bad = c;
  bad.model.encoder_dim = 7;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.optimizer.beta1 = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.align_target = AlignTarget::encoder;  // teacher_dim no longer matches the target width
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.model.teacher_dim = bad.encoder.output_dim;
  EXPECT_NO_THROW(bad.validate());

  const fs::path dir = tiny::fresh_dir("config");
  save_run_config(dir / "c.json", c);
  EXPECT_EQ(nlohmann::json(load_run_config(dir / "c.json")), j);
  write_file(dir / "broken.json", "{ not json");
  EXPECT_THROW(load_run_config(dir / "broken.json"), ConfigError);
}

TEST(Trainer, BatchOrderCoversEachEpoch) {
  const std::size_t n = 10, B = 4;
  std::vector<std::size_t> seen;
  for (std::size_t s = 0; s < 5; ++s) {
    const auto b = batch_indices(3, n, B, s);
    ASSERT_EQ(b.size(), B);
    seen.insert(seen.end(), b.begin(), b.end());
  }
  std::set<std::size_t> first(seen.begin(), seen.begin() + 10), second(seen.begin() + 10, seen.end());
  EXPECT_EQ(first.size(), n);
  EXPECT_EQ(second.size(), n);
  EXPECT_EQ(batch_indices(3, n, B, 2), batch_indices(3, n, B, 2));
  EXPECT_NE(batch_indices(3, n, B, 0), batch_indices(4, n, B, 0));
}

TEST(Trainer, IdenticalConfigsGiveByteIdenticalMetrics) {
  const fs::path a = tiny::fresh_dir("det_a"), b = tiny::fresh_dir("det_b");
  RunConfig ca = tiny::run_config(Variant::vra, a);
  RunConfig cb = tiny::run_config(Variant::vra, b);
  train(ca);
  train(cb);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "eval.csv"), slurp(b / "eval.csv"));
  EXPECT_EQ(slurp(a / "metrics.csv").substr(0, 41), std::string(kMetricsHeader) + "\n");
  EXPECT_EQ(slurp(a / "eval.csv").rfind(std::string(kEvalHeader) + "\n", 0), 0u);
  const auto rows = read_numeric_csv(a / "metrics.csv", kMetricsHeader);
  ASSERT_EQ(rows.size(), ca.steps);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i][0], double(i + 1));
    EXPECT_NEAR(rows[i][3], rows[i][1] + 0.5 * rows[i][2], 1e-12);
    EXPECT_EQ(rows[i][4], 0.0);
  }
  // Evaluations at 5, 10 and the final step.
  EXPECT_EQ(read_numeric_csv(a / "eval.csv", kEvalHeader).size(), 3u);
  const auto ckpt = latest_checkpoint(a);
  ASSERT_TRUE(ckpt);
  EXPECT_EQ(ckpt->filename(), "step_000012.vrt");
  EXPECT_EQ(slurp(*ckpt), slurp(*latest_checkpoint(b)));

  ca.seeds.train = 99;
  ca.output_dir = tiny::fresh_dir("det_c").string();
  train(ca);
  EXPECT_NE(slurp(a / "metrics.csv"), slurp(fs::path(ca.output_dir) / "metrics.csv"));
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  for (auto v : {Variant::vra, Variant::residual_pre}) {
    const fs::path full = tiny::fresh_dir("resume_full"), part = tiny::fresh_dir("resume_part");
    const RunConfig cf = tiny::run_config(v, full), cp = tiny::run_config(v, part);
    const TrainResult rf = train(cf);
    TrainOptions stop;
    stop.stop_after = 7;
    EXPECT_EQ(train(cp, stop).final_step, 7u);
    ASSERT_TRUE(latest_checkpoint(part));
    EXPECT_EQ(latest_checkpoint(part)->filename(), "step_000007.vrt");
    TrainOptions resume;
    resume.resume = true;
    const TrainResult rp = train(cp, resume);
    EXPECT_EQ(rp.metrics.front().step, 8u);
    EXPECT_EQ(slurp(full / "metrics.csv"), slurp(part / "metrics.csv")) << to_string(v);
    EXPECT_EQ(slurp(full / "eval.csv"), slurp(part / "eval.csv")) << to_string(v);
    EXPECT_EQ(rf.params, rp.params);
  }
}

TEST(Trainer, ResumeRejectsChangedConfig) {
  const fs::path dir = tiny::fresh_dir("resume_changed");
  RunConfig c = tiny::run_config(Variant::vra, dir);
  TrainOptions stop;
  stop.stop_after = 3;
  train(c, stop);
  c.model.lambda = 1.0;
  TrainOptions resume;
  resume.resume = true;
  EXPECT_THROW(train(c, resume), ConfigError);
}

TEST(Checkpoint, RoundTripAndMismatch) {
  const fs::path dir = tiny::fresh_dir("ckpt");
  const ModelConfig cfg = tiny::model_config(Variant::vra);
  const ModelParams p = init_params(cfg, 3);
  AdamState st;
  st.step = 4;
  st.m["phi.b1"] = Tensor({cfg.hidden}, 0.5);
  st.v["phi.b1"] = Tensor({cfg.hidden}, 0.25);
  save_checkpoint(dir / "c.vrt", p, cfg, nullptr, &st);
  const Checkpoint ck = load_checkpoint(dir / "c.vrt", &cfg);
  EXPECT_EQ(ck.params, p);
  ASSERT_TRUE(ck.adam);
  EXPECT_EQ(ck.adam->step, 4u);
  EXPECT_EQ(ck.adam->v.at("phi.b1"), st.v.at("phi.b1"));

  ModelConfig other = cfg;
  other.hidden = 8;
  try {
    load_checkpoint(dir / "c.vrt", &other);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("hidden"), std::string::npos);
  }
  ModelParams missing = p;
  missing.tensors.erase("pi.l1.w3");
  save_checkpoint(dir / "m.vrt", missing, cfg);
  EXPECT_THROW(load_checkpoint(dir / "m.vrt"), ConfigError);

  std::string bytes = slurp(dir / "c.vrt");
  bytes[1] = 'Z';
  write_file(dir / "bad.vrt", bytes);
  EXPECT_THROW(load_checkpoint(dir / "bad.vrt"), FormatError);
}

TEST(Experiments, AnalysesCompareAndAblate) {
  const fs::path root = tiny::fresh_dir("experiments");
  RunConfig cv = tiny::run_config(Variant::vra, root / "vra");
  RunConfig cb = tiny::run_config(Variant::baseline, root / "base");
  cv.steps = cb.steps = 25;
  cv.eval_every = cb.eval_every = 25;
  train(cv);
  train(cb);

  const LoadedRun run = load_run(root / "vra");
  EXPECT_EQ(run.step, 25u);
  const auto prof = analyze_profile(run);
  EXPECT_EQ(prof.values.size(), cv.model.layers);
  EXPECT_TRUE(fs::exists(root / "vra/analysis/profile.csv"));
  analyze_entropy(run);
  EXPECT_TRUE(fs::exists(root / "vra/analysis/entropy.csv"));
  const auto ppms = analyze_pca(run, 1, 4);
  EXPECT_EQ(ppms.size(), 3 * cv.probe.pca_items);
  for (const auto& p : ppms) EXPECT_EQ(slurp(p).rfind("P3\n12 12\n255\n", 0), 0u);
  const auto perm = analyze_permutation(run);
  EXPECT_EQ(perm.items, run.data.split_indices(true).size());

  const nlohmann::json cmp = compare_runs(root / "vra", root / "base", root / "cmp");
  EXPECT_TRUE(fs::exists(root / "cmp/comparison.json"));
  EXPECT_EQ(slurp(root / "cmp/comparison.csv").rfind("metric,a,b,delta,winner\n", 0), 0u);
  for (const char* key : {"acc_count_spatial", "cknna_aligned", "entropy_aligned", "permute_delta_spatial"})
    EXPECT_TRUE(cmp.at("metrics").contains(key)) << key;

  RunConfig other = tiny::run_config(Variant::baseline, root / "other");
  other.seeds.data = other.data.seed = 8;
  other.steps = 3;
  train(other);
  EXPECT_THROW(compare_runs(root / "vra", root / "other", root / "cmp2"), ConfigError);

  RunConfig base = tiny::run_config(Variant::baseline, root / "unused");
  base.steps = 25;
  base.eval_every = 25;
  const nlohmann::json ab = ablate(base, AblationAxis::objective, {"cosine", "relation"}, root / "ablate");
  EXPECT_EQ(ab.at("runs").size(), 2u);
  EXPECT_TRUE(fs::exists(root / "ablate/objective-relation/metrics.csv"));
  EXPECT_TRUE(fs::exists(root / "ablate/ablation_objective.csv"));
  ablate(base, AblationAxis::align_layer, {"1", "1+2"}, root / "ablate");
  const auto report = nlohmann::json::parse(slurp(root / "ablate/ablation_report.json"));
  EXPECT_TRUE(report.at("axes").contains("objective"));
  EXPECT_TRUE(report.at("axes").contains("align-layer"));
  EXPECT_EQ(load_run_config(root / "ablate/align-layer-1+2/config.json").model.align_layers,
            (std::vector<std::size_t>{1, 2}));
  EXPECT_THROW(apply_ablation(base, AblationAxis::variant, "bogus"), ConfigError);
  EXPECT_THROW(apply_ablation(base, AblationAxis::align_layer, "9"), ConfigError);
}

TEST(Experiments, VraRelativeDrop) {
  const fs::path dir = tiny::fresh_dir("drop");
  std::string csv = std::string(kMetricsHeader) + "\n";
  for (int s = 1; s <= 600; ++s) {
    const double v = s <= 10 ? 2.0 : (s > 490 ? 0.5 : 1.0);
    csv += std::to_string(s) + ",1," + std::to_string(v) + ",1,0\n";
  }
  write_file(dir / "m.csv", csv);
  EXPECT_DOUBLE_EQ(vra_relative_drop(dir / "m.csv", 500), 0.75);
  write_file(dir / "bad.csv", "step,x\n1,2\n");
  EXPECT_THROW(read_numeric_csv(dir / "bad.csv", kMetricsHeader), FormatError);
}

// ---- command line ----

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(const std::string& args) {
  static int n = 0;
  const fs::path dir = fs::temp_directory_path() / "viral_lab_test_cli_io";
  fs::create_directories(dir);
  const fs::path o = dir / ("out" + std::to_string(n)), e = dir / ("err" + std::to_string(n++));
  const std::string cmd = std::string(VIRAL_LAB_CLI) + " " + args + " >" + o.string() + " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  for (const char* sub : {"", "gen-data", "train", "eval", "analyze", "analyze profile", "analyze entropy",
                          "analyze pca", "permute-eval", "compare", "ablate"}) {
    const auto r = cli(std::string(sub) + " --help");
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << sub;
  }
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("frobnicate").code, 1);
  const auto r = cli("train --steps notanumber");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(cli("ablate --axis colour --values 1 --out x").code, 1);
  EXPECT_EQ(cli("eval").code, 1);
}

TEST(Cli, RuntimeErrorsExitTwo) {
  const fs::path dir = tiny::fresh_dir("cli_errors");
  EXPECT_EQ(cli("train --config " + (dir / "missing.json").string()).code, 2);
  write_file(dir / "bad.json", R"({"model": {"hidden": 10, "heads": 4}})");
  const auto r = cli("train --config " + (dir / "bad.json").string() + " --out " + (dir / "run").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_EQ(cli("eval --run " + (dir / "nothing").string()).code, 2);
}

TEST(Cli, EndToEnd) {
  const fs::path dir = tiny::fresh_dir("cli_e2e");
  RunConfig c = tiny::run_config(Variant::vra, dir / "vra");
  c.steps = 10;
  c.eval_every = 10;
  c.data_dir = (dir / "data").string();
  save_run_config(dir / "c.json", c);
  const std::string cfg = " --config " + (dir / "c.json").string();

  EXPECT_EQ(cli("gen-data" + cfg + " --out " + (dir / "data").string()).code, 0);
  EXPECT_TRUE(fs::exists(dir / "data/dataset.vrt"));
  EXPECT_EQ(cli("train" + cfg).code, 0);
  EXPECT_EQ(cli("train" + cfg + " --variant baseline --out " + (dir / "base").string()).code, 0);
  const auto ev = cli("eval --run " + (dir / "vra").string());
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_TRUE(nlohmann::json::parse(ev.out).contains("acc_count_spatial"));
  const auto prof = cli("analyze profile --run " + (dir / "vra").string() + " --seed 3");
  EXPECT_EQ(prof.code, 0) << prof.err;
  EXPECT_EQ(prof.out.rfind("layer,cknna\n", 0), 0u);
  EXPECT_EQ(cli("analyze entropy --run " + (dir / "vra").string()).code, 0);
  EXPECT_EQ(cli("analyze pca --run " + (dir / "vra").string() + " --layer 2 --scale 2").code, 0);
  EXPECT_TRUE(fs::exists(dir / "vra/analysis"));
  const auto pe = cli("permute-eval --run " + (dir / "vra").string() + " --seed 5");
  ASSERT_EQ(pe.code, 0) << pe.err;
  EXPECT_EQ(nlohmann::json::parse(pe.out).at("seed"), 5);
  EXPECT_EQ(cli("compare " + (dir / "vra").string() + " " + (dir / "base").string() + " --out " +
                (dir / "cmp").string())
                .code,
            0);
  EXPECT_TRUE(fs::exists(dir / "cmp/comparison.csv"));
  EXPECT_EQ(cli("ablate" + cfg + " --axis lambda --values 0.1,2.0 --steps 4 --out " + (dir / "abl").string()).code,
            0);
  EXPECT_TRUE(fs::exists(dir / "abl/ablation_lambda.json"));

  // An interrupted run continues with --resume.
  EXPECT_EQ(cli("train" + cfg + " --out " + (dir / "r").string() + " --stop-after 4").code, 0);
  EXPECT_EQ(cli("train" + cfg + " --out " + (dir / "r").string() + " --resume").code, 0);
  EXPECT_EQ(slurp(dir / "r/metrics.csv"), slurp(dir / "vra/metrics.csv"));
}
