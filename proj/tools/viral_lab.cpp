// viral_lab: command-line front end for data generation, training and analysis.
#include "viral_lab/error.hpp"
#include "viral_lab/evaluate.hpp"
#include "viral_lab/experiments.hpp"
#include "viral_lab/metrics.hpp"
#include "viral_lab/run_config.hpp"
#include "viral_lab/trainer.hpp"

#include "CLI11.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace viral;

namespace {

void log_line(const std::string& s) { std::cerr << s << std::endl; }

RunConfig base_config(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

struct SeedFlags {
  std::optional<std::uint64_t> data, init, train;

  void add(CLI::App* cmd) {
    cmd->add_option("--data-seed", data, "Seed for scenes, questions and the split");
    cmd->add_option("--init-seed", init, "Seed for parameter initialization");
    cmd->add_option("--train-seed", train, "Seed for batch shuffling");
  }
  void apply(RunConfig& c) const {
    if (data) c.seeds.data = c.data.seed = *data;
    if (init) c.seeds.init = *init;
    if (train) c.seeds.train = *train;
  }
};

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual representation alignment lab: toy multimodal LM training and analysis", "viral_lab"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset and write it to disk");
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::optional<std::size_t> gen_n, gen_grid;
  gen->add_option("--config", gen_config, "Run config JSON (data, encoder and teacher specs)");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Data seed");
  gen->add_option("--n-samples", gen_n, "Number of items");
  gen->add_option("--grid", gen_grid, "Grid size G");

  // train
  auto* tr = app.add_subcommand("train", "Train one run");
  std::string tr_config, tr_out, tr_variant;
  std::optional<std::size_t> tr_steps, tr_stop;
  bool tr_resume = false;
  SeedFlags tr_seeds;
  tr->add_option("--config", tr_config, "Run config JSON");
  tr->add_option("--out", tr_out, "Output directory (overrides output_dir)");
  tr->add_option("--steps", tr_steps, "Total steps (overrides steps)");
  tr->add_option("--variant", tr_variant, "baseline|residual_post|residual_pre|vra");
  tr->add_option("--stop-after", tr_stop, "Stop after this many steps (checkpointed; continue with --resume)");
  tr->add_flag("--resume", tr_resume, "Continue from the latest checkpoint in the output directory");
  tr_seeds.add(tr);

  // eval
  auto* ev = app.add_subcommand("eval", "Exact-match accuracy of a run's latest checkpoint");
  std::string ev_run, ev_split = "eval";
  ev->add_option("--run", ev_run, "Run directory")->required();
  ev->add_option("--split", ev_split, "eval|train")->check(CLI::IsMember({"eval", "train"}));

  // analyze
  auto* an = app.add_subcommand("analyze", "Analysis of a trained run");
  an->require_subcommand(1);
  std::string an_run;
  auto* an_profile = an->add_subcommand("profile", "Layer-wise CKNNA against the alignment targets");
  std::string an_target = "teacher";
  std::optional<std::uint64_t> an_seed;
  std::optional<std::size_t> an_k, an_tokens;
  an_profile->add_option("--run", an_run, "Run directory")->required();
  an_profile->add_option("--target", an_target, "teacher|encoder")->check(CLI::IsMember({"teacher", "encoder"}));
  an_profile->add_option("--seed", an_seed, "Token subsampling seed");
  an_profile->add_option("--k", an_k, "Neighbourhood size");
  an_profile->add_option("--tokens", an_tokens, "Number of pooled tokens");
  auto* an_entropy = an->add_subcommand("entropy", "Attention spatial entropy per layer and head");
  an_entropy->add_option("--run", an_run, "Run directory")->required();
  auto* an_pca = an->add_subcommand("pca", "PCA RGB images (PPM) of visual states");
  std::optional<std::size_t> an_layer;
  std::size_t an_scale = 16;
  an_pca->add_option("--run", an_run, "Run directory")->required();
  an_pca->add_option("--layer", an_layer, "Layer (default: first aligned layer)");
  an_pca->add_option("--scale", an_scale, "Pixels per token");

  // permute-eval
  auto* pe = app.add_subcommand("permute-eval", "Accuracy under a seeded visual-token shuffle");
  std::string pe_run;
  std::optional<std::uint64_t> pe_seed;
  pe->add_option("--run", pe_run, "Run directory")->required();
  pe->add_option("--seed", pe_seed, "Permutation seed");

  // compare
  auto* cmp = app.add_subcommand("compare", "Side-by-side report of two runs");
  std::string cmp_a, cmp_b, cmp_out;
  cmp->add_option("run_a", cmp_a, "First run directory")->required();
  cmp->add_option("run_b", cmp_b, "Second run directory")->required();
  cmp->add_option("--out", cmp_out, "Report directory (default: first run's analysis directory)");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Sweep one axis, one run directory per value");
  std::string ab_config, ab_axis, ab_values, ab_out;
  std::optional<std::size_t> ab_steps;
  SeedFlags ab_seeds;
  ab->add_option("--config", ab_config, "Base run config JSON");
  ab->add_option("--axis", ab_axis, "align-layer|lambda|objective|variant|target")
      ->required()
      ->check(CLI::IsMember({"align-layer", "lambda", "objective", "variant", "target"}));
  ab->add_option("--values", ab_values, "Comma-separated values (multi-layer sets as 3+4+5)")->required();
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--steps", ab_steps, "Steps per run (overrides steps)");
  ab_seeds.add(ab);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cerr, std::cerr);
    std::cerr << "\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (*gen) {
      RunConfig c = base_config(gen_config);
      if (gen_seed) c.seeds.data = c.data.seed = *gen_seed;
      if (gen_n) c.data.n_samples = *gen_n;
      if (gen_grid) {
        c.data.grid = *gen_grid;
        c.model.visual_tokens = *gen_grid * *gen_grid;
      }
      const Dataset d = build_dataset(c.dataset_spec(), c.encoder, c.teacher);
      save_dataset(d, gen_out);
      std::cout << "wrote " << d.items.size() << " items to " << gen_out << std::endl;
    } else if (*tr) {
      RunConfig c = base_config(tr_config);
      if (!tr_out.empty()) c.output_dir = tr_out;
      if (tr_steps) c.steps = *tr_steps;
      if (!tr_variant.empty()) c.model.variant = variant_from_string(tr_variant);
      tr_seeds.apply(c);
      c.validate();
      TrainOptions o;
      o.resume = tr_resume;
      o.stop_after = tr_stop;
      o.log = log_line;
      const TrainResult r = train(c, o);
      std::cout << "trained " << c.output_dir << " to step " << r.final_step << std::endl;
    } else if (*ev) {
      const LoadedRun run = load_run(ev_run);
      const auto items = eval_items(run.data, ev_split == "eval");
      const AccuracyReport r = evaluate(run.params, run.cfg.model, items);
      nlohmann::json j = {{"split", ev_split},
                          {"step", run.step},
                          {"acc_count", r.accuracy(Category::count)},
                          {"acc_spatial", r.accuracy(Category::spatial)},
                          {"acc_exist", r.accuracy(Category::exist)},
                          {"acc_all", r.overall()},
                          {"acc_count_spatial", r.count_spatial()},
                          {"items", items.size()}};
      fs::create_directories(run.analysis_dir());
      std::ofstream(run.analysis_dir() / ("eval_" + ev_split + ".json")) << j.dump(2) << "\n";
      print_json(j);
    } else if (*an) {
      LoadedRun run = load_run(an_run);
      if (*an_profile) {
        if (an_seed) run.cfg.probe.profile_seed = *an_seed;
        if (an_k) run.cfg.probe.cknna_k = *an_k;
        if (an_tokens) run.cfg.probe.profile_tokens = *an_tokens;
        const AlignmentProfile p = analyze_profile(run, align_target_from_string(an_target));
        std::cout << profile_csv(p);
      } else if (*an_entropy) {
        const EntropyReport r = analyze_entropy(run);
        std::cout << entropy_csv(r);
      } else if (*an_pca) {
        for (const auto& p : analyze_pca(run, an_layer.value_or(run.aligned_layer()), an_scale))
          std::cout << p.string() << "\n";
      }
    } else if (*pe) {
      const LoadedRun run = load_run(pe_run);
      print_json(to_json(analyze_permutation(run, pe_seed)));
    } else if (*cmp) {
      const fs::path out = cmp_out.empty() ? fs::path(cmp_a) / "analysis" : fs::path(cmp_out);
      const nlohmann::json report = compare_runs(cmp_a, cmp_b, out);
      print_json(report.at("metrics"));
    } else if (*ab) {
      RunConfig c = base_config(ab_config);
      if (ab_steps) c.steps = *ab_steps;
      ab_seeds.apply(c);
      AblationOptions o;
      o.log = log_line;
      const nlohmann::json report =
          ablate(c, ablation_axis_from_string(ab_axis), split_values(ab_values), ab_out, o);
      std::cout << "wrote " << report.at("runs").size() << " runs to " << ab_out << std::endl;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
