#include "viral_lab/experiments.hpp"

#include "viral_lab/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace viral {

namespace fs = std::filesystem;

LoadedRun load_run(const fs::path& dir) {
  LoadedRun run;
  run.dir = dir;
  run.cfg = load_run_config(dir / "config.json");
  const auto ck_path = latest_checkpoint(dir);
  if (!ck_path) throw Error("no checkpoint in " + dir.string());
  Checkpoint ck = load_checkpoint(*ck_path, &run.cfg.model);
  run.params = std::move(ck.params);
  run.step = ck.adam ? ck.adam->step : 0;
  run.data = load_or_build_dataset(run.cfg);
  return run;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::optional<nlohmann::json> read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<const DataItem*> eval_split(const LoadedRun& run) {
  std::vector<const DataItem*> out;
  for (auto i : run.data.split_indices(true)) out.push_back(&run.data.items[i]);
  return out;
}

}  // namespace

AlignmentProfile analyze_profile(const LoadedRun& run, AlignTarget target) {
  const auto eval = eval_split(run);
  const std::size_t n = std::min(run.cfg.probe.profile_scenes, eval.size());
  std::vector<Scene> scenes;
  std::map<std::uint64_t, const DataItem*> by_id;
  for (std::size_t i = 0; i < n; ++i) {
    scenes.push_back(eval[i]->scene);
    by_id[eval[i]->scene.id] = eval[i];
  }
  const FeatureFn features = [&](const Scene& s) -> Tensor {
    const DataItem* item = by_id.at(s.id);
    return target == AlignTarget::encoder ? item->z : item->y;
  };
  ProfileOptions opts;
  opts.k = run.cfg.probe.cknna_k;
  opts.tokens = run.cfg.probe.profile_tokens;
  opts.seed = run.cfg.probe.profile_seed;
  const AlignmentProfile p =
      alignment_profile(run.params, run.cfg.model, scenes, VisualEncoder(run.cfg.encoder), features, opts);
  nlohmann::json j = to_json(p);
  j["target"] = to_string(target);
  j["checkpoint_step"] = run.step;
  write_text(run.analysis_dir() / "profile.csv", profile_csv(p));
  write_json(run.analysis_dir() / "profile.json", j);
  return p;
}

EntropyReport analyze_entropy(const LoadedRun& run) {
  std::vector<EntropyProbe> probes;
  for (const DataItem* item : eval_split(run)) {
    if (probes.size() >= run.cfg.probe.entropy_items) break;
    if (item->qa.category == Category::spatial) probes.push_back({&item->z, &item->qa});
  }
  const EntropyReport r = entropy_report(run.params, run.cfg.model, probes);
  nlohmann::json j = to_json(r);
  j["checkpoint_step"] = run.step;
  write_text(run.analysis_dir() / "entropy.csv", entropy_csv(r));
  write_json(run.analysis_dir() / "entropy.json", j);
  return r;
}

std::vector<fs::path> analyze_pca(const LoadedRun& run, std::size_t layer, std::size_t scale) {
  if (layer < 1 || layer > run.cfg.model.layers) throw ConfigError("pca layer out of range");
  const auto eval = eval_split(run);
  const std::size_t grid = run.cfg.data.grid;
  const std::size_t bos[] = {tok::bos};
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < std::min(run.cfg.probe.pca_items, eval.size()); ++i) {
    const DataItem& item = *eval[i];
    const ForwardTrace trace = forward(run.params, run.cfg.model, item.z, bos);
    const std::string suffix = "_scene" + std::to_string(item.scene.id) + ".ppm";
    const std::pair<std::string, const Tensor*> images[] = {
        {"pca_layer" + std::to_string(layer) + suffix, &extract_visual_states(trace, layer)},
        {"pca_encoder" + suffix, &item.z},
        {"pca_teacher" + suffix, &item.y}};
    for (const auto& [name, features] : images) {
      const fs::path path = run.analysis_dir() / name;
      fs::create_directories(path.parent_path());
      write_ppm(path, pca_rgb(*features, grid), scale);
      written.push_back(path);
    }
  }
  return written;
}

PermutationReport analyze_permutation(const LoadedRun& run, std::optional<std::uint64_t> seed) {
  const auto items = eval_items(run.data, true);
  PermutationOptions opts;
  opts.seed = seed.value_or(run.cfg.probe.permute_seed);
  const PermutationReport r = permutation_eval(run.params, run.cfg.model, items, opts);
  nlohmann::json j = to_json(r);
  j["checkpoint_step"] = run.step;
  write_json(run.analysis_dir() / "permute.json", j);
  return r;
}

std::vector<std::vector<double>> read_numeric_csv(const fs::path& path, const std::string& header) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header) throw FormatError(path.string() + ": expected header " + header);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

double vra_relative_drop(const fs::path& metrics_csv, std::size_t window) {
  const auto rows = read_numeric_csv(metrics_csv, kMetricsHeader);
  std::vector<double> vra;
  for (const auto& r : rows)
    if (r[0] <= static_cast<double>(window)) vra.push_back(r[2]);
  if (vra.size() < 20) throw Error(metrics_csv.string() + ": fewer than 20 logged steps in the window");
  const double early = std::accumulate(vra.begin(), vra.begin() + 10, 0.0) / 10.0;
  const double late = std::accumulate(vra.end() - 10, vra.end(), 0.0) / 10.0;
  if (early == 0.0) return 0.0;
  return (early - late) / std::abs(early);
}

nlohmann::json run_summary(const fs::path& dir) {
  const LoadedRun run = load_run(dir);
  const fs::path adir = run.analysis_dir();
  auto cached = [&](const char* name) -> std::optional<nlohmann::json> {
    auto j = read_json(adir / name);
    if (j && j->value("checkpoint_step", std::size_t{0}) == run.step) return j;
    return std::nullopt;
  };

  nlohmann::json profile = cached("profile.json").value_or(nlohmann::json());
  if (profile.is_null() || profile.value("target", std::string()) != "teacher") {
    analyze_profile(run, AlignTarget::teacher);
    profile = *read_json(adir / "profile.json");
  }
  nlohmann::json entropy = cached("entropy.json").value_or(nlohmann::json());
  if (entropy.is_null()) {
    analyze_entropy(run);
    entropy = *read_json(adir / "entropy.json");
  }
  nlohmann::json permute = cached("permute.json").value_or(nlohmann::json());
  if (permute.is_null() || permute.value("seed", std::uint64_t{0}) != run.cfg.probe.permute_seed) {
    analyze_permutation(run);
    permute = *read_json(adir / "permute.json");
  }

  const auto evals = read_numeric_csv(dir / "eval.csv", kEvalHeader);
  const auto metrics = read_numeric_csv(dir / "metrics.csv", kMetricsHeader);
  if (evals.empty()) throw Error(dir.string() + ": eval.csv has no rows");
  std::array<std::size_t, kCategoryCount> counts{};
  for (auto i : run.data.split_indices(true)) ++counts[static_cast<std::size_t>(run.data.items[i].qa.category)];
  const auto& last = evals.back();
  const double cs_total = static_cast<double>(counts[0] + counts[1]);
  const double acc_cs =
      cs_total > 0 ? (last[1] * static_cast<double>(counts[0]) + last[2] * static_cast<double>(counts[1])) / cs_total
                   : 0.0;

  nlohmann::json curve = nlohmann::json::array();
  for (const auto& r : evals)
    curve.push_back({{"step", r[0]}, {"acc_count", r[1]}, {"acc_spatial", r[2]}, {"acc_exist", r[3]}, {"acc_all", r[4]}});
  const std::size_t tail = std::min<std::size_t>(50, metrics.size());
  double lm_tail = 0.0, vra_tail = 0.0;
  for (std::size_t i = metrics.size() - tail; i < metrics.size(); ++i) {
    lm_tail += metrics[i][1] / static_cast<double>(tail);
    vra_tail += metrics[i][2] / static_cast<double>(tail);
  }

  const std::size_t layer = run.aligned_layer();
  const auto cknna = profile.at("cknna").get<std::vector<double>>();
  const auto ent = entropy.at("layer_mean").get<std::vector<double>>();
  nlohmann::json s = {
      {"dir", dir.string()},
      {"variant", to_string(run.cfg.model.variant)},
      {"objective", to_string(run.cfg.model.objective)},
      {"align_layers", run.cfg.model.align_layers},
      {"lambda", run.cfg.model.lambda},
      {"align_target", to_string(run.cfg.align_target)},
      {"data_seed", run.cfg.seeds.data},
      {"final_step", run.step},
      {"eval_counts", counts},
      {"final",
       {{"acc_count", last[1]},
        {"acc_spatial", last[2]},
        {"acc_exist", last[3]},
        {"acc_all", last[4]},
        {"acc_count_spatial", acc_cs}}},
      {"eval_curve", curve},
      {"lm_loss_tail", lm_tail},
      {"vra_loss_tail", vra_tail},
      {"aligned_layer", layer},
      {"cknna", cknna},
      {"cknna_aligned", cknna.at(layer - 1)},
      {"entropy_layer_mean", ent},
      {"entropy_aligned", ent.at(layer - 1)},
      {"permute", permute},
      {"permute_delta_all", permute.at("delta")},
      {"permute_delta_spatial", permute.at("per_category").at("spatial").at("delta")}};
  if (metrics.size() >= 20) s["vra_drop_500"] = vra_relative_drop(dir / "metrics.csv", 500);
  write_json(adir / "summary.json", s);
  return s;
}

nlohmann::json compare_runs(const fs::path& a, const fs::path& b, const fs::path& out_dir) {
  const RunConfig ca = load_run_config(a / "config.json");
  const RunConfig cb = load_run_config(b / "config.json");
  if (ca.seeds.data != cb.seeds.data)
    throw ConfigError("runs use different data seeds (" + std::to_string(ca.seeds.data) + " vs " +
                      std::to_string(cb.seeds.data) + "); the comparison would be invalid");
  const nlohmann::json sa = run_summary(a);
  const nlohmann::json sb = run_summary(b);

  // Report CKNNA and entropy at the layer the aligned side was trained on.
  std::size_t layer = ca.model.align_layers.front();
  if (ca.model.variant != Variant::vra && cb.model.variant == Variant::vra) layer = cb.model.align_layers.front();
  const auto ka = sa.at("cknna").get<std::vector<double>>();
  const auto kb = sb.at("cknna").get<std::vector<double>>();
  const auto ea = sa.at("entropy_layer_mean").get<std::vector<double>>();
  const auto eb = sb.at("entropy_layer_mean").get<std::vector<double>>();
  if (layer > ka.size() || layer > kb.size()) throw ConfigError("runs have different depths");

  struct Metric {
    std::string name;
    double a, b;
    bool higher_better;
  };
  const auto fa = sa.at("final"), fb = sb.at("final");
  const std::vector<Metric> list = {
      {"acc_count", fa.at("acc_count"), fb.at("acc_count"), true},
      {"acc_spatial", fa.at("acc_spatial"), fb.at("acc_spatial"), true},
      {"acc_exist", fa.at("acc_exist"), fb.at("acc_exist"), true},
      {"acc_all", fa.at("acc_all"), fb.at("acc_all"), true},
      {"acc_count_spatial", fa.at("acc_count_spatial"), fb.at("acc_count_spatial"), true},
      {"cknna_aligned", ka[layer - 1], kb[layer - 1], true},
      {"entropy_aligned", ea[layer - 1], eb[layer - 1], false},
      {"permute_delta_all", sa.at("permute_delta_all"), sb.at("permute_delta_all"), true},
      {"permute_delta_spatial", sa.at("permute_delta_spatial"), sb.at("permute_delta_spatial"), true},
      {"lm_loss_tail", sa.at("lm_loss_tail"), sb.at("lm_loss_tail"), false},
  };
  nlohmann::json rows = nlohmann::json::object();
  std::ostringstream csv;
  csv.precision(17);
  csv << "metric,a,b,delta,winner\n";
  for (const auto& m : list) {
    const double delta = m.a - m.b;
    const char* winner = delta == 0.0 ? "tie" : ((delta > 0.0) == m.higher_better ? "a" : "b");
    rows[m.name] = {{"a", m.a},
                    {"b", m.b},
                    {"delta", delta},
                    {"better", m.higher_better ? "higher" : "lower"},
                    {"winner", winner}};
    csv << m.name << ',' << m.a << ',' << m.b << ',' << delta << ',' << winner << '\n';
  }
  nlohmann::json report = {{"a", {{"dir", a.string()}, {"variant", sa.at("variant")}, {"objective", sa.at("objective")}}},
                           {"b", {{"dir", b.string()}, {"variant", sb.at("variant")}, {"objective", sb.at("objective")}}},
                           {"data_seed", ca.seeds.data},
                           {"layer", layer},
                           {"metrics", rows},
                           {"eval_curves", {{"a", sa.at("eval_curve")}, {"b", sb.at("eval_curve")}}},
                           {"cknna_profiles", {{"a", ka}, {"b", kb}}},
                           {"entropy_layer_mean", {{"a", ea}, {"b", eb}}},
                           {"permute", {{"a", sa.at("permute")}, {"b", sb.at("permute")}}}};
  fs::create_directories(out_dir);
  write_json(out_dir / "comparison.json", report);
  write_text(out_dir / "comparison.csv", csv.str());
  return report;
}

std::string_view to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::align_layer: return "align-layer";
    case AblationAxis::lambda: return "lambda";
    case AblationAxis::objective: return "objective";
    case AblationAxis::variant: return "variant";
    case AblationAxis::target: return "target";
  }
  return "?";
}

AblationAxis ablation_axis_from_string(std::string_view s) {
  for (auto a : {AblationAxis::align_layer, AblationAxis::lambda, AblationAxis::objective, AblationAxis::variant,
                 AblationAxis::target})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown ablation axis '" + std::string(s) +
                    "' (expected align-layer|lambda|objective|variant|target)");
}

RunConfig apply_ablation(const RunConfig& base, AblationAxis axis, const std::string& value) {
  RunConfig c = base;
  try {
    switch (axis) {
      case AblationAxis::align_layer: {
        c.model.variant = Variant::vra;
        c.model.align_layers.clear();
        std::stringstream ss(value);
        std::string part;
        while (std::getline(ss, part, '+')) c.model.align_layers.push_back(std::stoul(part));
        break;
      }
      case AblationAxis::lambda:
        c.model.variant = Variant::vra;
        c.model.lambda = std::stod(value);
        break;
      case AblationAxis::objective:
        c.model.variant = Variant::vra;
        c.model.objective = objective_from_string(value);
        break;
      case AblationAxis::variant:
        c.model.variant = variant_from_string(value);
        break;
      case AblationAxis::target:
        c.model.variant = Variant::vra;
        c.align_target = align_target_from_string(value);
        c.model.teacher_dim = c.align_target == AlignTarget::encoder ? c.encoder.output_dim : c.teacher.output_dim;
        break;
    }
  } catch (const std::logic_error&) {
    throw ConfigError("bad value '" + value + "' for ablation axis " + std::string(to_string(axis)));
  }
  c.validate();
  return c;
}

nlohmann::json ablate(const RunConfig& base, AblationAxis axis, const std::vector<std::string>& values,
                      const fs::path& out_dir, const AblationOptions& opts) {
  if (values.empty()) throw ConfigError("ablate needs at least one value");
  std::vector<RunConfig> configs;
  for (const auto& v : values) {
    RunConfig c = apply_ablation(base, axis, v);
    c.output_dir = (out_dir / (std::string(to_string(axis)) + "-" + v)).string();
    configs.push_back(std::move(c));
  }
  const Dataset data = load_or_build_dataset(base);
  const std::string axis_name(to_string(axis));
  nlohmann::json runs = nlohmann::json::array();
  std::ostringstream csv;
  csv.precision(17);
  csv << "value,dir,variant,objective,align_layers,lambda,align_target,acc_count,acc_spatial,acc_exist,acc_all,"
         "cknna_aligned,entropy_aligned,permute_delta_spatial,vra_drop_500\n";
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (opts.log) opts.log("ablate " + axis_name + "=" + values[i] + " -> " + configs[i].output_dir);
    TrainOptions to;
    to.data = &data;
    to.log = opts.log;
    train(configs[i], to);
    nlohmann::json s = run_summary(configs[i].output_dir);
    s["value"] = values[i];
    std::string layers;
    for (auto l : configs[i].model.align_layers) layers += (layers.empty() ? "" : "+") + std::to_string(l);
    const auto& f = s.at("final");
    csv << values[i] << ',' << configs[i].output_dir << ',' << s.at("variant").get<std::string>() << ','
        << s.at("objective").get<std::string>() << ',' << layers << ',' << configs[i].model.lambda << ','
        << s.at("align_target").get<std::string>() << ',' << f.at("acc_count").get<double>() << ','
        << f.at("acc_spatial").get<double>() << ',' << f.at("acc_exist").get<double>() << ','
        << f.at("acc_all").get<double>() << ',' << s.at("cknna_aligned").get<double>() << ','
        << s.at("entropy_aligned").get<double>() << ',' << s.at("permute_delta_spatial").get<double>() << ','
        << s.value("vra_drop_500", 0.0) << '\n';
    runs.push_back(std::move(s));
  }
  const nlohmann::json report = {{"axis", axis_name}, {"values", values}, {"runs", runs}};
  write_json(out_dir / ("ablation_" + axis_name + ".json"), report);
  write_text(out_dir / ("ablation_" + axis_name + ".csv"), csv.str());

  nlohmann::json aggregate = {{"axes", nlohmann::json::object()}};
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    const std::string name = entry.path().filename().string();
    if (!name.starts_with("ablation_") || entry.path().extension() != ".json" || name == "ablation_report.json")
      continue;
    if (auto j = read_json(entry.path())) aggregate["axes"][j->at("axis").get<std::string>()] = *j;
  }
  write_json(out_dir / "ablation_report.json", aggregate);
  return report;
}

}  // namespace viral
