#include "viral_lab/trainer.hpp"

#include "viral_lab/error.hpp"
#include "viral_lab/objectives.hpp"
#include "viral_lab/rng.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

namespace viral {

namespace fs = std::filesystem;

double adam_update(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state,
                   const OptimizerConfig& opt) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.mat().squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NonFiniteError("non-finite gradient norm");
  const double clip = norm > opt.clip_norm ? opt.clip_norm / norm : 1.0;

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, p.shape());
    auto [vit, v_new] = state.v.try_emplace(name, p.shape());
    auto m = mit->second.mat().array();
    auto v = vit->second.mat().array();
    const auto gi = g.mat().array() * clip;
    m = opt.beta1 * m + (1.0 - opt.beta1) * gi;
    v = opt.beta2 * v + (1.0 - opt.beta2) * gi.square();
    p.mat().array() -= opt.lr * (m / c1) / ((v / c2).sqrt() + opt.eps);
  }
  return norm;
}

void save_checkpoint(const fs::path& path, const ModelParams& params, const ModelConfig& model, const RunConfig* run,
                     const AdamState* adam) {
  TensorContainer c;
  c.add_text("config.model", nlohmann::json(model).dump());
  if (run) {
    // Where the run lives is not part of the experiment; leaving it out keeps
    // checkpoints byte-identical across directories and lets runs be moved.
    RunConfig snapshot = *run;
    snapshot.output_dir.clear();
    c.add_text("config.run", nlohmann::json(snapshot).dump());
  }
  for (const auto& [name, t] : params.tensors) c.add(name, t);
  if (adam) {
    c.add("state.step", Tensor::scalar(static_cast<double>(adam->step)));
    for (const auto& [name, t] : adam->m) c.add("adam.m/" + name, t);
    for (const auto& [name, t] : adam->v) c.add("adam.v/" + name, t);
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_container(path, c);
}

Checkpoint load_checkpoint(const fs::path& path, const ModelConfig* expected) {
  const TensorContainer c = read_container(path);
  const auto model_text = c.text("config.model");
  if (!model_text) throw FormatError(path.string() + ": no config snapshot");
  Checkpoint ck;
  try {
    ck.model = nlohmann::json::parse(*model_text).get<ModelConfig>();
    if (auto run = c.text("config.run")) ck.run = nlohmann::json::parse(*run).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad config snapshot: " + e.what());
  }
  if (expected) {
    const auto diff = config_differences(*expected, ck.model);
    if (!diff.empty()) {
      std::string msg = "checkpoint config mismatch (expected vs stored):";
      for (const auto& d : diff) msg += "\n  " + d;
      throw ConfigError(msg);
    }
  }
  AdamState adam;
  bool has_adam = false;
  for (const auto& e : c.entries()) {
    const std::string& n = e.name;
    if (n.starts_with("config.")) continue;
    if (n == "state.step") {
      adam.step = static_cast<std::size_t>(e.tensor.item());
      has_adam = true;
    } else if (n.starts_with("adam.m/")) {
      adam.m.emplace(n.substr(7), e.tensor);
    } else if (n.starts_with("adam.v/")) {
      adam.v.emplace(n.substr(7), e.tensor);
    } else {
      ck.params.tensors.emplace(n, e.tensor);
    }
  }
  if (has_adam) ck.adam = std::move(adam);

  const ModelParams reference = init_params(ck.model, 0);
  std::vector<std::string> problems;
  for (const auto& [name, t] : reference.tensors) {
    auto it = ck.params.tensors.find(name);
    if (it == ck.params.tensors.end())
      problems.push_back("missing " + name);
    else if (it->second.shape() != t.shape())
      problems.push_back(name + ": shape " + shape_string(it->second.shape()) + " != " + shape_string(t.shape()));
  }
  for (const auto& [name, t] : ck.params.tensors)
    if (!reference.contains(name)) problems.push_back("unexpected " + name);
  if (!problems.empty()) {
    std::string msg = path.string() + ": parameters do not match the stored config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return ck;
}

std::optional<fs::path> latest_checkpoint(const fs::path& run_dir) {
  const fs::path dir = run_dir / "checkpoints";
  if (!fs::is_directory(dir)) return std::nullopt;
  static const std::regex pattern(R"(step_(\d+)\.vrt)");
  std::optional<fs::path> best;
  unsigned long long best_step = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (!std::regex_match(name, m, pattern)) continue;
    const unsigned long long s = std::stoull(m[1].str());
    if (!best || s > best_step) {
      best = entry.path();
      best_step = s;
    }
  }
  return best;
}

namespace {

bool same_specs(const Dataset& d, const RunConfig& cfg) {
  return nlohmann::json(d.spec) == nlohmann::json(cfg.dataset_spec()) &&
         nlohmann::json(d.encoder) == nlohmann::json(cfg.encoder) &&
         nlohmann::json(d.teacher) == nlohmann::json(cfg.teacher);
}

fs::path checkpoint_path(const fs::path& dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%06zu.vrt", step);
  return dir / "checkpoints" / name;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Keeps the header and the rows whose step is <= `step`.
void truncate_csv(const fs::path& path, const std::string& header, std::size_t step) {
  std::ifstream in(path);
  std::string line, kept = header + "\n";
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      if (line != header) throw FormatError(path.string() + ": unexpected header");
      continue;
    }
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) <= step) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

}  // namespace

Dataset load_or_build_dataset(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) return build_dataset(cfg.dataset_spec(), cfg.encoder, cfg.teacher);
  Dataset d = load_dataset(cfg.data_dir);
  if (!same_specs(d, cfg)) throw ConfigError("dataset in " + cfg.data_dir + " was generated with different specs");
  return d;
}

const Tensor& alignment_target(const RunConfig& cfg, const DataItem& item) {
  return cfg.align_target == AlignTarget::encoder ? item.z : item.y;
}

std::vector<std::size_t> batch_indices(std::uint64_t train_seed, std::size_t n_train, std::size_t batch_size,
                                       std::size_t step) {
  if (n_train == 0) throw ConfigError("empty training split");
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  std::size_t cached_epoch = SIZE_MAX;
  std::vector<std::size_t> perm;
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t pos = step * batch_size + b;
    const std::size_t epoch = pos / n_train;
    if (epoch != cached_epoch) {
      perm = Rng(train_seed, "epoch", epoch).permutation(n_train);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n_train]);
  }
  return out;
}

std::string format_metrics_row(const StepMetrics& m) {
  return std::to_string(m.step) + "," + fmt(m.lm) + "," + fmt(m.vra) + "," + fmt(m.total) + "," + fmt(m.wall_ms);
}

std::string format_eval_row(const EvalRecord& r) {
  return std::to_string(r.step) + "," + fmt(r.report.accuracy(Category::count)) + "," +
         fmt(r.report.accuracy(Category::spatial)) + "," + fmt(r.report.accuracy(Category::exist)) + "," +
         fmt(r.report.overall());
}

TrainResult train(const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  auto log = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };

  std::optional<Dataset> owned;
  const Dataset* data = opts.data;
  if (data) {
    if (!same_specs(*data, cfg)) throw ConfigError("supplied dataset does not match the run config");
  } else {
    owned = load_or_build_dataset(cfg);
    data = &*owned;
  }
  const auto train_idx = data->split_indices(false);
  const auto eval_list = eval_items(*data, true);
  if (train_idx.empty()) throw ConfigError("training split is empty");

  // Per-item text, targets and mask, computed once.
  std::vector<std::vector<std::size_t>> texts(data->items.size()), targets(data->items.size());
  std::vector<std::vector<double>> masks(data->items.size());
  for (std::size_t i = 0; i < data->items.size(); ++i) {
    texts[i] = full_text(data->items[i].qa);
    answer_targets(texts[i], targets[i], masks[i]);
  }

  TrainResult result;
  AdamState adam;
  std::size_t start = 0;
  const fs::path metrics_path = dir / "metrics.csv", eval_path = dir / "eval.csv";
  if (opts.resume) {
    const auto ck_path = latest_checkpoint(dir);
    if (!ck_path) throw Error("nothing to resume in " + dir.string());
    Checkpoint ck = load_checkpoint(*ck_path, &cfg.model);
    if (!ck.adam) throw FormatError(ck_path->string() + " has no optimizer state");
    if (ck.run) {
      nlohmann::json a = *ck.run, b = cfg;
      for (auto* j : {&a, &b}) {
        j->erase("steps");
        j->erase("output_dir");
      }
      if (a != b) throw ConfigError("run config differs from the checkpointed one (only steps may change)");
    }
    result.params = std::move(ck.params);
    adam = std::move(*ck.adam);
    start = adam.step;
    truncate_csv(metrics_path, kMetricsHeader, start);
    truncate_csv(eval_path, kEvalHeader, start);
    log("resuming from step " + std::to_string(start));
  } else {
    fs::remove_all(dir / "checkpoints");
    fs::remove(dir / "nonfinite.json");
    result.params = init_params(cfg.model, cfg.seeds.init);
    std::ofstream(metrics_path, std::ios::trunc) << kMetricsHeader << "\n";
    std::ofstream(eval_path, std::ios::trunc) << kEvalHeader << "\n";
  }
  save_run_config(dir / "config.json", cfg);

  std::ofstream metrics_out(metrics_path, std::ios::app);
  std::ofstream eval_out(eval_path, std::ios::app);
  if (!metrics_out || !eval_out) throw Error("cannot write metrics in " + dir.string());

  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t N = cfg.model.visual_tokens;
  const std::size_t end = opts.stop_after ? std::min(cfg.steps, *opts.stop_after) : cfg.steps;
  std::optional<fs::path> previous_ck = latest_checkpoint(dir);

  for (std::size_t s = start; s < end; ++s) {
    const auto idx = batch_indices(cfg.seeds.train, train_idx.size(), cfg.batch_size, s);
    std::vector<SequenceInput> batch;
    std::vector<std::size_t> tgt;
    std::vector<double> mask;
    std::vector<double> yrows;
    for (auto k : idx) {
      const std::size_t i = train_idx[k];
      batch.push_back({&data->items[i].z, texts[i]});
      tgt.insert(tgt.end(), targets[i].begin(), targets[i].end());
      mask.insert(mask.end(), masks[i].begin(), masks[i].end());
      if (cfg.model.variant == Variant::vra) {
        const auto& y = alignment_target(cfg, data->items[i]).data();
        yrows.insert(yrows.end(), y.begin(), y.end());
      }
    }
    std::optional<Tensor> teacher;
    if (cfg.model.variant == Variant::vra) teacher = Tensor({idx.size() * N, cfg.model.teacher_dim}, std::move(yrows));

    StepMetrics m;
    m.step = s + 1;
    try {
      Tape tape;
      BoundParams bound(tape, result.params, true);
      const BatchForward fwd = forward_batch(tape, bound, cfg.model, batch);
      const LossBreakdown loss = total_loss(tape, fwd, bound, cfg.model, tgt, mask, teacher ? &*teacher : nullptr);
      m.lm = loss.lm_value;
      m.vra = loss.vra_value;
      m.total = loss.total_value;
      if (!std::isfinite(m.total)) throw NonFiniteError("non-finite loss");
      tape.backward(loss.total);
      std::map<std::string, Tensor> grads;
      for (const auto& [name, var] : bound.vars()) grads.emplace(name, tape.take_grad(var));
      adam_update(result.params, grads, adam, cfg.optimizer);
    } catch (const NonFiniteError& e) {
      save_checkpoint(dir / "checkpoints" / ("nonfinite_step_" + std::to_string(s + 1) + ".vrt"), result.params,
                      cfg.model, &cfg, &adam);
      nlohmann::json diag = {{"step", s + 1}, {"error", e.what()}, {"lm_loss", m.lm}, {"vra_loss", m.vra},
                             {"batch", idx}};
      std::ofstream(dir / "nonfinite.json") << diag.dump(2) << "\n";
      throw NonFiniteError("training diverged at step " + std::to_string(s + 1) + ": " + e.what() +
                           " (snapshot in " + dir.string() + ")");
    }
    if (cfg.log_wall_time)
      m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics_out << format_metrics_row(m) << "\n";
    result.metrics.push_back(m);

    const bool eval_point = (s + 1) % cfg.eval_every == 0 || s + 1 == cfg.steps;
    if (eval_point) {
      EvalRecord r{s + 1, evaluate(result.params, cfg.model, eval_list)};
      eval_out << format_eval_row(r) << "\n";
      eval_out.flush();
      metrics_out.flush();
      result.evals.push_back(r);
      log("step " + std::to_string(s + 1) + " lm " + fmt(m.lm) + " vra " + fmt(m.vra) + " acc_all " +
          fmt(r.report.overall()));
    }
    if (eval_point || s + 1 == end) {
      const fs::path ck = checkpoint_path(dir, s + 1);
      save_checkpoint(ck, result.params, cfg.model, &cfg, &adam);
      if (!cfg.keep_all_checkpoints && previous_ck && *previous_ck != ck) fs::remove(*previous_ck);
      previous_ck = ck;
    }
  }
  metrics_out.flush();
  result.final_step = std::max(start, end);
  return result;
}

}  // namespace viral
