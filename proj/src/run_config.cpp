#include "viral_lab/run_config.hpp"

#include "viral_lab/error.hpp"

#include <fstream>
#include <sstream>

namespace viral {

std::string_view to_string(AlignTarget t) { return t == AlignTarget::encoder ? "encoder" : "teacher"; }

AlignTarget align_target_from_string(std::string_view s) {
  if (s == "teacher") return AlignTarget::teacher;
  if (s == "encoder") return AlignTarget::encoder;
  throw ConfigError("unknown align target '" + std::string(s) + "' (expected teacher|encoder)");
}

DatasetSpec RunConfig::dataset_spec() const {
  DatasetSpec d = data;
  d.seed = seeds.data;
  return d;
}

void RunConfig::validate() const {
  model.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (steps == 0) throw ConfigError("steps must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (!(optimizer.lr > 0.0) || !(optimizer.eps > 0.0) || !(optimizer.clip_norm > 0.0))
    throw ConfigError("optimizer lr, eps and clip_norm must be positive");
  if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 || optimizer.beta2 >= 1.0)
    throw ConfigError("optimizer betas must lie in [0, 1)");
  if (data.n_samples == 0) throw ConfigError("data.n_samples must be positive");
  if (model.visual_tokens != data.grid * data.grid)
    throw ConfigError("model.visual_tokens (" + std::to_string(model.visual_tokens) + ") must equal data.grid^2 (" +
                      std::to_string(data.grid * data.grid) + ")");
  if (model.encoder_dim != encoder.output_dim) throw ConfigError("model.encoder_dim must equal encoder.output_dim");
  const std::size_t target_dim = align_target == AlignTarget::encoder ? encoder.output_dim : teacher.output_dim;
  if (model.teacher_dim != target_dim)
    throw ConfigError("model.teacher_dim (" + std::to_string(model.teacher_dim) +
                      ") must equal the alignment target width (" + std::to_string(target_dim) + ")");
  if (model.max_text < kMaxTextTokens) throw ConfigError("model.max_text must be at least 24");
  if (model.vocab_size < kVocabSize) throw ConfigError("model.vocab_size smaller than the word vocabulary");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json data = c.dataset_spec();
  data.erase("seed");
  j = {{"model", c.model},
       {"optimizer",
        {{"lr", c.optimizer.lr},
         {"beta1", c.optimizer.beta1},
         {"beta2", c.optimizer.beta2},
         {"eps", c.optimizer.eps},
         {"clip_norm", c.optimizer.clip_norm}}},
       {"batch_size", c.batch_size},
       {"steps", c.steps},
       {"eval_every", c.eval_every},
       {"seeds", {{"data", c.seeds.data}, {"init", c.seeds.init}, {"train", c.seeds.train}}},
       {"data", data},
       {"encoder", c.encoder},
       {"teacher", c.teacher},
       {"align_target", to_string(c.align_target)},
       {"probe",
        {{"profile_scenes", c.probe.profile_scenes},
         {"profile_tokens", c.probe.profile_tokens},
         {"cknna_k", c.probe.cknna_k},
         {"profile_seed", c.probe.profile_seed},
         {"entropy_items", c.probe.entropy_items},
         {"permute_seed", c.probe.permute_seed},
         {"pca_items", c.probe.pca_items}}},
       {"output_dir", c.output_dir},
       {"data_dir", c.data_dir},
       {"log_wall_time", c.log_wall_time},
       {"keep_all_checkpoints", c.keep_all_checkpoints}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown_keys(j,
                      {"model", "optimizer", "batch_size", "steps", "eval_every", "seeds", "data", "encoder",
                       "teacher", "align_target", "probe", "output_dir", "data_dir", "log_wall_time",
                       "keep_all_checkpoints"},
                      "run config");
  RunConfig d;
  c = d;
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    reject_unknown_keys(s, {"data", "init", "train"}, "seeds");
    c.seeds.data = s.value("data", d.seeds.data);
    c.seeds.init = s.value("init", d.seeds.init);
    c.seeds.train = s.value("train", d.seeds.train);
  }
  if (j.contains("data")) {
    if (j.at("data").contains("seed")) throw ConfigError("the data seed belongs in seeds.data");
    c.data = j.at("data").get<DatasetSpec>();
  }
  c.data.seed = c.seeds.data;
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderSpec>();
  if (j.contains("teacher")) c.teacher = j.at("teacher").get<TeacherSpec>();
  c.align_target = align_target_from_string(j.value("align_target", std::string("teacher")));

  nlohmann::json model = j.value("model", nlohmann::json::object());
  if (!model.contains("visual_tokens")) model["visual_tokens"] = c.data.grid * c.data.grid;
  if (!model.contains("encoder_dim")) model["encoder_dim"] = c.encoder.output_dim;
  if (!model.contains("teacher_dim"))
    model["teacher_dim"] = c.align_target == AlignTarget::encoder ? c.encoder.output_dim : c.teacher.output_dim;
  c.model = model.get<ModelConfig>();

  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    reject_unknown_keys(o, {"lr", "beta1", "beta2", "eps", "clip_norm"}, "optimizer");
    c.optimizer.lr = o.value("lr", d.optimizer.lr);
    c.optimizer.beta1 = o.value("beta1", d.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", d.optimizer.beta2);
    c.optimizer.eps = o.value("eps", d.optimizer.eps);
    c.optimizer.clip_norm = o.value("clip_norm", d.optimizer.clip_norm);
  }
  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    reject_unknown_keys(p,
                        {"profile_scenes", "profile_tokens", "cknna_k", "profile_seed", "entropy_items",
                         "permute_seed", "pca_items"},
                        "probe");
    c.probe.profile_scenes = p.value("profile_scenes", d.probe.profile_scenes);
    c.probe.profile_tokens = p.value("profile_tokens", d.probe.profile_tokens);
    c.probe.cknna_k = p.value("cknna_k", d.probe.cknna_k);
    c.probe.profile_seed = p.value("profile_seed", d.probe.profile_seed);
    c.probe.entropy_items = p.value("entropy_items", d.probe.entropy_items);
    c.probe.permute_seed = p.value("permute_seed", d.probe.permute_seed);
    c.probe.pca_items = p.value("pca_items", d.probe.pca_items);
  }
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.output_dir = j.value("output_dir", d.output_dir);
  c.data_dir = j.value("data_dir", d.data_dir);
  c.log_wall_time = j.value("log_wall_time", d.log_wall_time);
  c.keep_all_checkpoints = j.value("keep_all_checkpoints", d.keep_all_checkpoints);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << nlohmann::json(c).dump(2) << '\n';
}

}  // namespace viral
