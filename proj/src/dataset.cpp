#include "viral_lab/dataset.hpp"

#include "viral_lab/container.hpp"
#include "viral_lab/error.hpp"
#include "viral_lab/parallel.hpp"
#include "viral_lab/rng.hpp"

#include <algorithm>
#include <fstream>

namespace viral {

std::string_view to_string(Category c) {
  switch (c) {
    case Category::count: return "count";
    case Category::spatial: return "spatial";
    case Category::exist: return "exist";
  }
  return "?";
}

Category category_from_string(std::string_view s) {
  if (s == "count") return Category::count;
  if (s == "spatial") return Category::spatial;
  if (s == "exist") return Category::exist;
  throw FormatError("unknown category '" + std::string(s) + "'");
}

namespace {

struct Referent {
  Color color;
  ShapeKind shape;
};

std::optional<Color> as_color(std::size_t id) {
  const std::size_t base = color_token(Color::red);
  if (id >= base && id < base + kColorCount) return static_cast<Color>(id - base);
  return std::nullopt;
}

std::optional<ShapeKind> as_shape(std::size_t id) {
  const std::size_t base = shape_token(ShapeKind::circle);
  if (id >= base && id < base + kShapeCount) return static_cast<ShapeKind>(id - base);
  return std::nullopt;
}

bool matches(std::span<const std::size_t> q, std::size_t pos, std::initializer_list<std::string_view> words) {
  if (pos + words.size() > q.size()) return false;
  for (auto w : words)
    if (q[pos++] != token_id(w)) return false;
  return true;
}

[[noreturn]] void malformed(std::span<const std::size_t> q) {
  std::string text;
  for (auto id : q) {
    if (!text.empty()) text += ' ';
    text += id < kVocabSize ? std::string(kVocabulary[id]) : "#" + std::to_string(id);
  }
  throw FormatError("malformed question: '" + text + "'");
}

Referent parse_referent(std::span<const std::size_t> q, std::size_t pos) {
  if (pos + 3 != q.size() || q[pos + 2] != token_id("?")) malformed(q);
  auto c = as_color(q[pos]);
  auto s = as_shape(q[pos + 1]);
  if (!c || !s) malformed(q);
  return {*c, *s};
}

std::optional<std::pair<std::size_t, std::size_t>> neighbour(std::size_t r, std::size_t c, Relation rel,
                                                             std::size_t grid) {
  switch (rel) {
    case Relation::left_of:
      if (c == 0) return std::nullopt;
      return std::pair{r, c - 1};
    case Relation::right_of:
      if (c + 1 >= grid) return std::nullopt;
      return std::pair{r, c + 1};
    case Relation::above:
      if (r == 0) return std::nullopt;
      return std::pair{r - 1, c};
    case Relation::below:
      if (r + 1 >= grid) return std::nullopt;
      return std::pair{r + 1, c};
  }
  return std::nullopt;
}

std::vector<std::size_t> relation_words(Relation rel) {
  switch (rel) {
    case Relation::left_of: return {token_id("left"), token_id("of")};
    case Relation::right_of: return {token_id("right"), token_id("of")};
    case Relation::above: return {token_id("above")};
    case Relation::below: return {token_id("below")};
  }
  return {};
}

std::size_t count_referent(const Scene& scene, Referent ref, std::size_t* where) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < scene.cells.size(); ++i) {
    const Cell& cell = scene.cells[i];
    if (cell && cell->color == ref.color && cell->shape == ref.shape) {
      ++n;
      if (where) *where = i;
    }
  }
  return n;
}

}  // namespace

std::vector<std::size_t> answer_oracle(const Scene& scene, std::span<const std::size_t> q) {
  if (matches(q, 0, {"how", "many"})) {
    if (q.size() != 4 || q[3] != token_id("?")) malformed(q);
    const auto c = as_color(q[2]);
    const auto s = as_shape(q[2]);
    if (!c && !s) malformed(q);
    std::size_t n = 0;
    for (const Cell& cell : scene.cells)
      if (cell && ((c && cell->color == *c) || (s && cell->shape == *s))) ++n;
    return {digit_token(n)};
  }
  if (matches(q, 0, {"is", "there", "a"})) {
    const Referent ref = parse_referent(q, 3);
    return {token_id(count_referent(scene, ref, nullptr) > 0 ? "yes" : "no")};
  }
  if (matches(q, 0, {"what", "is"})) {
    Relation rel;
    std::size_t pos = 2;
    if (matches(q, pos, {"left", "of"})) {
      rel = Relation::left_of;
      pos += 2;
    } else if (matches(q, pos, {"right", "of"})) {
      rel = Relation::right_of;
      pos += 2;
    } else if (matches(q, pos, {"above"})) {
      rel = Relation::above;
      pos += 1;
    } else if (matches(q, pos, {"below"})) {
      rel = Relation::below;
      pos += 1;
    } else {
      malformed(q);
    }
    if (!matches(q, pos, {"the"})) malformed(q);
    const Referent ref = parse_referent(q, pos + 1);
    std::size_t where = 0;
    if (count_referent(scene, ref, &where) != 1)
      throw FormatError("spatial question referent is not unique in the scene");
    const auto nb = neighbour(where / scene.grid, where % scene.grid, rel, scene.grid);
    if (!nb || !scene.at(nb->first, nb->second)) throw FormatError("spatial question has no answer cell");
    const Object& o = *scene.at(nb->first, nb->second);
    return {color_token(o.color), shape_token(o.shape)};
  }
  malformed(q);
}

Category sample_category(std::uint64_t seed) {
  const double u = Rng(seed, "category").uniform();
  if (u < 0.4) return Category::count;
  if (u < 0.8) return Category::spatial;
  return Category::exist;
}

std::optional<QASample> try_gen_qa(const Scene& scene, std::uint64_t seed, Category category, std::size_t attempts) {
  if (scene.object_count() == 0) throw Error("gen_qa needs a non-empty scene");
  Rng rng(seed, "qa");
  std::vector<std::size_t> occupied;
  for (std::size_t i = 0; i < scene.cells.size(); ++i)
    if (scene.cells[i]) occupied.push_back(i);

  for (std::size_t attempt = 0; attempt < attempts; ++attempt) {
    std::vector<std::size_t> q;
    switch (category) {
      case Category::count: {
        const std::size_t pick = rng.below(kColorCount + kShapeCount);
        const std::size_t word = pick < kColorCount ? color_token(static_cast<Color>(pick))
                                                    : shape_token(static_cast<ShapeKind>(pick - kColorCount));
        q = {token_id("how"), token_id("many"), word, token_id("?")};
        break;
      }
      case Category::spatial: {
        const auto rel = static_cast<Relation>(rng.below(4));
        const std::size_t cell = occupied[rng.below(occupied.size())];
        const Object& o = *scene.cells[cell];
        if (count_referent(scene, {o.color, o.shape}, nullptr) != 1) continue;
        const auto nb = neighbour(cell / scene.grid, cell % scene.grid, rel, scene.grid);
        if (!nb || !scene.at(nb->first, nb->second)) continue;
        q = {token_id("what"), token_id("is")};
        for (auto w : relation_words(rel)) q.push_back(w);
        q.insert(q.end(), {token_id("the"), color_token(o.color), shape_token(o.shape), token_id("?")});
        break;
      }
      case Category::exist: {
        Referent ref{};
        if (rng.uniform() < 0.5) {
          const Object& o = *scene.cells[occupied[rng.below(occupied.size())]];
          ref = {o.color, o.shape};
        } else {
          ref = {static_cast<Color>(rng.below(kColorCount)), static_cast<ShapeKind>(rng.below(kShapeCount))};
        }
        q = {token_id("is"), token_id("there"), token_id("a"), color_token(ref.color), shape_token(ref.shape),
             token_id("?")};
        break;
      }
    }
    QASample s;
    s.scene_id = scene.id;
    s.category = category;
    s.answer_tokens = answer_oracle(scene, q);
    s.question_tokens = std::move(q);
    return s;
  }
  return std::nullopt;
}

QASample gen_qa(const Scene& scene, std::uint64_t seed, std::optional<Category> category) {
  const Category cat = category ? *category : sample_category(seed);
  auto s = try_gen_qa(scene, seed, cat, 100);
  if (!s) throw Error("no valid " + std::string(to_string(cat)) + " question for scene after 100 attempts");
  return *s;
}

std::vector<std::size_t> prompt_text(const QASample& qa) {
  std::vector<std::size_t> t{tok::bos};
  t.insert(t.end(), qa.question_tokens.begin(), qa.question_tokens.end());
  t.push_back(tok::sep);
  return t;
}

std::vector<std::size_t> full_text(const QASample& qa) {
  auto t = prompt_text(qa);
  t.insert(t.end(), qa.answer_tokens.begin(), qa.answer_tokens.end());
  t.push_back(tok::eos);
  return t;
}

std::vector<std::size_t> Dataset::split_indices(bool eval) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].eval == eval) idx.push_back(i);
  return idx;
}

Dataset build_dataset(const DatasetSpec& spec, const EncoderSpec& enc, const TeacherSpec& teacher) {
  if (spec.n_samples == 0) throw ConfigError("n_samples must be at least 1");
  Dataset d{spec, enc, teacher, {}};
  d.items.resize(spec.n_samples);
  const VisualEncoder encoder(enc);
  const Teacher mentor(teacher);
  parallel_for(spec.n_samples, [&](std::size_t i) {
    const std::uint64_t item_seed = derive_seed(spec.seed, "item", i);
    const Category cat = sample_category(item_seed);
    for (std::uint64_t attempt = 0;; ++attempt) {
      Scene scene = sample_scene(derive_seed(item_seed, "scene", attempt), spec.grid);
      scene.id = i;
      auto qa = try_gen_qa(scene, derive_seed(item_seed, "question", attempt), cat, 100);
      if (!qa) continue;
      DataItem& item = d.items[i];
      item.z = encoder.encode(scene);
      item.y = mentor.features(scene);
      item.scene = std::move(scene);
      item.qa = std::move(*qa);
      item.eval = Rng(item_seed, "split").uniform() < spec.eval_fraction;
      break;
    }
  });
  return d;
}

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("unknown field '" + key + "' in " + std::string(where));
}

void to_json(nlohmann::json& j, const EncoderSpec& s) {
  j = {{"seed", s.seed},
       {"output_dim", s.output_dim},
       {"rank", s.rank},
       {"noise_sigma", s.noise_sigma},
       {"drop_position", s.drop_position}};
}

void from_json(const nlohmann::json& j, EncoderSpec& s) {
  reject_unknown_keys(j, {"seed", "output_dim", "rank", "noise_sigma", "drop_position"}, "encoder");
  EncoderSpec d;
  s.seed = j.value("seed", d.seed);
  s.output_dim = j.value("output_dim", d.output_dim);
  s.rank = j.value("rank", d.rank);
  s.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  s.drop_position = j.value("drop_position", d.drop_position);
}

void to_json(nlohmann::json& j, const TeacherSpec& s) {
  j = {{"kind", s.kind == TeacherKind::file ? "file" : "structured_synthetic"},
       {"path", s.path},
       {"output_dim", s.output_dim},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, TeacherSpec& s) {
  reject_unknown_keys(j, {"kind", "path", "output_dim", "seed"}, "teacher");
  TeacherSpec d;
  const std::string kind = j.value("kind", std::string("structured_synthetic"));
  if (kind == "structured_synthetic")
    s.kind = TeacherKind::structured_synthetic;
  else if (kind == "file")
    s.kind = TeacherKind::file;
  else
    throw ConfigError("unknown teacher kind '" + kind + "'");
  s.path = j.value("path", d.path);
  s.output_dim = j.value("output_dim", d.output_dim);
  s.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"seed", s.seed}, {"n_samples", s.n_samples}, {"grid", s.grid}, {"eval_fraction", s.eval_fraction}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  reject_unknown_keys(j, {"seed", "n_samples", "grid", "eval_fraction"}, "data");
  DatasetSpec d;
  s.seed = j.value("seed", d.seed);
  s.n_samples = j.value("n_samples", d.n_samples);
  s.grid = j.value("grid", d.grid);
  s.eval_fraction = j.value("eval_fraction", d.eval_fraction);
}

nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json cells = nlohmann::json::array();
  for (const Cell& c : scene.cells) {
    if (c)
      cells.push_back({{"shape", to_string(c->shape)}, {"color", to_string(c->color)}});
    else
      cells.push_back(nullptr);
  }
  return {{"id", scene.id}, {"seed", scene.seed}, {"grid", scene.grid}, {"cells", cells}};
}

Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.id = j.at("id").get<std::uint64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.grid = j.at("grid").get<std::size_t>();
  for (const auto& c : j.at("cells")) {
    if (c.is_null()) {
      s.cells.emplace_back(std::nullopt);
      continue;
    }
    const auto shape = as_shape(token_id(c.at("shape").get<std::string>()));
    const auto color = as_color(token_id(c.at("color").get<std::string>()));
    if (!shape || !color) throw FormatError("bad cell in scene json");
    s.cells.emplace_back(Object{*shape, *color});
  }
  if (s.cells.size() != s.grid * s.grid) throw FormatError("scene json cell count does not match grid");
  return s;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  if (data.items.empty()) throw Error("cannot save an empty dataset");
  const std::size_t n = data.items.size();
  const std::size_t tokens = data.items[0].z.rows();
  const std::size_t dz = data.items[0].z.cols();
  const std::size_t dy = data.items[0].y.cols();
  std::vector<double> z, y;
  z.reserve(n * tokens * dz);
  y.reserve(n * tokens * dy);
  nlohmann::json items = nlohmann::json::array();
  for (const DataItem& it : data.items) {
    z.insert(z.end(), it.z.data().begin(), it.z.data().end());
    y.insert(y.end(), it.y.data().begin(), it.y.data().end());
    items.push_back({{"scene", scene_to_json(it.scene)},
                     {"split", it.eval ? "eval" : "train"},
                     {"category", to_string(it.qa.category)},
                     {"question", it.qa.question_tokens},
                     {"answer", it.qa.answer_tokens},
                     {"text", detokenize(full_text(it.qa))}});
  }
  TensorContainer c;
  c.add("z", Tensor({n, tokens, dz}, std::move(z)));
  c.add("y", Tensor({n, tokens, dy}, std::move(y)));
  write_container(dir / "dataset.vrt", c);

  nlohmann::json index = {{"data", data.spec}, {"encoder", data.encoder}, {"teacher", data.teacher}, {"items", items}};
  std::ofstream out(dir / "dataset.json");
  out << index.dump(1) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "dataset.json");
  if (!in) throw FormatError("cannot read " + (dir / "dataset.json").string());
  const nlohmann::json index = nlohmann::json::parse(in);
  Dataset d;
  d.spec = index.at("data").get<DatasetSpec>();
  d.encoder = index.at("encoder").get<EncoderSpec>();
  d.teacher = index.at("teacher").get<TeacherSpec>();
  const TensorContainer c = read_container(dir / "dataset.vrt");
  const Tensor& z = c.get("z");
  const Tensor& y = c.get("y");
  const auto& items = index.at("items");
  if (z.rank() != 3 || y.rank() != 3 || z.dim(0) != items.size() || y.dim(0) != items.size())
    throw FormatError("dataset tensors do not match the index");
  const std::size_t tokens = z.dim(1);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& j = items[i];
    DataItem it;
    it.scene = scene_from_json(j.at("scene"));
    it.eval = j.at("split").get<std::string>() == "eval";
    it.qa.scene_id = it.scene.id;
    it.qa.category = category_from_string(j.at("category").get<std::string>());
    it.qa.question_tokens = j.at("question").get<std::vector<std::size_t>>();
    it.qa.answer_tokens = j.at("answer").get<std::vector<std::size_t>>();
    const std::size_t sz = tokens * z.dim(2), sy = tokens * y.dim(2);
    it.z = Tensor({tokens, z.dim(2)}, std::vector<double>(z.data().begin() + static_cast<std::ptrdiff_t>(i * sz),
                                                          z.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * sz)));
    it.y = Tensor({tokens, y.dim(2)}, std::vector<double>(y.data().begin() + static_cast<std::ptrdiff_t>(i * sy),
                                                          y.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * sy)));
    d.items.push_back(std::move(it));
  }
  return d;
}

}  // namespace viral
