#include "viral_lab/container.hpp"

#include "viral_lab/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace viral {

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

void TensorContainer::add(std::string name, Tensor tensor, DType dtype) {
  if (name.size() > 0xFFFF) throw FormatError("tensor name too long");
  if (tensor.rank() > 0xFF) throw FormatError("tensor rank too large");
  if (contains(name)) throw FormatError("duplicate tensor name '" + name + "'");
  entries_.push_back({std::move(name), std::move(tensor), dtype});
}

bool TensorContainer::contains(const std::string& name) const { return find(name) != nullptr; }

const Tensor* TensorContainer::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

const Tensor& TensorContainer::get(const std::string& name) const {
  if (const Tensor* t = find(name)) return *t;
  throw FormatError("container has no tensor named '" + name + "'");
}

void TensorContainer::add_text(std::string name, const std::string& text) {
  std::vector<double> bytes;
  bytes.reserve(text.size() + 1);
  for (unsigned char c : text) bytes.push_back(c);
  if (bytes.empty()) bytes.push_back(0.0);
  const std::size_t n = bytes.size();
  // A lone 0 marks the empty string.
  add(std::move(name), Tensor({n}, std::move(bytes)), DType::f64);
}

std::optional<std::string> TensorContainer::text(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) return std::nullopt;
  std::string s;
  for (double v : t->data()) {
    if (v < 0.0 || v > 255.0) throw FormatError("text tensor '" + name + "' holds a non-byte value");
    if (v == 0.0 && t->size() == 1) break;
    s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return s;
}

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("container truncated");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_container(const TensorContainer& container) {
  std::string out = "VRT1";
  put<std::uint32_t>(out, static_cast<std::uint32_t>(container.size()));
  for (const auto& e : container.entries()) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) {
      if (d > 0xFFFFFFFFULL) throw FormatError("tensor dimension exceeds u32");
      put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    if (e.dtype == DType::f64) {
      for (double v : e.tensor.data()) put<double>(out, v);
    } else {
      for (double v : e.tensor.data()) put<float>(out, static_cast<float>(v));
    }
  }
  return out;
}

TensorContainer decode_container(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(4) != "VRT1") throw FormatError("bad container magic");
  const auto count = in.get<std::uint32_t>();
  TensorContainer c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = in.get<std::uint16_t>();
    std::string name = in.take(name_len);
    const auto dtype = in.get<std::uint8_t>();
    if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype) + " for tensor '" + name + "'");
    const auto ndim = in.get<std::uint8_t>();
    if (ndim == 0) throw FormatError("tensor '" + name + "' has rank 0");
    Shape shape(ndim);
    for (auto& d : shape) {
      d = in.get<std::uint32_t>();
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dimension");
    }
    std::vector<double> data(shape_numel(shape));
    if (dtype == 1) {
      for (double& v : data) v = in.get<double>();
    } else {
      for (double& v : data) v = static_cast<double>(in.get<float>());
    }
    c.add(std::move(name), Tensor(std::move(shape), std::move(data)), static_cast<DType>(dtype));
  }
  if (!in.done()) throw FormatError("trailing bytes after last tensor");
  return c;
}

void write_container(const std::filesystem::path& path, const TensorContainer& container) {
  const std::string bytes = encode_container(container);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorContainer read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_container(ss.str());
}

}  // namespace viral
