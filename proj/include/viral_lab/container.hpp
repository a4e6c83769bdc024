#pragma once

#include "viral_lab/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace viral {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct NamedTensor {
  std::string name;
  Tensor tensor;
  DType dtype = DType::f64;
};

/// Ordered collection of named tensors serialized as
///
///   "VRT1" | u32 count | per tensor: u16 name_len, name bytes, u8 dtype,
///   u8 ndim, ndim x u32 dims, payload
///
/// All integers and payloads little-endian, payload row-major. dtype 0 is
/// float32, 1 is float64.
class TensorContainer {
 public:
  void add(std::string name, Tensor tensor, DType dtype = DType::f64);
  bool contains(const std::string& name) const;
  /// Throws FormatError if absent.
  const Tensor& get(const std::string& name) const;
  const Tensor* find(const std::string& name) const;

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Text stored as a rank-1 float64 tensor of byte values.
  void add_text(std::string name, const std::string& text);
  std::optional<std::string> text(const std::string& name) const;

 private:
  std::vector<NamedTensor> entries_;
};

std::string encode_container(const TensorContainer& container);
/// Throws FormatError on bad magic, unknown dtype, truncation or trailing bytes.
TensorContainer decode_container(const std::string& bytes);

/// Writes through a temporary file and renames, so readers never observe a
/// partially written container.
void write_container(const std::filesystem::path& path, const TensorContainer& container);
TensorContainer read_container(const std::filesystem::path& path);

}  // namespace viral
