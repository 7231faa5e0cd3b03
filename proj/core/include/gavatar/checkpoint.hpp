#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gavatar/tensor.hpp"

namespace gavatar {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct StoredTensor {
  Shape shape;
  std::vector<double> values;
  DType dtype = DType::F64;
};

/// Named-tensor container with the "GAVT" binary layout:
///
///   magic "GAVT" | version u32 | entry count u32 |
///   per entry: name length u32, UTF-8 name, rank u32, dims u64[rank],
///              dtype u8 (0 = f32, 1 = f64), little-endian payload
///
/// Entries are written in name order so identical contents give identical bytes.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& name, const Tensor& t, DType dtype = DType::F64);
  void put(const std::string& name, Shape shape, std::vector<double> values,
           DType dtype = DType::F64);
  void put_scalar(const std::string& name, double value);
  void put_indices(const std::string& name, Shape shape, const std::vector<std::int64_t>& values);
  /// Text stored as one byte per element.
  void put_text(const std::string& name, const std::string& text);

  bool has(const std::string& name) const;
  const StoredTensor& get(const std::string& name) const;
  Tensor tensor(const std::string& name, bool requires_grad = false) const;
  double scalar(const std::string& name) const;
  std::vector<std::int64_t> indices(const std::string& name) const;
  std::string text(const std::string& name) const;

  std::vector<std::string> names(const std::string& prefix = "") const;
  void merge(const Checkpoint& other);

  /// Atomic write: temp file in the same directory, then rename.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

 private:
  std::map<std::string, StoredTensor> entries_;
};

}  // namespace gavatar
