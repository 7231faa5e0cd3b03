#include "gavatar/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "gavatar/binary_io.hpp"

namespace gavatar {

void Checkpoint::put(const std::string& name, const Tensor& t, DType dtype) {
  put(name, t.shape(), std::vector<double>(t.values().begin(), t.values().end()), dtype);
}

void Checkpoint::put(const std::string& name, Shape shape, std::vector<double> values,
                     DType dtype) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("checkpoint entry '" + name + "': shape " + shape_str(shape) +
                     " does not match " + std::to_string(values.size()) + " values");
  }
  if (dtype == DType::F32) {
    for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
  }
  entries_[name] = StoredTensor{std::move(shape), std::move(values), dtype};
}

void Checkpoint::put_scalar(const std::string& name, double value) { put(name, {1}, {value}); }

void Checkpoint::put_indices(const std::string& name, Shape shape,
                             const std::vector<std::int64_t>& values) {
  std::vector<double> v(values.begin(), values.end());
  put(name, std::move(shape), std::move(v));
}

bool Checkpoint::has(const std::string& name) const { return entries_.count(name) != 0; }

const StoredTensor& Checkpoint::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw FormatError("checkpoint has no entry '" + name + "'");
  return it->second;
}

Tensor Checkpoint::tensor(const std::string& name, bool requires_grad) const {
  const auto& e = get(name);
  return Tensor::from(e.shape, e.values, requires_grad);
}

double Checkpoint::scalar(const std::string& name) const {
  const auto& e = get(name);
  if (e.values.size() != 1) throw FormatError("checkpoint entry '" + name + "' is not a scalar");
  return e.values[0];
}

std::vector<std::int64_t> Checkpoint::indices(const std::string& name) const {
  const auto& e = get(name);
  std::vector<std::int64_t> out;
  out.reserve(e.values.size());
  for (double v : e.values) out.push_back(static_cast<std::int64_t>(std::llround(v)));
  return out;
}

std::vector<std::string> Checkpoint::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, _] : entries_) {
    if (k.compare(0, prefix.size(), prefix) == 0) out.push_back(k);
  }
  return out;
}

void Checkpoint::merge(const Checkpoint& other) {
  for (const auto& [k, v] : other.entries_) entries_[k] = v;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  ByteWriter w;
  w.bytes("GAVT", 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, e] : entries_) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u64(static_cast<std::uint64_t>(d));
    w.u8(static_cast<std::uint8_t>(e.dtype));
    for (double v : e.values) {
      if (e.dtype == DType::F32) {
        w.f32(static_cast<float>(v));
      } else {
        w.f64(v);
      }
    }
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("GAVT");
  const auto version = r.u32();
  if (version != kVersion) {
    throw FormatError("unsupported GAVT version " + std::to_string(version));
  }
  const auto count = r.u32();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u32();
    std::string name = r.string(len);
    const auto rank = r.u32();
    if (rank > 16) throw FormatError("GAVT entry '" + name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::int64_t>(r.u64()));
    const auto tag = r.u8();
    if (tag > 1) throw FormatError("GAVT entry '" + name + "' has unknown dtype tag");
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    std::vector<double> values(n);
    for (auto& v : values) v = tag == 0 ? static_cast<double>(r.f32()) : r.f64();
    ck.entries_[name] = StoredTensor{std::move(shape), std::move(values), static_cast<DType>(tag)};
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  write_file_atomic(path, serialize());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

void Checkpoint::put_text(const std::string& name, const std::string& text) {
  std::vector<double> bytes;
  bytes.reserve(text.size());
  for (char c : text) bytes.push_back(static_cast<unsigned char>(c));
  const auto n = static_cast<std::int64_t>(bytes.size());
  put(name, {n}, std::move(bytes), DType::F32);
}

std::string Checkpoint::text(const std::string& name) const {
  const auto& bytes = get(name).values;
  std::string out;
  out.reserve(bytes.size());
  for (double b : bytes) out.push_back(static_cast<char>(static_cast<unsigned char>(b)));
  return out;
}

}  // namespace gavatar
