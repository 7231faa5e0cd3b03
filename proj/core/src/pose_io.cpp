#include "gavatar/pose_io.hpp"

#include "gavatar/binary_io.hpp"

namespace gavatar {

namespace {

constexpr std::uint64_t kMaxFrames = 1ull << 32;

}  // namespace

void PoseSequence::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.bytes("GPSQ", 4);
  w.u32(kVersion);
  w.u64(frames.size());
  w.u32(param_count);
  for (const auto& f : frames) {
    if (f.theta.size() != param_count) {
      throw ShapeError("pose sequence frame has " + std::to_string(f.theta.size()) +
                       " parameters, header says " + std::to_string(param_count));
    }
    const Quat q(f.global.rotation);
    w.f32(static_cast<float>(q.w()));
    w.f32(static_cast<float>(q.x()));
    w.f32(static_cast<float>(q.y()));
    w.f32(static_cast<float>(q.z()));
    for (int k = 0; k < 3; ++k) w.f32(static_cast<float>(f.global.translation[k]));
    for (double v : f.theta) w.f32(static_cast<float>(v));
  }
  write_file_atomic(path, w.take());
}

PoseSequence PoseSequence::load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  r.expect_magic("GPSQ");
  if (const auto v = r.u32(); v != kVersion) throw FormatError("unsupported GPSQ version " + std::to_string(v));
  const auto count = r.u64();
  if (count > kMaxFrames) throw FormatError("GPSQ frame count implausible");
  PoseSequence seq;
  seq.param_count = r.u32();
  seq.frames.resize(static_cast<std::size_t>(count));
  for (auto& f : seq.frames) {
    const double w = r.f32(), x = r.f32(), y = r.f32(), z = r.f32();
    Vec3 t;
    for (int k = 0; k < 3; ++k) t[k] = r.f32();
    f.global = RigidTransform::from(Quat(w, x, y, z), t);
    f.theta.resize(seq.param_count);
    for (auto& v : f.theta) v = r.f32();
  }
  if (!r.at_end()) throw FormatError("GPSQ has trailing bytes");
  return seq;
}

void VectorSequence::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.bytes("GFEM", 4);
  w.u32(kVersion);
  w.u64(frames.size());
  w.u32(dim);
  for (const auto& f : frames) {
    if (f.size() != dim) throw ShapeError("vector sequence frame has wrong dimension");
    for (double v : f) w.f32(static_cast<float>(v));
  }
  write_file_atomic(path, w.take());
}

VectorSequence VectorSequence::load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  r.expect_magic("GFEM");
  if (const auto v = r.u32(); v != kVersion) throw FormatError("unsupported GFEM version " + std::to_string(v));
  const auto count = r.u64();
  if (count > kMaxFrames) throw FormatError("GFEM frame count implausible");
  VectorSequence seq;
  seq.dim = r.u32();
  seq.frames.assign(static_cast<std::size_t>(count), std::vector<double>(seq.dim));
  for (auto& f : seq.frames) {
    for (auto& v : f) v = r.f32();
  }
  if (!r.at_end()) throw FormatError("GFEM has trailing bytes");
  return seq;
}

Pose quantize_pose(const Pose& pose) {
  Pose q;
  const Quat rot(pose.global.rotation);
  const Quat rq(static_cast<float>(rot.w()), static_cast<float>(rot.x()),
                static_cast<float>(rot.y()), static_cast<float>(rot.z()));
  Vec3 t;
  for (int k = 0; k < 3; ++k) t[k] = static_cast<float>(pose.global.translation[k]);
  q.global = RigidTransform::from(rq, t);
  q.theta = quantize_vector(pose.theta);
  return q;
}

std::vector<double> quantize_vector(const std::vector<double>& v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

}  // namespace gavatar
