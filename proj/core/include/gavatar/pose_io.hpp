#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gavatar/skeleton.hpp"

namespace gavatar {

/// Pose sequence file "GPSQ": magic | version u32 | frame count u64 | P u32 |
/// per frame: global rotation quaternion (w, x, y, z) f32[4], translation f32[3],
/// theta f32[P].
struct PoseSequence {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t param_count = 0;
  std::vector<Pose> frames;

  void save(const std::filesystem::path& path) const;
  static PoseSequence load(const std::filesystem::path& path);
};

/// Fixed-width vector sequence: "GFEM" for face embeddings (and latent dumps):
/// magic | version u32 | frame count u64 | D u32 | per frame f32[D].
struct VectorSequence {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t dim = 0;
  std::vector<std::vector<double>> frames;

  void save(const std::filesystem::path& path) const;
  static VectorSequence load(const std::filesystem::path& path);
};

/// Rounds every stored value through float32, matching what a save/load round trip yields.
Pose quantize_pose(const Pose& pose);
std::vector<double> quantize_vector(const std::vector<double>& v);

}  // namespace gavatar
