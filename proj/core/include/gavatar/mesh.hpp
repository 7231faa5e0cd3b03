#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gavatar/geometry.hpp"
#include "gavatar/skeleton.hpp"

namespace gavatar {

using Polygon2 = std::vector<Vec2>;

/// Even-odd point-in-polygon test.
bool point_in_polygon(const Vec2& p, const Polygon2& polygon);

struct TemplateMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<Vec2> uv;
  std::vector<SkinRow> skinning;
  Skeleton skeleton;
  std::vector<Polygon2> face_uv_polygons;

  /// Throws ConfigError on invalid indices, UVs outside [0,1]^2, or bad skin rows.
  void validate() const;
  bool in_face_region(const Vec2& uv) const;
  double triangle_area(std::size_t t) const;

  static TemplateMesh load_json(const std::filesystem::path& path);
  static TemplateMesh from_json_string(const std::string& text);
  std::string to_json_string() const;
  void save_json(const std::filesystem::path& path) const;
};

/// Points on the mesh surface with interpolated attributes.
struct SurfaceSamples {
  std::vector<Vec3> positions;
  std::vector<Vec2> uv;
  std::vector<SkinRow> skinning;
  std::vector<int> triangle;
  std::vector<Vec3> barycentric;

  std::size_t size() const { return positions.size(); }
};

/// Attributes at barycentric coordinates on one triangle; skin rows are merged
/// and renormalized.
void interpolate_on_triangle(const TemplateMesh& mesh, int triangle, const Vec3& bary,
                             Vec3& position, Vec2& uv, SkinRow& skin);

/// Area-weighted triangle choice, uniform barycentric sampling inside it.
SurfaceSamples sample_surface(const TemplateMesh& mesh, std::int64_t count, std::uint64_t seed);

}  // namespace gavatar
