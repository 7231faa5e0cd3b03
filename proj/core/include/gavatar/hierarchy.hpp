#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gavatar/checkpoint.hpp"
#include "gavatar/mesh.hpp"
#include "gavatar/tensor.hpp"

namespace gavatar {

/// Static 3-D k-d tree for k-nearest-neighbor queries. Ties in distance are
/// broken by point index so results are deterministic.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points);

  /// Indices of the k nearest points, nearest first. `exclude` (if >= 0) is skipped.
  std::vector<int> nearest(const Vec3& query, int k, int exclude = -1) const;

 private:
  struct NodeRec {
    int point = -1;
    int axis = 0;
    int left = -1;
    int right = -1;
  };
  int build(std::vector<int>& idx, int lo, int hi, int depth);

  std::vector<Vec3> points_;
  std::vector<NodeRec> nodes_;
  int root_ = -1;
};

/// Three neighbor indices with convex interpolation weights.
struct NeighborTriple {
  std::array<int, 3> index{};
  std::array<double, 3> weight{};
};

/// Reciprocal-distance weights t_j = d_j / sum_k d_k with d_j = 1 / |x - x_j|.
/// A neighbor within 1e-9 of the point takes weight 1.
std::array<double, 3> interp_weights(const Vec3& point, const std::array<Vec3, 3>& neighbors);

struct HierarchyCounts {
  std::int64_t anchors = 32;
  std::int64_t control_points = 512;
  std::int64_t gaussians = 4096;

  static HierarchyCounts full_scale() { return {300, 10000, 200000}; }
};

/// Anchor / control-point / Gaussian point sets with their fixed neighbor structure.
struct Hierarchy {
  SurfaceSamples anchors;
  SurfaceSamples control_points;
  SurfaceSamples gaussians;
  std::vector<NeighborTriple> gaussian_anchor;  // 3-NN anchors of each Gaussian
  std::vector<NeighborTriple> control_anchor;   // 3-NN anchors of each control point
  std::vector<NeighborTriple> gaussian_control; // 3-NN control points of each Gaussian
  std::vector<std::array<int, 5>> control_neighbors;  // 5-NN graph for smoothness
  std::vector<std::array<int, 3>> anchor_neighbors;   // 3-NN among anchors (mask dilation)

  std::int64_t anchor_count() const { return static_cast<std::int64_t>(anchors.size()); }
  std::int64_t control_count() const { return static_cast<std::int64_t>(control_points.size()); }
  std::int64_t gaussian_count() const { return static_cast<std::int64_t>(gaussians.size()); }

  void save(Checkpoint& ck, const std::string& prefix = "hier/") const;
  static Hierarchy load(const Checkpoint& ck, const std::string& prefix = "hier/");
};

Hierarchy build_hierarchy(const TemplateMesh& mesh, const HierarchyCounts& counts,
                          std::uint64_t seed);

/// Assignment of each query point to its 3 nearest targets with interpolation weights.
std::vector<NeighborTriple> assign_neighbors(std::span<const Vec3> queries,
                                             std::span<const Vec3> targets);

/// Blends per-anchor B-vectors [N_a, B] into per-point vectors [N, B] via the triples.
Tensor interpolate_corrective(const Tensor& anchor_outputs,
                              std::span<const NeighborTriple> assignment,
                              std::int64_t expected_width);

}  // namespace gavatar
