#include "fixtures.hpp"

#include <algorithm>
#include <numeric>

#include "gavatar/synthetic.hpp"

namespace gavatar::testing {

Skeleton random_skeleton(int joints, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<Joint> list;
  for (int j = 0; j < joints; ++j) {
    Joint joint;
    joint.name = "j" + std::to_string(j);
    joint.parent = j == 0 ? -1 : static_cast<int>(rng() % static_cast<std::uint64_t>(j));
    Vec3 axis, offset;
    for (int k = 0; k < 3; ++k) axis[k] = 0.8 * unit(rng);
    for (int k = 0; k < 3; ++k) offset[k] = 0.3 * unit(rng);
    joint.rest.rotation = axis_angle_to_matrix(axis);
    joint.rest.translation = j == 0 ? Vec3(Vec3::Zero()) : offset;
    list.push_back(joint);
  }
  std::vector<JointGroup> groups;
  const int parts = std::min(3, joints);
  for (int g = 0; g < parts; ++g) {
    JointGroup group;
    group.name = "group" + std::to_string(g);
    for (int j = g * joints / parts; j < (g + 1) * joints / parts; ++j) group.joints.push_back(j);
    groups.push_back(group);
  }
  return Skeleton(std::move(list), std::move(groups));
}

SkinRow random_skin_row(int joints, std::mt19937_64& rng) {
  const int count = 1 + static_cast<int>(rng() % 4);
  std::uniform_real_distribution<double> w(0.1, 1.0);
  SkinRow row;
  for (int k = 0; k < count; ++k) {
    row.push_back({static_cast<int>(rng() % static_cast<std::uint64_t>(joints)), w(rng)});
  }
  return normalize_skin_row(row);
}

BitMask perturbation_mask(const Skeleton& skeleton, const Vec3& rest_point, const SkinRow& row,
                          const Pose& base, double step) {
  const auto rest = skeleton.rest_world();
  const std::vector<Vec3> pts{rest_point};
  const std::vector<SkinRow> rows{row};
  const Vec3 ref = lbs(pts, rows, rest, forward_kinematics(skeleton, base))[0];
  BitMask mask(static_cast<std::size_t>(skeleton.param_count()), 0);
  for (int p = 0; p < skeleton.param_count(); ++p) {
    Pose moved = base;
    moved.theta[static_cast<std::size_t>(p)] += step;
    const Vec3 x = lbs(pts, rows, rest, forward_kinematics(skeleton, moved))[0];
    mask[static_cast<std::size_t>(p)] = (x - ref).norm() > 1e-12 ? 1 : 0;
  }
  return mask;
}

std::vector<int> brute_force_knn(const std::vector<Vec3>& points, const Vec3& query, int k,
                                 int exclude) {
  std::vector<std::pair<double, int>> all;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (static_cast<int>(i) == exclude) continue;
    all.emplace_back((points[i] - query).squaredNorm(), static_cast<int>(i));
  }
  std::sort(all.begin(), all.end());
  std::vector<int> out;
  for (int i = 0; i < k && i < static_cast<int>(all.size()); ++i) out.push_back(all[static_cast<std::size_t>(i)].second);
  return out;
}

AvatarRig small_rig(const HierarchyCounts& counts, std::uint64_t seed) {
  const auto mesh = make_body_mesh(Skeleton::canonical());
  std::vector<std::vector<double>> thetas;
  for (const auto& p : random_motion(mesh.skeleton, 24, 0.35, seed)) thetas.push_back(p.theta);
  return build_rig(mesh, counts, thetas, 4, seed);
}

SyntheticSpec small_capture_spec() {
  SyntheticSpec spec;
  spec.frames = 10;
  spec.views = 2;
  spec.width = 32;
  spec.height = 32;
  spec.focal = 50.5;
  spec.gt_gaussians = 3000;
  spec.ambiguity_pairs = 1;
  spec.seed = 7;
  return spec;
}

const CaptureDataset& small_capture() {
  static const CaptureDataset dataset = generate_synthetic_capture(small_capture_spec());
  return dataset;
}

}  // namespace gavatar::testing
