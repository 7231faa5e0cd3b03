#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gavatar/geometry.hpp"

namespace gavatar {

struct Joint {
  std::string name;
  int parent = -1;  // -1 for the root
  RigidTransform rest;  // local, relative to the parent
};

/// Named set of joints whose rotation parameters form one body-part group.
struct JointGroup {
  std::string name;
  std::vector<int> joints;
};

/// Kinematic tree in topological order with 3 axis-angle parameters per joint.
class Skeleton {
 public:
  Skeleton() = default;
  Skeleton(std::vector<Joint> joints, std::vector<JointGroup> groups);

  /// 36 joints in the seven canonical groups (12, 9, 9, 12, 12, 27, 27 parameters).
  static Skeleton canonical();

  int joint_count() const { return static_cast<int>(joints_.size()); }
  int param_count() const { return 3 * joint_count(); }
  const std::vector<Joint>& joints() const { return joints_; }
  const Joint& joint(int j) const { return joints_.at(static_cast<std::size_t>(j)); }
  const std::vector<JointGroup>& groups() const { return groups_; }
  int find_joint(const std::string& name) const;  // -1 when absent

  /// Parameter indices (into theta) of a group, in joint order.
  std::vector<int> group_params(std::size_t group) const;
  /// True when `ancestor` is `joint` or lies on its path to the root.
  bool is_ancestor_or_self(int ancestor, int joint) const;
  /// The joint a group hangs off (parent of the group's top joint), or nullopt.
  std::optional<int> group_attachment(std::size_t group) const;
  /// "<joint>_x" / "_y" / "_z".
  std::string param_name(int param) const;

  /// Accumulated rest transforms (joint frame -> world) with zero pose.
  std::vector<RigidTransform> rest_world() const;

 private:
  std::vector<Joint> joints_;
  std::vector<JointGroup> groups_;
};

struct Pose {
  std::vector<double> theta;  // 3 axis-angle values per joint, radians
  RigidTransform global;

  static Pose zero(const Skeleton& skeleton);
};

/// World transform of every joint:
/// world(j) = global * local(root) * ... * local(parent(j)) * rest(j) * rot(theta_j).
std::vector<RigidTransform> forward_kinematics(const Skeleton& skeleton, const Pose& pose);

struct SkinWeight {
  int joint = 0;
  double weight = 0.0;
};
using SkinRow = std::vector<SkinWeight>;

constexpr int kMaxSkinInfluences = 8;

/// Throws unless the row is non-negative, has <= 8 entries, and sums to 1 within tol.
void validate_skin_row(const SkinRow& row, int joint_count, double tol = 1e-6);
/// Drops zeros, keeps the 8 largest, rescales to sum 1.
SkinRow normalize_skin_row(SkinRow row);

/// Per-joint skinning transforms world(j) * rest_world(j)^-1.
std::vector<RigidTransform> skinning_transforms(std::span<const RigidTransform> rest_world,
                                                std::span<const RigidTransform> world);

/// Blended 3x4 matrix sum_j w_j * skin(j).
Eigen::Matrix<double, 3, 4> blend_transform(const SkinRow& row,
                                            std::span<const RigidTransform> skin);

/// x' = sum_j w_j (world_j * rest_j^-1)(x) for each point.
std::vector<Vec3> lbs(std::span<const Vec3> points, std::span<const SkinRow> rows,
                      std::span<const RigidTransform> rest_world,
                      std::span<const RigidTransform> world);

/// Joint with the largest weight (lowest index on ties).
int dominant_joint(const SkinRow& row);

}  // namespace gavatar
