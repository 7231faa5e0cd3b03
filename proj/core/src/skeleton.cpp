#include "gavatar/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gavatar/error.hpp"

namespace gavatar {

Skeleton::Skeleton(std::vector<Joint> joints, std::vector<JointGroup> groups)
    : joints_(std::move(joints)), groups_(std::move(groups)) {
  if (joints_.empty()) throw ConfigError("skeleton has no joints");
  int roots = 0;
  for (int j = 0; j < joint_count(); ++j) {
    const auto& jt = joints_[static_cast<std::size_t>(j)];
    if (jt.parent < 0) {
      ++roots;
    } else if (jt.parent >= j) {
      throw ConfigError("joint '" + jt.name + "' has parent index >= its own (not topological)");
    }
    const Mat3 rrt = jt.rest.rotation * jt.rest.rotation.transpose();
    if (!rrt.isApprox(Mat3::Identity(), 1e-9) || jt.rest.rotation.determinant() < 0.0) {
      throw ConfigError("joint '" + jt.name + "' has a non-rigid rest transform");
    }
  }
  if (roots != 1 || joints_[0].parent != -1) {
    throw ConfigError("skeleton must have exactly one root at index 0");
  }
  std::vector<int> owner(static_cast<std::size_t>(joint_count()), -1);
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    for (int j : groups_[g].joints) {
      if (j < 0 || j >= joint_count()) {
        throw ConfigError("group '" + groups_[g].name + "' references missing joint " + std::to_string(j));
      }
      if (owner[static_cast<std::size_t>(j)] >= 0) {
        throw ConfigError("joint " + std::to_string(j) + " belongs to more than one group");
      }
      owner[static_cast<std::size_t>(j)] = static_cast<int>(g);
    }
  }
}

int Skeleton::find_joint(const std::string& name) const {
  for (int j = 0; j < joint_count(); ++j) {
    if (joints_[static_cast<std::size_t>(j)].name == name) return j;
  }
  return -1;
}

std::vector<int> Skeleton::group_params(std::size_t group) const {
  std::vector<int> params;
  for (int j : groups_.at(group).joints) {
    for (int a = 0; a < 3; ++a) params.push_back(3 * j + a);
  }
  return params;
}

bool Skeleton::is_ancestor_or_self(int ancestor, int joint) const {
  for (int j = joint; j >= 0; j = joints_[static_cast<std::size_t>(j)].parent) {
    if (j == ancestor) return true;
  }
  return false;
}

std::optional<int> Skeleton::group_attachment(std::size_t group) const {
  const auto& members = groups_.at(group).joints;
  for (int j : members) {
    const int p = joints_[static_cast<std::size_t>(j)].parent;
    if (p >= 0 && std::find(members.begin(), members.end(), p) == members.end()) return p;
  }
  return std::nullopt;
}

std::string Skeleton::param_name(int param) const {
  static constexpr const char* kAxis[] = {"_x", "_y", "_z"};
  return joints_.at(static_cast<std::size_t>(param / 3)).name + kAxis[param % 3];
}

std::vector<RigidTransform> Skeleton::rest_world() const {
  std::vector<RigidTransform> out(joints_.size());
  for (std::size_t j = 0; j < joints_.size(); ++j) {
    const auto& jt = joints_[j];
    out[j] = jt.parent < 0 ? jt.rest : out[static_cast<std::size_t>(jt.parent)] * jt.rest;
  }
  return out;
}

Skeleton Skeleton::canonical() {
  std::vector<Joint> joints;
  auto add = [&](const std::string& name, int parent, double x, double y, double z) {
    Joint j;
    j.name = name;
    j.parent = parent;
    j.rest.translation = Vec3(x, y, z);
    joints.push_back(j);
    return static_cast<int>(joints.size()) - 1;
  };
  // Rest pose is a T-pose, y up, +z facing forward, meters.
  const int pelvis = add("pelvis", -1, 0.0, 0.95, 0.0);
  const int spine = add("spine", pelvis, 0.0, 0.25, 0.0);
  const int neck = add("neck", spine, 0.0, 0.28, 0.0);
  add("head", neck, 0.0, 0.10, 0.0);
  for (int side = 0; side < 2; ++side) {
    const std::string s = side == 0 ? "l_" : "r_";
    const double sx = side == 0 ? 1.0 : -1.0;
    const int hip = add(s + "hip", pelvis, 0.10 * sx, -0.05, 0.0);
    const int knee = add(s + "knee", hip, 0.0, -0.42, 0.0);
    add(s + "ankle", knee, 0.0, -0.42, 0.0);
  }
  std::vector<int> wrists;
  for (int side = 0; side < 2; ++side) {
    const std::string s = side == 0 ? "l_" : "r_";
    const double sx = side == 0 ? 1.0 : -1.0;
    const int clav = add(s + "clavicle", spine, 0.05 * sx, 0.22, 0.0);
    const int shoulder = add(s + "shoulder", clav, 0.13 * sx, 0.0, 0.0);
    const int elbow = add(s + "elbow", shoulder, 0.28 * sx, 0.0, 0.0);
    wrists.push_back(add(s + "wrist", elbow, 0.25 * sx, 0.0, 0.0));
  }
  for (int side = 0; side < 2; ++side) {
    const std::string s = side == 0 ? "l_" : "r_";
    const double sx = side == 0 ? 1.0 : -1.0;
    const int wrist = wrists[static_cast<std::size_t>(side)];
    const struct { const char* name; double x, z; } fingers[] = {
        {"thumb", 0.03, 0.03}, {"index", 0.08, 0.012}, {"middle", 0.08, -0.012}};
    for (const auto& f : fingers) {
      int parent = wrist;
      for (int k = 1; k <= 3; ++k) {
        const double off = k == 1 ? f.x : 0.025;
        parent = add(s + f.name + std::to_string(k), parent, off * sx, 0.0, k == 1 ? f.z : 0.0);
      }
    }
  }
  auto range = [](int lo, int hi) {
    std::vector<int> v(static_cast<std::size_t>(hi - lo));
    std::iota(v.begin(), v.end(), lo);
    return v;
  };
  std::vector<JointGroup> groups{
      {"torso_head", range(0, 4)},  {"left_leg", range(4, 7)},   {"right_leg", range(7, 10)},
      {"left_arm", range(10, 14)},  {"right_arm", range(14, 18)}, {"left_hand", range(18, 27)},
      {"right_hand", range(27, 36)},
  };
  return Skeleton(std::move(joints), std::move(groups));
}

Pose Pose::zero(const Skeleton& skeleton) {
  Pose p;
  p.theta.assign(static_cast<std::size_t>(skeleton.param_count()), 0.0);
  return p;
}

std::vector<RigidTransform> forward_kinematics(const Skeleton& skeleton, const Pose& pose) {
  if (static_cast<int>(pose.theta.size()) != skeleton.param_count()) {
    throw ShapeError("forward_kinematics: pose has " + std::to_string(pose.theta.size()) +
                     " parameters, skeleton expects " + std::to_string(skeleton.param_count()));
  }
  std::vector<RigidTransform> world(static_cast<std::size_t>(skeleton.joint_count()));
  for (int j = 0; j < skeleton.joint_count(); ++j) {
    const auto& jt = skeleton.joint(j);
    const Vec3 aa(pose.theta[static_cast<std::size_t>(3 * j)],
                  pose.theta[static_cast<std::size_t>(3 * j + 1)],
                  pose.theta[static_cast<std::size_t>(3 * j + 2)]);
    RigidTransform local = jt.rest;
    local.rotation = jt.rest.rotation * axis_angle_to_matrix(aa);
    world[static_cast<std::size_t>(j)] =
        jt.parent < 0 ? pose.global * local : world[static_cast<std::size_t>(jt.parent)] * local;
  }
  return world;
}

void validate_skin_row(const SkinRow& row, int joint_count, double tol) {
  if (row.empty() || static_cast<int>(row.size()) > kMaxSkinInfluences) {
    throw ConfigError("skin row must have 1.." + std::to_string(kMaxSkinInfluences) + " entries");
  }
  double total = 0.0;
  for (const auto& w : row) {
    if (w.joint < 0 || w.joint >= joint_count) throw ConfigError("skin row references missing joint");
    if (!(w.weight >= 0.0)) throw ConfigError("skin row has a negative weight");
    total += w.weight;
  }
  if (std::abs(total - 1.0) > tol) {
    throw ConfigError("skin row sums to " + std::to_string(total) + ", expected 1");
  }
}

SkinRow normalize_skin_row(SkinRow row) {
  // Merge duplicate joints first.
  std::sort(row.begin(), row.end(), [](const SkinWeight& a, const SkinWeight& b) { return a.joint < b.joint; });
  SkinRow merged;
  for (const auto& w : row) {
    if (!merged.empty() && merged.back().joint == w.joint) {
      merged.back().weight += w.weight;
    } else {
      merged.push_back(w);
    }
  }
  std::erase_if(merged, [](const SkinWeight& w) { return !(w.weight > 0.0); });
  if (merged.empty()) throw ConfigError("skin row has no positive weight");
  if (static_cast<int>(merged.size()) > kMaxSkinInfluences) {
    std::stable_sort(merged.begin(), merged.end(),
                     [](const SkinWeight& a, const SkinWeight& b) { return a.weight > b.weight; });
    merged.resize(kMaxSkinInfluences);
    std::sort(merged.begin(), merged.end(), [](const SkinWeight& a, const SkinWeight& b) { return a.joint < b.joint; });
  }
  double total = 0.0;
  for (const auto& w : merged) total += w.weight;
  for (auto& w : merged) w.weight /= total;
  return merged;
}

std::vector<RigidTransform> skinning_transforms(std::span<const RigidTransform> rest_world,
                                                std::span<const RigidTransform> world) {
  if (rest_world.size() != world.size()) throw ShapeError("skinning_transforms: joint count mismatch");
  std::vector<RigidTransform> out(world.size());
  for (std::size_t j = 0; j < world.size(); ++j) out[j] = world[j] * rest_world[j].inverse();
  return out;
}

Eigen::Matrix<double, 3, 4> blend_transform(const SkinRow& row, std::span<const RigidTransform> skin) {
  Eigen::Matrix<double, 3, 4> m = Eigen::Matrix<double, 3, 4>::Zero();
  for (const auto& w : row) m += w.weight * skin[static_cast<std::size_t>(w.joint)].matrix();
  return m;
}

std::vector<Vec3> lbs(std::span<const Vec3> points, std::span<const SkinRow> rows,
                      std::span<const RigidTransform> rest_world,
                      std::span<const RigidTransform> world) {
  if (points.size() != rows.size()) throw ShapeError("lbs: point and skin row counts differ");
  const auto skin = skinning_transforms(rest_world, world);
  std::vector<Vec3> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    validate_skin_row(rows[i], static_cast<int>(world.size()));
    const auto m = blend_transform(rows[i], skin);
    out[i] = m.leftCols<3>() * points[i] + m.col(3);
  }
  return out;
}

int dominant_joint(const SkinRow& row) {
  int best = row.front().joint;
  double w = row.front().weight;
  for (const auto& e : row) {
    if (e.weight > w || (e.weight == w && e.joint < best)) {
      best = e.joint;
      w = e.weight;
    }
  }
  return best;
}

}  // namespace gavatar
