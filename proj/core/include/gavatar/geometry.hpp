#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace gavatar {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

/// Rotation + translation, applied as x -> R x + t.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from(const Quat& q, const Vec3& t) {
    return {q.normalized().toRotationMatrix(), t};
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }
  RigidTransform operator*(const RigidTransform& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }
  Eigen::Matrix<double, 3, 4> matrix() const {
    Eigen::Matrix<double, 3, 4> m;
    m.leftCols<3>() = rotation;
    m.col(3) = translation;
    return m;
  }
};

/// Rodrigues map; a zero vector gives the identity.
Mat3 axis_angle_to_matrix(const Vec3& axis_angle);
/// Inverse of the above with angle in [0, pi].
Vec3 matrix_to_axis_angle(const Mat3& rotation);

/// Left-multiplication matrix of a quaternion acting on (w, x, y, z) vectors:
/// (q * p) = L(q) p.
Eigen::Matrix4d quaternion_left_matrix(const Quat& q);

}  // namespace gavatar
