#include "gavatar/geometry.hpp"

#include <cmath>

namespace gavatar {

Mat3 axis_angle_to_matrix(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

Vec3 matrix_to_axis_angle(const Mat3& rotation) {
  const Eigen::AngleAxisd aa(rotation);
  return aa.axis() * aa.angle();
}

Eigen::Matrix4d quaternion_left_matrix(const Quat& q) {
  const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
  Eigen::Matrix4d m;
  m << w, -x, -y, -z,
       x,  w, -z,  y,
       y,  z,  w, -x,
       z, -y,  x,  w;
  return m;
}

}  // namespace gavatar
