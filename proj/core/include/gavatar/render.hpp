#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "gavatar/geometry.hpp"
#include "gavatar/tensor.hpp"

namespace gavatar {

/// Pinhole camera in the OpenCV convention (x right, y down, z forward).
/// Pixel (i, j) has its center at coordinates (i, j).
struct Camera {
  double fx = 100.0;
  double fy = 100.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 64;
  int height = 64;
  RigidTransform world_to_camera;

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal,
                        int width, int height);
  Vec3 center() const;
  void validate() const;
};

inline constexpr double kShC0 = 0.28209479177387814;
inline constexpr double kShC1 = 0.4886025119029199;
inline constexpr int kShCoeffs = 4;  // degree <= 1

/// Posed Gaussians ready for rasterization.
struct GaussianFrame {
  std::vector<Vec3> means;
  std::vector<Eigen::Vector4d> rotations;  // unit quaternions (w, x, y, z)
  std::vector<Vec3> scales;
  std::vector<double> opacities;
  std::vector<double> sh;  // [N, 4, 3]: coefficient-major, RGB innermost
  int sh_degree = 0;

  std::size_t size() const { return means.size(); }
};

/// RGB per Gaussian from its SH coefficients along the camera-to-mean direction,
/// offset by 0.5 and clamped to [0, 1].
std::vector<Vec3> evaluate_sh(const GaussianFrame& frame, const Vec3& camera_center);

struct Splat2D {
  int index = -1;
  Vec2 mean;
  std::array<double, 3> cov{};    // (xx, xy, yy)
  std::array<double, 3> conic{};  // inverse covariance (xx, xy, yy)
  double depth = 0.0;
  double opacity = 0.0;
  Vec3 rgb = Vec3::Zero();
  double radius = 0.0;  // 3 sigma along the major axis, pixels
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds
};

inline constexpr double kNearPlane = 0.01;
inline constexpr double kCovarianceEps = 1e-6;

/// EWA projection; returns false when the Gaussian is culled (behind the near
/// plane or its footprint misses the image).
bool project(const Vec3& mean, const Eigen::Vector4d& rotation, const Vec3& scale, double opacity,
             const Vec3& rgb, const Camera& camera, Splat2D& out);

struct RenderOptions {
  bool skip_low_alpha = true;     // ignore contributions below 1/255
  bool early_termination = true;  // stop once transmittance < 1e-4
  int tile_size = 16;
};

struct RenderResult {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;    // [H, W, 3]
  std::vector<double> alpha;  // [H, W]
};

/// Fast forward path, parallel over tiles.
RenderResult render(const GaussianFrame& frame, const Camera& camera,
                    const RenderOptions& options = {});

/// SH colors as a differentiable function of the coefficients [N, 4, 3] and
/// means [N, 3].
Tensor sh_to_rgb(const Tensor& sh, const Tensor& means, const Vec3& camera_center, int degree);

inline constexpr double kDefaultRenderBudget = 1e9;

/// Differentiable render of [H, W, 3]. Same math as `render` with the alpha skip
/// and early termination disabled. Depth order and footprints are fixed per call.
/// Throws ConfigError when pixels x splats exceeds `budget`.
Tensor render_differentiable(const Tensor& means, const Tensor& rotations, const Tensor& scales,
                             const Tensor& opacities, const Tensor& rgb, const Camera& camera,
                             double budget = kDefaultRenderBudget);

}  // namespace gavatar
