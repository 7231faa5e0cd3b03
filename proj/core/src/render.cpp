#include "gavatar/render.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gavatar/error.hpp"
#include "gavatar/ops.hpp"
#include "gavatar/parallel.hpp"

namespace gavatar {

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal,
                       int width, int height) {
  const Vec3 forward = (target - eye).normalized();
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.fx = cam.fy = focal;
  cam.width = width;
  cam.height = height;
  cam.cx = 0.5 * (width - 1);
  cam.cy = 0.5 * (height - 1);
  cam.world_to_camera.rotation.row(0) = right.transpose();
  cam.world_to_camera.rotation.row(1) = down.transpose();
  cam.world_to_camera.rotation.row(2) = forward.transpose();
  cam.world_to_camera.translation = -(cam.world_to_camera.rotation * eye);
  return cam;
}

Vec3 Camera::center() const {
  return -(world_to_camera.rotation.transpose() * world_to_camera.translation);
}

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera focal lengths must be positive");
  if (width < 1 || height < 1) throw ConfigError("camera image size must be at least 1x1");
}

namespace {

Mat3 quat_to_matrix(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

std::array<double, 4> sh_basis(const Vec3& dir, int degree) {
  if (degree <= 0) return {kShC0, 0.0, 0.0, 0.0};
  return {kShC0, -kShC1 * dir.y(), kShC1 * dir.z(), -kShC1 * dir.x()};
}

}  // namespace

std::vector<Vec3> evaluate_sh(const GaussianFrame& frame, const Vec3& camera_center) {
  const std::size_t n = frame.size();
  if (frame.sh.size() != n * kShCoeffs * 3) throw ShapeError("evaluate_sh: SH buffer size mismatch");
  std::vector<Vec3> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 d = frame.means[i] - camera_center;
    const double len = std::sqrt(d.squaredNorm());
    const auto basis = sh_basis(d / len, frame.sh_degree);
    for (int c = 0; c < 3; ++c) {
      double v = 0.0;
      for (int k = 0; k < kShCoeffs; ++k) v += basis[static_cast<std::size_t>(k)] * frame.sh[(i * kShCoeffs + static_cast<std::size_t>(k)) * 3 + static_cast<std::size_t>(c)];
      out[i][c] = std::clamp(v + 0.5, 0.0, 1.0);
    }
  }
  return out;
}

bool project(const Vec3& mean, const Eigen::Vector4d& rotation, const Vec3& scale, double opacity,
             const Vec3& rgb, const Camera& camera, Splat2D& out) {
  const Mat3& w = camera.world_to_camera.rotation;
  const Vec3 p = camera.world_to_camera.apply(mean);
  if (!(p.z() > kNearPlane)) return false;
  const double z = p.z();
  const double iz = 1.0 / z;
  Eigen::Matrix<double, 2, 3> j;
  j << camera.fx * iz, 0.0, -camera.fx * p.x() * iz * iz,
       0.0, camera.fy * iz, -camera.fy * p.y() * iz * iz;
  const Mat3 r = quat_to_matrix(rotation / rotation.norm());
  const Mat3 l = r * scale.asDiagonal();
  const Mat3 cov3 = w * (l * l.transpose()) * w.transpose();
  const Eigen::Matrix2d cov2 = j * cov3 * j.transpose();
  const double a = cov2(0, 0) + kCovarianceEps;
  const double b = 0.5 * (cov2(0, 1) + cov2(1, 0));
  const double c = cov2(1, 1) + kCovarianceEps;
  const double det = a * c - b * b;
  if (!(det > 0.0)) return false;
  out.mean = Vec2(camera.fx * p.x() * iz + camera.cx, camera.fy * p.y() * iz + camera.cy);
  out.cov = {a, b, c};
  out.conic = {c / det, -b / det, a / det};
  out.depth = z;
  out.opacity = opacity;
  out.rgb = rgb;
  const double mid = 0.5 * (a + c);
  const double lambda = mid + std::sqrt(std::max(0.0, 0.25 * (a - c) * (a - c) + b * b));
  out.radius = 3.0 * std::sqrt(lambda);
  out.x0 = std::max(0, static_cast<int>(std::ceil(out.mean.x() - out.radius)));
  out.x1 = std::min(camera.width - 1, static_cast<int>(std::floor(out.mean.x() + out.radius)));
  out.y0 = std::max(0, static_cast<int>(std::ceil(out.mean.y() - out.radius)));
  out.y1 = std::min(camera.height - 1, static_cast<int>(std::floor(out.mean.y() + out.radius)));
  return out.x0 <= out.x1 && out.y0 <= out.y1;
}

namespace {

/// Content-based ordering so the result does not depend on input order.
bool splat_before(const Splat2D& a, const Splat2D& b) {
  const std::array<double, 10> ka{a.depth, a.mean.x(), a.mean.y(), a.cov[0], a.cov[1],
                                  a.cov[2], a.opacity, a.rgb.x(), a.rgb.y(), a.rgb.z()};
  const std::array<double, 10> kb{b.depth, b.mean.x(), b.mean.y(), b.cov[0], b.cov[1],
                                  b.cov[2], b.opacity, b.rgb.x(), b.rgb.y(), b.rgb.z()};
  return ka < kb;
}

struct TileGrid {
  int size = 16;
  int cols = 0;
  int rows = 0;
  std::vector<std::vector<int>> lists;  // indices into the sorted splat array
};

TileGrid bin_splats(const std::vector<Splat2D>& sorted, const Camera& camera, int tile) {
  TileGrid grid;
  grid.size = std::max(1, tile);
  grid.cols = (camera.width + grid.size - 1) / grid.size;
  grid.rows = (camera.height + grid.size - 1) / grid.size;
  grid.lists.resize(static_cast<std::size_t>(grid.cols * grid.rows));
  for (std::size_t s = 0; s < sorted.size(); ++s) {
    const auto& sp = sorted[s];
    for (int ty = sp.y0 / grid.size; ty <= sp.y1 / grid.size; ++ty) {
      for (int tx = sp.x0 / grid.size; tx <= sp.x1 / grid.size; ++tx) {
        grid.lists[static_cast<std::size_t>(ty * grid.cols + tx)].push_back(static_cast<int>(s));
      }
    }
  }
  return grid;
}

constexpr double kAlphaSkip = 1.0 / 255.0;
constexpr double kMinTransmittance = 1e-4;

struct Contribution {
  int splat;
  double alpha;
  double gauss;
  double dx;
  double dy;
  double transmittance;  // before this splat
};

/// Front-to-back blend of one pixel. `record` (optional) receives the contributions.
template <bool kRecord>
double composite_pixel(const std::vector<Splat2D>& sorted, const std::vector<int>& list, int px,
                       int py, bool skip, bool early, double* rgb,
                       std::vector<Contribution>* record) {
  double t = 1.0;
  for (int s : list) {
    const auto& sp = sorted[static_cast<std::size_t>(s)];
    if (px < sp.x0 || px > sp.x1 || py < sp.y0 || py > sp.y1) continue;
    const double dx = px - sp.mean.x();
    const double dy = py - sp.mean.y();
    const double q = sp.conic[0] * dx * dx + 2.0 * sp.conic[1] * dx * dy + sp.conic[2] * dy * dy;
    const double g = std::exp(-0.5 * q);
    const double alpha = sp.opacity * g;
    if (skip && alpha < kAlphaSkip) continue;
    const double wgt = t * alpha;
    rgb[0] += wgt * sp.rgb[0];
    rgb[1] += wgt * sp.rgb[1];
    rgb[2] += wgt * sp.rgb[2];
    if constexpr (kRecord) record->push_back({s, alpha, g, dx, dy, t});
    t *= 1.0 - alpha;
    if (early && t < kMinTransmittance) break;
  }
  return 1.0 - t;
}

std::vector<Splat2D> project_and_sort(std::span<const Vec3> means,
                                      std::span<const Eigen::Vector4d> rotations,
                                      std::span<const Vec3> scales,
                                      std::span<const double> opacities,
                                      std::span<const Vec3> rgb, const Camera& camera) {
  std::vector<Splat2D> splats;
  splats.reserve(means.size());
  for (std::size_t i = 0; i < means.size(); ++i) {
    Splat2D sp;
    if (project(means[i], rotations[i], scales[i], opacities[i], rgb[i], camera, sp)) {
      sp.index = static_cast<int>(i);
      splats.push_back(sp);
    }
  }
  std::sort(splats.begin(), splats.end(), splat_before);
  return splats;
}

}  // namespace

RenderResult render(const GaussianFrame& frame, const Camera& camera,
                    const RenderOptions& options) {
  camera.validate();
  const std::size_t n = frame.size();
  if (frame.rotations.size() != n || frame.scales.size() != n || frame.opacities.size() != n) {
    throw ShapeError("render: Gaussian attribute counts differ");
  }
  const auto rgb = evaluate_sh(frame, camera.center());
  const auto sorted = project_and_sort(frame.means, frame.rotations, frame.scales,
                                       frame.opacities, rgb, camera);
  const auto grid = bin_splats(sorted, camera, options.tile_size);
  RenderResult out;
  out.width = camera.width;
  out.height = camera.height;
  out.rgb.assign(static_cast<std::size_t>(camera.width * camera.height * 3), 0.0);
  out.alpha.assign(static_cast<std::size_t>(camera.width * camera.height), 0.0);
  parallel_for(static_cast<std::int64_t>(grid.lists.size()), [&](std::int64_t tile) {
    const int tx = static_cast<int>(tile % grid.cols);
    const int ty = static_cast<int>(tile / grid.cols);
    const auto& list = grid.lists[static_cast<std::size_t>(tile)];
    for (int py = ty * grid.size; py < std::min(camera.height, (ty + 1) * grid.size); ++py) {
      for (int px = tx * grid.size; px < std::min(camera.width, (tx + 1) * grid.size); ++px) {
        const auto pix = static_cast<std::size_t>(py * camera.width + px);
        out.alpha[pix] = composite_pixel<false>(sorted, list, px, py, options.skip_low_alpha,
                                                options.early_termination, &out.rgb[3 * pix],
                                                nullptr);
      }
    }
  });
  return out;
}

Tensor sh_to_rgb(const Tensor& sh, const Tensor& means, const Vec3& camera_center, int degree) {
  using namespace ops;
  if (sh.rank() != 3 || sh.dim(1) != kShCoeffs || sh.dim(2) != 3) {
    throw ShapeError("sh_to_rgb: expected SH of shape [N, 4, 3], got " + shape_str(sh.shape()));
  }
  if (means.rank() != 2 || means.dim(0) != sh.dim(0) || means.dim(1) != 3) {
    throw ShapeError("sh_to_rgb: means " + shape_str(means.shape()) + " do not match SH " +
                     shape_str(sh.shape()));
  }
  const std::int64_t n = sh.dim(0);
  Tensor color;
  if (degree <= 0) {
    color = reshape(mul_scalar(slice(sh, 1, 0, 1), kShC0), {n, 3});
  } else {
    const auto c = Tensor::from({1, 3}, {camera_center.x(), camera_center.y(), camera_center.z()});
    const Tensor d = sub(means, c);
    const Tensor len = sqrt(sum(square(d), 1, true));
    const Tensor dir = div(d, len);
    // Basis row per Gaussian: [C0, -C1 y, C1 z, -C1 x].
    const Tensor x = slice(dir, 1, 0, 1);
    const Tensor y = slice(dir, 1, 1, 2);
    const Tensor z = slice(dir, 1, 2, 3);
    const std::vector<Tensor> parts{Tensor::full({n, 1}, kShC0), mul_scalar(y, -kShC1),
                                    mul_scalar(z, kShC1), mul_scalar(x, -kShC1)};
    const Tensor basis = reshape(concat(parts, 1), {n, 1, kShCoeffs});
    color = reshape(matmul(basis, sh), {n, 3});
  }
  return clamp(add_scalar(color, 0.5), 0.0, 1.0);
}

namespace {

std::vector<Vec3> rows3(const Tensor& t) {
  const auto v = t.values();
  std::vector<Vec3> out(static_cast<std::size_t>(t.dim(0)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
  return out;
}

std::vector<Eigen::Vector4d> rows4(const Tensor& t) {
  const auto v = t.values();
  std::vector<Eigen::Vector4d> out(static_cast<std::size_t>(t.dim(0)));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = Eigen::Vector4d(v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]);
  }
  return out;
}

/// d(vec of R(q))/dq for a unit quaternion, contracted with the matrix gradient.
Eigen::Vector4d quat_matrix_backward(const Eigen::Vector4d& q, const Mat3& g) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 dw, dx, dy, dz;
  dw << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  dx << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  dy << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  dz << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  return {g.cwiseProduct(dw).sum(), g.cwiseProduct(dx).sum(), g.cwiseProduct(dy).sum(),
          g.cwiseProduct(dz).sum()};
}

struct SplatGrad {
  Vec2 mean = Vec2::Zero();
  std::array<double, 3> conic{};
  double opacity = 0.0;
  Vec3 rgb = Vec3::Zero();
};

}  // namespace

Tensor render_differentiable(const Tensor& means, const Tensor& rotations, const Tensor& scales,
                             const Tensor& opacities, const Tensor& rgb, const Camera& camera,
                             double budget) {
  camera.validate();
  const std::int64_t n = means.dim(0);
  if (means.rank() != 2 || means.dim(1) != 3 || rotations.rank() != 2 || rotations.dim(0) != n ||
      rotations.dim(1) != 4 || scales.rank() != 2 || scales.dim(0) != n || scales.dim(1) != 3 ||
      opacities.numel() != n || rgb.rank() != 2 || rgb.dim(0) != n || rgb.dim(1) != 3) {
    throw ShapeError("render_differentiable: inconsistent inputs means " + shape_str(means.shape()) +
                     ", rotations " + shape_str(rotations.shape()) + ", scales " +
                     shape_str(scales.shape()) + ", opacities " + shape_str(opacities.shape()) +
                     ", rgb " + shape_str(rgb.shape()));
  }
  const double work = static_cast<double>(camera.width) * camera.height * static_cast<double>(n);
  if (work > budget) {
    throw ConfigError("render_differentiable: " + std::to_string(camera.width) + "x" +
                      std::to_string(camera.height) + " pixels x " + std::to_string(n) +
                      " splats exceeds the budget of " + std::to_string(budget));
  }
  for (const Tensor* t : {&means, &rotations, &scales, &opacities, &rgb}) {
    detail::require_finite(*t, "render_differentiable");
  }
  const auto mv = rows3(means);
  const auto qv = rows4(rotations);
  const auto sv = rows3(scales);
  const auto ov = opacities.values();
  const auto cv = rows3(rgb);
  auto sorted = std::make_shared<std::vector<Splat2D>>(
      project_and_sort(mv, qv, sv, std::vector<double>(ov.begin(), ov.end()), cv, camera));
  auto grid = std::make_shared<TileGrid>(bin_splats(*sorted, camera, 16));

  const int width = camera.width;
  const int height = camera.height;
  std::vector<double> image(static_cast<std::size_t>(width * height * 3), 0.0);
  for (std::size_t tile = 0; tile < grid->lists.size(); ++tile) {
    const int tx = static_cast<int>(tile) % grid->cols;
    const int ty = static_cast<int>(tile) / grid->cols;
    for (int py = ty * grid->size; py < std::min(height, (ty + 1) * grid->size); ++py) {
      for (int px = tx * grid->size; px < std::min(width, (tx + 1) * grid->size); ++px) {
        const auto pix = static_cast<std::size_t>(py * width + px);
        composite_pixel<false>(*sorted, grid->lists[tile], px, py, false, false, &image[3 * pix],
                               nullptr);
      }
    }
  }

  auto backward_fn = [sorted, grid, camera, m = means.impl(), q = rotations.impl(),
                      s = scales.impl(), o = opacities.impl(), c = rgb.impl()](const TensorImpl& out) {
    const int width = camera.width;
    const int height = camera.height;
    std::vector<SplatGrad> sg(sorted->size());
    std::vector<Contribution> rec;
    for (std::size_t tile = 0; tile < grid->lists.size(); ++tile) {
      const int tx = static_cast<int>(tile) % grid->cols;
      const int ty = static_cast<int>(tile) / grid->cols;
      const auto& list = grid->lists[tile];
      for (int py = ty * grid->size; py < std::min(height, (ty + 1) * grid->size); ++py) {
        for (int px = tx * grid->size; px < std::min(width, (tx + 1) * grid->size); ++px) {
          const auto pix = static_cast<std::size_t>(py * width + px);
          const Vec3 gc(out.grad[3 * pix], out.grad[3 * pix + 1], out.grad[3 * pix + 2]);
          if (gc.isZero(0.0)) continue;
          rec.clear();
          double scratch[3] = {0.0, 0.0, 0.0};
          composite_pixel<true>(*sorted, list, px, py, false, false, scratch, &rec);
          Vec3 behind = Vec3::Zero();  // color accumulated behind the current splat
          for (auto it = rec.rbegin(); it != rec.rend(); ++it) {
            const auto& sp = (*sorted)[static_cast<std::size_t>(it->splat)];
            auto& g = sg[static_cast<std::size_t>(it->splat)];
            g.rgb += it->transmittance * it->alpha * gc;
            const double dalpha = it->transmittance * (sp.rgb - behind).dot(gc);
            behind = it->alpha * sp.rgb + (1.0 - it->alpha) * behind;
            g.opacity += it->gauss * dalpha;
            const double dq = -0.5 * it->gauss * sp.opacity * dalpha;
            g.mean.x() += -2.0 * (sp.conic[0] * it->dx + sp.conic[1] * it->dy) * dq;
            g.mean.y() += -2.0 * (sp.conic[1] * it->dx + sp.conic[2] * it->dy) * dq;
            g.conic[0] += it->dx * it->dx * dq;
            g.conic[1] += 2.0 * it->dx * it->dy * dq;
            g.conic[2] += it->dy * it->dy * dq;
          }
        }
      }
    }

    double* gm = m->requires_grad ? m->grad_buffer() : nullptr;
    double* gq = q->requires_grad ? q->grad_buffer() : nullptr;
    double* gs = s->requires_grad ? s->grad_buffer() : nullptr;
    double* go = o->requires_grad ? o->grad_buffer() : nullptr;
    double* gcol = c->requires_grad ? c->grad_buffer() : nullptr;
    const Mat3& w = camera.world_to_camera.rotation;
    for (std::size_t k = 0; k < sorted->size(); ++k) {
      const auto& sp = (*sorted)[k];
      const auto& g = sg[k];
      const auto i = static_cast<std::size_t>(sp.index);
      if (go) go[i] += g.opacity;
      if (gcol) {
        for (int ch = 0; ch < 3; ++ch) gcol[3 * i + static_cast<std::size_t>(ch)] += g.rgb[ch];
      }
      if (!gm && !gq && !gs) continue;

      // Recompute the projection chain for this Gaussian.
      const Vec3 mean(m->value[3 * i], m->value[3 * i + 1], m->value[3 * i + 2]);
      const Eigen::Vector4d qraw(q->value[4 * i], q->value[4 * i + 1], q->value[4 * i + 2],
                                 q->value[4 * i + 3]);
      const Vec3 scale(s->value[3 * i], s->value[3 * i + 1], s->value[3 * i + 2]);
      const Vec3 p = camera.world_to_camera.apply(mean);
      const double iz = 1.0 / p.z();
      Eigen::Matrix<double, 2, 3> j;
      j << camera.fx * iz, 0.0, -camera.fx * p.x() * iz * iz,
           0.0, camera.fy * iz, -camera.fy * p.y() * iz * iz;
      const double qnorm = qraw.norm();
      const Eigen::Vector4d qn = qraw / qnorm;
      const Mat3 r = quat_to_matrix(qn);
      const Mat3 l = r * scale.asDiagonal();
      const Mat3 cov3 = l * l.transpose();
      const Mat3 covc = w * cov3 * w.transpose();

      // Conic -> 2-D covariance.
      Eigen::Matrix2d a;
      a << sp.conic[0], sp.conic[1], sp.conic[1], sp.conic[2];
      Eigen::Matrix2d ga;
      ga << g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2];
      const Eigen::Matrix2d gcov2 = -a * ga * a;
      const Eigen::Matrix<double, 2, 3> gj = 2.0 * gcov2 * j * covc;
      const Mat3 gcovc = j.transpose() * gcov2 * j;
      const Mat3 gcov3 = w.transpose() * gcovc * w;
      const Mat3 gl = 2.0 * gcov3 * l;

      if (gs) {
        for (int ax = 0; ax < 3; ++ax) gs[3 * i + static_cast<std::size_t>(ax)] += gl.col(ax).dot(r.col(ax));
      }
      if (gq) {
        const Mat3 gr = gl * scale.asDiagonal();
        const Eigen::Vector4d gqn = quat_matrix_backward(qn, gr);
        const Eigen::Vector4d gqr = (gqn - qn * qn.dot(gqn)) / qnorm;
        for (int e = 0; e < 4; ++e) gq[4 * i + static_cast<std::size_t>(e)] += gqr[e];
      }
      if (gm) {
        const double fx = camera.fx, fy = camera.fy;
        Vec3 gp = Vec3::Zero();
        gp.x() += g.mean.x() * fx * iz;
        gp.y() += g.mean.y() * fy * iz;
        gp.z() += -g.mean.x() * fx * p.x() * iz * iz - g.mean.y() * fy * p.y() * iz * iz;
        gp.x() += gj(0, 2) * (-fx * iz * iz);
        gp.y() += gj(1, 2) * (-fy * iz * iz);
        gp.z() += gj(0, 0) * (-fx * iz * iz) + gj(0, 2) * (2.0 * fx * p.x() * iz * iz * iz) +
                  gj(1, 1) * (-fy * iz * iz) + gj(1, 2) * (2.0 * fy * p.y() * iz * iz * iz);
        const Vec3 gmean = w.transpose() * gp;
        for (int ax = 0; ax < 3; ++ax) gm[3 * i + static_cast<std::size_t>(ax)] += gmean[ax];
      }
    }
  };
  return custom_op("render", {means, rotations, scales, opacities, rgb},
                   {height, width, 3}, std::move(image), std::move(backward_fn));
}

}  // namespace gavatar
