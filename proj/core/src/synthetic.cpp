#include "gavatar/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gavatar/binary_io.hpp"
#include "gavatar/error.hpp"
#include "gavatar/pose_io.hpp"

namespace gavatar {

using nlohmann::json;

namespace {

constexpr int kAtlasCols = 5;
constexpr int kAtlasRows = 4;
constexpr double kAtlasMargin = 0.02;
constexpr std::uint64_t kGroundTruthSampleSeed = 0x5eed5eedULL;

struct Tube {
  int joint = 0;         // skinned joint
  int child = -1;        // blended in near the far end
  int parent = -1;       // blended in near the near end
  Vec3 start, end;
  double r0 = 0.05, r1 = 0.05;
  bool face = false;
};

std::vector<Tube> body_tubes(const Skeleton& sk) {
  const auto world = sk.rest_world();
  const auto pos = [&](const std::string& name) {
    const int j = sk.find_joint(name);
    if (j < 0) throw ConfigError("body mesh: skeleton lacks joint '" + name + "'");
    return world[static_cast<std::size_t>(j)].translation;
  };
  const auto id = [&](const std::string& name) { return sk.find_joint(name); };
  std::vector<Tube> tubes;
  auto add = [&](const std::string& joint, const std::string& child, const Vec3& start,
                 const Vec3& end, double r0, double r1, bool blend_parent) {
    Tube t;
    t.joint = id(joint);
    t.child = child.empty() ? -1 : id(child);
    t.parent = blend_parent ? sk.joint(t.joint).parent : -1;
    t.start = start;
    t.end = end;
    t.r0 = r0;
    t.r1 = r1;
    tubes.push_back(t);
  };
  add("pelvis", "spine", pos("pelvis") - Vec3(0, 0.06, 0), pos("spine"), 0.13, 0.13, false);
  add("spine", "neck", pos("spine"), pos("neck"), 0.13, 0.15, true);
  add("neck", "head", pos("neck"), pos("head"), 0.05, 0.05, true);
  add("head", "", pos("head"), pos("head") + Vec3(0, 0.24, 0), 0.095, 0.085, false);
  tubes.back().face = true;
  for (const std::string s : {"l_", "r_"}) {
    add(s + "hip", s + "knee", pos(s + "hip"), pos(s + "knee"), 0.075, 0.06, true);
    add(s + "knee", s + "ankle", pos(s + "knee"), pos(s + "ankle"), 0.055, 0.045, true);
    add(s + "ankle", "", pos(s + "ankle"), pos(s + "ankle") + Vec3(0, -0.04, 0.14), 0.045, 0.04, true);
  }
  for (const std::string s : {"l_", "r_"}) {
    const double sx = s == "l_" ? 1.0 : -1.0;
    add(s + "clavicle", s + "shoulder", pos(s + "clavicle"), pos(s + "shoulder"), 0.05, 0.05, true);
    add(s + "shoulder", s + "elbow", pos(s + "shoulder"), pos(s + "elbow"), 0.05, 0.042, true);
    add(s + "elbow", s + "wrist", pos(s + "elbow"), pos(s + "wrist"), 0.042, 0.035, true);
    add(s + "wrist", "", pos(s + "wrist"), pos(s + "wrist") + Vec3(0.11 * sx, 0, 0), 0.035, 0.03, true);
  }
  return tubes;
}

struct Cell {
  double u0, v0, w, h;
};

Cell atlas_cell(std::size_t index) {
  const double cw = 1.0 / kAtlasCols;
  const double ch = 1.0 / kAtlasRows;
  const auto c = static_cast<double>(index % kAtlasCols);
  const auto r = static_cast<double>(index / kAtlasCols);
  return {c * cw + kAtlasMargin, r * ch + kAtlasMargin, cw - 2 * kAtlasMargin, ch - 2 * kAtlasMargin};
}

/// Cell index and cell-local coordinates of a UV point; -1 in the margins.
int locate_cell(const Vec2& uv, double& lu, double& lv) {
  const int c = std::clamp(static_cast<int>(uv.x() * kAtlasCols), 0, kAtlasCols - 1);
  const int r = std::clamp(static_cast<int>(uv.y() * kAtlasRows), 0, kAtlasRows - 1);
  const auto cell = atlas_cell(static_cast<std::size_t>(r * kAtlasCols + c));
  lu = (uv.x() - cell.u0) / cell.w;
  lv = (uv.y() - cell.v0) / cell.h;
  if (lu < 0.0 || lu > 1.0 || lv < 0.0 || lv > 1.0) return -1;
  return r * kAtlasCols + c;
}

constexpr double kFaceU0 = 0.3, kFaceU1 = 0.7, kFaceV0 = 0.1, kFaceV1 = 0.75;

}  // namespace

TemplateMesh make_body_mesh(const Skeleton& skeleton, const BodyMeshOptions& options) {
  if (options.rings < 2 || options.segments < 3) throw ConfigError("body mesh: need >= 2 rings and >= 3 segments");
  const auto tubes = body_tubes(skeleton);
  if (tubes.size() > static_cast<std::size_t>(kAtlasCols * kAtlasRows)) throw ConfigError("body mesh: atlas too small");
  TemplateMesh mesh;
  mesh.skeleton = skeleton;
  const int nr = options.rings;
  const int ns = options.segments;
  for (std::size_t ti = 0; ti < tubes.size(); ++ti) {
    const Tube& tube = tubes[ti];
    const Cell cell = atlas_cell(ti);
    const Vec3 axis = (tube.end - tube.start).normalized();
    Vec3 ref(0, 0, -1);
    if (std::abs(axis.dot(ref)) > 0.9) ref = Vec3(0, -1, 0);
    const Vec3 e1 = (ref - ref.dot(axis) * axis).normalized();
    const Vec3 e2 = axis.cross(e1);
    const auto skin_at = [&](double t) {
      SkinRow row;
      double wc = 0.0, wp = 0.0;
      if (tube.child >= 0 && t > 0.75) wc = 0.5 * (t - 0.75) / 0.25;
      if (tube.parent >= 0 && t < 0.25) wp = 0.5 * (0.25 - t) / 0.25;
      row.push_back({tube.joint, 1.0 - wc - wp});
      if (wc > 0.0) row.push_back({tube.child, wc});
      if (wp > 0.0) row.push_back({tube.parent, wp});
      return normalize_skin_row(row);
    };
    const int base = static_cast<int>(mesh.vertices.size());
    for (int r = 0; r < nr; ++r) {
      const double t = static_cast<double>(r) / (nr - 1);
      const Vec3 c = tube.start + t * (tube.end - tube.start);
      const double rad = tube.r0 + t * (tube.r1 - tube.r0);
      for (int s = 0; s <= ns; ++s) {
        const double a = 2.0 * std::numbers::pi * s / ns;
        mesh.vertices.push_back(c + rad * (std::cos(a) * e1 + std::sin(a) * e2));
        mesh.uv.emplace_back(cell.u0 + cell.w * s / ns, cell.v0 + cell.h * t);
        mesh.skinning.push_back(skin_at(t));
      }
    }
    for (int r = 0; r + 1 < nr; ++r) {
      for (int s = 0; s < ns; ++s) {
        const int a = base + r * (ns + 1) + s;
        const int b = a + ns + 1;
        mesh.triangles.push_back({a, b, a + 1});
        mesh.triangles.push_back({a + 1, b, b + 1});
      }
    }
    // End caps as fans around a center vertex.
    for (int end = 0; end < 2; ++end) {
      const double t = end;
      const int center = static_cast<int>(mesh.vertices.size());
      mesh.vertices.push_back(end == 0 ? tube.start : tube.end);
      mesh.uv.emplace_back(cell.u0 + 0.5 * cell.w, cell.v0 + cell.h * t);
      mesh.skinning.push_back(skin_at(t));
      const int ring = base + (end == 0 ? 0 : (nr - 1) * (ns + 1));
      for (int s = 0; s < ns; ++s) mesh.triangles.push_back({center, ring + s + 1, ring + s});
    }
    if (tube.face) {
      // The front of the head faces +z, which is angle pi in the tube frame.
      mesh.face_uv_polygons.push_back({Vec2(cell.u0 + kFaceU0 * cell.w, cell.v0 + kFaceV0 * cell.h),
                                       Vec2(cell.u0 + kFaceU1 * cell.w, cell.v0 + kFaceV0 * cell.h),
                                       Vec2(cell.u0 + kFaceU1 * cell.w, cell.v0 + kFaceV1 * cell.h),
                                       Vec2(cell.u0 + kFaceU0 * cell.w, cell.v0 + kFaceV1 * cell.h)});
    }
  }
  mesh.validate();
  return mesh;
}

Vec3 procedural_color(const TemplateMesh& mesh, const Vec2& uv, int joint, const AppearanceState& state) {
  static const Vec3 palette[] = {{0.55, 0.35, 0.30}, {0.30, 0.45, 0.60}, {0.60, 0.58, 0.40},
                                 {0.35, 0.55, 0.38}, {0.58, 0.42, 0.58}, {0.45, 0.45, 0.50}};
  double lu = 0.0, lv = 0.0;
  const int cell = locate_cell(uv, lu, lv);
  if (cell < 0) return Vec3::Zero();
  constexpr double pi = std::numbers::pi;
  Vec3 color;
  if (mesh.in_face_region(uv)) {
    color = Vec3(0.80, 0.62, 0.52);
    const double fu = (lu - kFaceU0) / (kFaceU1 - kFaceU0);
    const double fv = (lv - kFaceV0) / (kFaceV1 - kFaceV0);
    for (std::size_t k = 0; k < state.phi.size(); ++k) {
      const double kk = static_cast<double>(k + 1);
      const double pattern = std::sin(pi * kk * fu) * std::cos(pi * kk * fv);
      color += 0.12 * state.phi[k] * pattern * Vec3(1.0, 0.6 - 0.2 * kk, 0.3 * kk - 0.5);
    }
  } else {
    color = palette[cell % 6] * (1.0 + 0.15 * std::sin(2 * pi * lu) * std::sin(pi * lv));
    const double wrinkle = 0.5 + 0.5 * std::sin(2 * pi * (3.0 * lv + lu));
    color *= 1.0 - 0.5 * state.hidden * wrinkle;
  }
  if (joint >= 0 && static_cast<std::size_t>(3 * joint + 2) < state.theta.size()) {
    const auto j = static_cast<std::size_t>(3 * joint);
    const double bend = state.theta[j] + state.theta[j + 1] + state.theta[j + 2];
    color += Vec3::Constant(0.08 * std::tanh(2.0 * bend));
  }
  return color.cwiseMax(0.02).cwiseMin(0.98);
}

std::vector<std::vector<double>> CaptureDataset::thetas() const {
  std::vector<std::vector<double>> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(f.pose.theta);
  return out;
}

std::vector<Camera> make_camera_rig(const SyntheticSpec& spec) {
  if (spec.views < 1 || spec.width < 1 || spec.height < 1 || !(spec.focal > 0.0) ||
      !(spec.camera_distance > 0.0)) {
    throw ConfigError("synthetic: invalid camera rig");
  }
  std::vector<Camera> cams;
  const Vec3 target(0.0, 0.92, 0.0);
  for (int v = 0; v < spec.views; ++v) {
    const double a = 2.0 * std::numbers::pi * (v + 0.25) / spec.views;
    const Vec3 eye = target + Vec3(spec.camera_distance * std::sin(a), 0.25, spec.camera_distance * std::cos(a));
    cams.push_back(Camera::look_at(eye, target, Vec3(0, 1, 0), spec.focal, spec.width, spec.height));
  }
  return cams;
}

double texture_distance(const TemplateMesh& mesh, const AppearanceState& a, const AppearanceState& b,
                        int resolution) {
  double total = 0.0;
  std::int64_t count = 0;
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      const Vec2 uv((x + 0.5) / resolution, (y + 0.5) / resolution);
      double lu = 0.0, lv = 0.0;
      if (locate_cell(uv, lu, lv) < 0) continue;
      total += (procedural_color(mesh, uv, -1, a) - procedural_color(mesh, uv, -1, b)).cwiseAbs().sum() / 3.0;
      ++count;
    }
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

Image erode_mask(const Image& mask, int radius) {
  if (mask.channels != 1) throw ShapeError("erode_mask: expected a 1-channel mask");
  Image out = Image::zeros(mask.width, mask.height, 1);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      bool keep = mask.at(x, y, 0) > 0.5;
      for (int dy = -radius; keep && dy <= radius; ++dy) {
        for (int dx = -radius; keep && dx <= radius; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= mask.width || yy >= mask.height || mask.at(xx, yy, 0) <= 0.5) keep = false;
        }
      }
      out.at(x, y, 0) = keep ? 1.0 : 0.0;
    }
  }
  return out;
}

GaussianFrame ground_truth_frame(const TemplateMesh& mesh, const SurfaceSamples& samples, const Pose& pose,
                                 const AppearanceState& state) {
  const auto world = forward_kinematics(mesh.skeleton, pose);
  const auto posed = lbs(samples.positions, samples.skinning, mesh.skeleton.rest_world(), world);
  GaussianFrame g;
  g.sh_degree = 0;
  g.means = posed;
  g.rotations.assign(posed.size(), Eigen::Vector4d(1, 0, 0, 0));
  g.scales.assign(posed.size(), Vec3::Constant(0.012));
  g.opacities.assign(posed.size(), 0.9);
  g.sh.assign(posed.size() * kShCoeffs * 3, 0.0);
  for (std::size_t i = 0; i < posed.size(); ++i) {
    const Vec3 c = procedural_color(mesh, samples.uv[i], dominant_joint(samples.skinning[i]), state);
    for (int ch = 0; ch < 3; ++ch) g.sh[i * kShCoeffs * 3 + static_cast<std::size_t>(ch)] = (c[ch] - 0.5) / kShC0;
  }
  return g;
}

std::vector<Pose> random_motion(const Skeleton& skeleton, int frames, double amplitude, std::uint64_t seed) {
  if (frames < 1) throw ConfigError("random_motion: need at least one frame");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int p = skeleton.param_count();
  std::vector<double> scale(static_cast<std::size_t>(p), 0.0);
  for (const auto& g : skeleton.groups()) {
    double s = 1.4;
    if (g.name == "torso_head") s = 1.0;
    if (g.name.find("hand") != std::string::npos) s = 0.85;
    for (int j : g.joints) {
      for (int k = 0; k < 3; ++k) scale[static_cast<std::size_t>(3 * j + k)] = s;
    }
  }
  scale[0] = scale[1] = scale[2] = 0.45;  // root orientation stays moderate
  struct Wave { double f1, p1, f2, p2, offset; };
  std::vector<Wave> waves(static_cast<std::size_t>(p));
  for (auto& w : waves) {
    w = {0.03 + 0.07 * unit(rng), 2 * std::numbers::pi * unit(rng), 0.08 + 0.1 * unit(rng),
         2 * std::numbers::pi * unit(rng), unit(rng) - 0.5};
  }
  const double gf = 0.02 + 0.03 * unit(rng);
  const double gp = 2 * std::numbers::pi * unit(rng);
  std::vector<Pose> out;
  for (int t = 0; t < frames; ++t) {
    Pose pose = Pose::zero(skeleton);
    for (int i = 0; i < p; ++i) {
      const auto& w = waves[static_cast<std::size_t>(i)];
      const double v = 0.6 * std::sin(2 * std::numbers::pi * w.f1 * t + w.p1) +
                       0.4 * std::sin(2 * std::numbers::pi * w.f2 * t + w.p2) + 0.3 * w.offset;
      pose.theta[static_cast<std::size_t>(i)] = amplitude * scale[static_cast<std::size_t>(i)] * v;
    }
    const double yaw = 0.3 * std::sin(2 * std::numbers::pi * gf * t + gp);
    pose.global.rotation = axis_angle_to_matrix(Vec3(0, yaw, 0));
    pose.global.translation = Vec3(0.04 * std::sin(2 * std::numbers::pi * gf * t), 0.0,
                                   0.04 * std::cos(2 * std::numbers::pi * gf * t + gp));
    out.push_back(quantize_pose(pose));
  }
  return out;
}

namespace {

double hidden_drive(const Skeleton& sk, const std::vector<double>& theta) {
  const auto at = [&](const char* name, int axis) {
    const int j = sk.find_joint(name);
    return j < 0 ? 0.0 : theta[static_cast<std::size_t>(3 * j + axis)];
  };
  return 0.5 + 0.5 * std::tanh(4.0 * (at("spine", 0) + at("l_shoulder", 2) - at("r_elbow", 1)));
}

double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

CaptureDataset generate_synthetic_capture(const SyntheticSpec& spec) {
  if (spec.frames < 1) throw ConfigError("synthetic: frames must be >= 1");
  if (spec.ambiguity_pairs < 0 || spec.frames < 4 * spec.ambiguity_pairs) {
    throw ConfigError("synthetic: " + std::to_string(spec.ambiguity_pairs) + " ambiguity pairs need at least " +
                      std::to_string(4 * spec.ambiguity_pairs) + " frames, got " + std::to_string(spec.frames));
  }
  if (!(spec.hidden_decay >= 0.0 && spec.hidden_decay < 1.0)) throw ConfigError("synthetic: hidden_decay must be in [0, 1)");
  if (spec.face_dim < 0 || spec.erosion_radius < 0 || spec.gt_gaussians < 1) throw ConfigError("synthetic: invalid spec");
  CaptureDataset ds;
  ds.mesh = make_body_mesh(Skeleton::canonical());
  ds.cameras = make_camera_rig(spec);
  ds.face_dim = spec.face_dim;
  const auto samples = sample_surface(ds.mesh, spec.gt_gaussians, kGroundTruthSampleSeed);
  const auto& sk = ds.mesh.skeleton;

  auto poses = random_motion(sk, spec.frames, spec.motion_amplitude, spec.seed);
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<double>> phis(static_cast<std::size_t>(spec.frames));
  std::vector<double> fphase(static_cast<std::size_t>(spec.face_dim)), ffreq(fphase.size());
  for (std::size_t k = 0; k < fphase.size(); ++k) {
    fphase[k] = 2 * std::numbers::pi * unit(rng);
    ffreq[k] = 0.05 + 0.15 * unit(rng);
  }
  for (int t = 0; t < spec.frames; ++t) {
    auto& phi = phis[static_cast<std::size_t>(t)];
    for (std::size_t k = 0; k < fphase.size(); ++k) phi.push_back(std::sin(2 * std::numbers::pi * ffreq[k] * t + fphase[k]));
    phi = quantize_vector(phi);
  }

  // Ambiguity fixture: frame j repeats frame i's driving signals exactly while
  // the hidden state is pushed to the opposite end of its range.
  std::vector<int> forced(static_cast<std::size_t>(spec.frames), -1);
  const int stride = spec.ambiguity_pairs > 0 ? spec.frames / (2 * spec.ambiguity_pairs) : 0;
  for (int k = 0; k < spec.ambiguity_pairs; ++k) {
    const int i = 1 + k * stride;
    const int j = i + spec.frames / 2;
    if (j >= spec.frames || i == j) throw ConfigError("synthetic: ambiguity pair does not fit the sequence");
    poses[static_cast<std::size_t>(j)] = poses[static_cast<std::size_t>(i)];
    phis[static_cast<std::size_t>(j)] = phis[static_cast<std::size_t>(i)];
    forced[static_cast<std::size_t>(j)] = i;
    ds.ambiguity_pairs.emplace_back(i, j);
  }
  std::vector<double> hidden(static_cast<std::size_t>(spec.frames));
  for (int t = 0; t < spec.frames; ++t) {
    const double drive = hidden_drive(sk, poses[static_cast<std::size_t>(t)].theta);
    double h = t == 0 ? drive : spec.hidden_decay * hidden[static_cast<std::size_t>(t - 1)] + (1.0 - spec.hidden_decay) * drive;
    if (const int i = forced[static_cast<std::size_t>(t)]; i >= 0) {
      const double hi = hidden[static_cast<std::size_t>(i)];
      h = hi >= 0.5 ? std::max(0.0, hi - 0.8) : std::min(1.0, hi + 0.8);
    }
    hidden[static_cast<std::size_t>(t)] = h;
  }

  for (const auto& [i, j] : ds.ambiguity_pairs) {
    const auto& ti = poses[static_cast<std::size_t>(i)].theta;
    const auto& tj = poses[static_cast<std::size_t>(j)].theta;
    double d2 = 0.0;
    for (std::size_t p = 0; p < ti.size(); ++p) d2 += (ti[p] - tj[p]) * (ti[p] - tj[p]);
    const AppearanceState a{hidden[static_cast<std::size_t>(i)], phis[static_cast<std::size_t>(i)], ti};
    const AppearanceState b{hidden[static_cast<std::size_t>(j)], phis[static_cast<std::size_t>(j)], tj};
    const double tex = texture_distance(ds.mesh, a, b);
    if (!(std::sqrt(d2) < 1e-3) || !(tex > 0.05)) {
      throw ConfigError("synthetic: ambiguity pair (" + std::to_string(i) + ", " + std::to_string(j) +
                        ") has pose distance " + std::to_string(std::sqrt(d2)) + " and texture distance " +
                        std::to_string(tex));
    }
  }

  ds.frames.resize(static_cast<std::size_t>(spec.frames));
  for (int t = 0; t < spec.frames; ++t) {
    auto& f = ds.frames[static_cast<std::size_t>(t)];
    f.pose = poses[static_cast<std::size_t>(t)];
    f.phi = phis[static_cast<std::size_t>(t)];
    f.hidden = hidden[static_cast<std::size_t>(t)];
    const AppearanceState state{f.hidden, f.phi, f.pose.theta};
    const auto gt = ground_truth_frame(ds.mesh, samples, f.pose, state);
    for (const auto& cam : ds.cameras) {
      const auto r = render(gt, cam);
      Image img = Image::zeros(cam.width, cam.height, 3);
      Image mask = Image::zeros(cam.width, cam.height, 1);
      for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = quantize8(r.rgb[i]);
      for (std::size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = r.alpha[i] > 0.0 ? 1.0 : 0.0;
      f.eroded.push_back(erode_mask(mask, spec.erosion_radius));
      f.images.push_back(std::move(img));
      f.masks.push_back(std::move(mask));
    }
  }
  return ds;
}

namespace {

std::string frame_name(std::size_t frame, std::size_t view, const char* suffix) {
  std::ostringstream ss;
  ss << "f" << std::setw(4) << std::setfill('0') << frame << "_v" << view << suffix << ".png";
  return ss.str();
}

json camera_json(const Camera& c) {
  json r = json::array();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) r.push_back(c.world_to_camera.rotation(i, j));
  }
  const auto& t = c.world_to_camera.translation;
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height},
          {"rotation", r}, {"translation", {t.x(), t.y(), t.z()}}};
}

Camera camera_from_json(const json& j) {
  Camera c;
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  const auto& r = j.at("rotation");
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) c.world_to_camera.rotation(i, k) = r.at(static_cast<std::size_t>(3 * i + k)).get<double>();
  }
  const auto& t = j.at("translation");
  c.world_to_camera.translation = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
  c.validate();
  return c;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

json read_json(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

}  // namespace

void save_cameras_json(const std::filesystem::path& path, std::span<const Camera> cameras) {
  json cams = json::array();
  for (const auto& c : cameras) cams.push_back(camera_json(c));
  write_text(path, cams.dump(1));
}

std::vector<Camera> load_cameras_json(const std::filesystem::path& path) {
  std::vector<Camera> out;
  try {
    for (const auto& c : read_json(path)) out.push_back(camera_from_json(c));
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  return out;
}

std::string frame_file_name(int frame, int view, const std::string& suffix) {
  return frame_name(static_cast<std::size_t>(frame), static_cast<std::size_t>(view), suffix.c_str());
}

void CaptureDataset::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir / "frames");
  mesh.save_json(dir / "mesh.json");
  save_cameras_json(dir / "cameras.json", cameras);
  PoseSequence ps;
  ps.param_count = static_cast<std::uint32_t>(mesh.skeleton.param_count());
  VectorSequence fs;
  fs.dim = static_cast<std::uint32_t>(face_dim);
  json hidden = json::array();
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto& f = frames[t];
    ps.frames.push_back(f.pose);
    fs.frames.push_back(f.phi);
    hidden.push_back(f.hidden);
    for (std::size_t v = 0; v < f.images.size(); ++v) {
      write_png(dir / "frames" / frame_name(t, v, ""), f.images[v]);
      write_png(dir / "frames" / frame_name(t, v, "_mask"), f.masks[v]);
      write_png(dir / "frames" / frame_name(t, v, "_eroded"), f.eroded[v]);
    }
  }
  ps.save(dir / "poses.gpsq");
  fs.save(dir / "faces.gfem");
  json pairs = json::array();
  for (const auto& [i, j] : ambiguity_pairs) pairs.push_back({i, j});
  const json manifest{{"frames", frames.size()}, {"views", cameras.size()}, {"face_dim", face_dim},
                      {"hidden", hidden}, {"ambiguity_pairs", pairs}};
  write_text(dir / "manifest.json", manifest.dump(1));
}

CaptureDataset CaptureDataset::load(const std::filesystem::path& dir) {
  CaptureDataset ds;
  ds.mesh = TemplateMesh::load_json(dir / "mesh.json");
  ds.cameras = load_cameras_json(dir / "cameras.json");
  const json manifest = read_json(dir / "manifest.json");
  const auto n = manifest.at("frames").get<std::size_t>();
  ds.face_dim = manifest.at("face_dim").get<int>();
  for (const auto& p : manifest.at("ambiguity_pairs")) ds.ambiguity_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
  const auto ps = PoseSequence::load(dir / "poses.gpsq");
  const auto fs = VectorSequence::load(dir / "faces.gfem");
  if (ps.frames.size() != n || fs.frames.size() != n || static_cast<int>(fs.dim) != ds.face_dim ||
      static_cast<int>(ps.param_count) != ds.mesh.skeleton.param_count()) {
    throw FormatError("dataset '" + dir.string() + "': poses, faces and manifest disagree");
  }
  ds.frames.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    auto& f = ds.frames[t];
    f.pose = ps.frames[t];
    f.phi = fs.frames[t];
    f.hidden = manifest.at("hidden").at(t).get<double>();
    for (std::size_t v = 0; v < ds.cameras.size(); ++v) {
      f.images.push_back(read_png(dir / "frames" / frame_name(t, v, "")));
      f.masks.push_back(read_png(dir / "frames" / frame_name(t, v, "_mask")));
      f.eroded.push_back(read_png(dir / "frames" / frame_name(t, v, "_eroded")));
    }
  }
  return ds;
}

}  // namespace gavatar
