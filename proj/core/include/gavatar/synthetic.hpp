#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gavatar/image_io.hpp"
#include "gavatar/mesh.hpp"
#include "gavatar/render.hpp"
#include "gavatar/skeleton.hpp"

namespace gavatar {

struct BodyMeshOptions {
  int rings = 8;     // rings along each limb tube
  int segments = 12; // vertices around each ring
};

/// Capsule-tube body on the canonical skeleton. Each bone gets its own UV atlas
/// cell; the front of the head tube is the face region. Finger joints carry no
/// geometry (hands are short tubes skinned to the wrist).
TemplateMesh make_body_mesh(const Skeleton& skeleton, const BodyMeshOptions& options = {});

struct SyntheticSpec {
  int frames = 20;
  int views = 4;
  int width = 64;
  int height = 64;
  double focal = 101.0;
  double camera_distance = 3.0;
  std::int64_t gt_gaussians = 8000;
  int ambiguity_pairs = 2;
  double hidden_decay = 0.85;  // a in h_t = a h_{t-1} + (1 - a) s(theta_t)
  double motion_amplitude = 0.35;
  int face_dim = 4;
  int erosion_radius = 2;
  std::uint64_t seed = 1;
};

/// Procedural ground-truth surface color at a UV coordinate.
struct AppearanceState {
  double hidden = 0.0;           // wrinkle strength, in [0, 1]
  std::vector<double> phi;       // face embedding
  std::vector<double> theta;     // pose parameters (pose-dependent shading)
};
Vec3 procedural_color(const TemplateMesh& mesh, const Vec2& uv, int joint,
                      const AppearanceState& state);

struct CaptureFrame {
  Pose pose;
  std::vector<double> phi;
  double hidden = 0.0;
  std::vector<Image> images;  // per view, RGB
  std::vector<Image> masks;   // per view, 1 channel, alpha > 0 of the ground-truth render
  std::vector<Image> eroded;  // per view, masks eroded by the spec radius
};

struct CaptureDataset {
  TemplateMesh mesh;
  std::vector<Camera> cameras;
  std::vector<CaptureFrame> frames;
  std::vector<std::pair<int, int>> ambiguity_pairs;
  int face_dim = 0;

  std::vector<std::vector<double>> thetas() const;
  /// Directory layout: mesh.json, cameras.json, poses.gpsq, faces.gfem,
  /// manifest.json, frames/fFFFF_vV.png (+ _mask.png, _eroded.png).
  void save(const std::filesystem::path& dir) const;
  static CaptureDataset load(const std::filesystem::path& dir);
};

/// Camera list as JSON (intrinsics, image size, world-to-camera rotation and translation).
void save_cameras_json(const std::filesystem::path& path, std::span<const Camera> cameras);
std::vector<Camera> load_cameras_json(const std::filesystem::path& path);

/// "fFFFF_vV<suffix>.png", the per-view image naming used by datasets and renders.
std::string frame_file_name(int frame, int view, const std::string& suffix = "");

/// Cameras evenly spread around the body at the spec distance.
std::vector<Camera> make_camera_rig(const SyntheticSpec& spec);

/// Mean absolute difference between two procedural textures sampled on the
/// atlas cells (a texture-space distance for the ambiguity self-check).
double texture_distance(const TemplateMesh& mesh, const AppearanceState& a,
                        const AppearanceState& b, int resolution = 64);

/// Binary erosion with a square structuring element of the given radius.
Image erode_mask(const Image& mask, int radius);

/// Ground-truth Gaussians on the posed surface with procedural colors.
GaussianFrame ground_truth_frame(const TemplateMesh& mesh, const SurfaceSamples& samples,
                                 const Pose& pose, const AppearanceState& state);

/// Renders, masks, poses and the ambiguity fixture. Throws ConfigError when the
/// ambiguity constraints cannot be met.
CaptureDataset generate_synthetic_capture(const SyntheticSpec& spec);

/// Smooth random pose sequence on the canonical skeleton (no ambiguity pairs).
std::vector<Pose> random_motion(const Skeleton& skeleton, int frames, double amplitude,
                                std::uint64_t seed);

}  // namespace gavatar
