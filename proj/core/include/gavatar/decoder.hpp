#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gavatar/checkpoint.hpp"
#include "gavatar/hierarchy.hpp"
#include "gavatar/localization.hpp"
#include "gavatar/mesh.hpp"
#include "gavatar/render.hpp"
#include "gavatar/skeleton.hpp"
#include "gavatar/tensor.hpp"

namespace gavatar {

inline constexpr int kBasisSize = 16;
inline constexpr int kLatentDim = 16;
inline constexpr double kMaxScale = 0.2;

/// Property blocks of the per-Gaussian corrective basis.
enum class Property { Rotation, Scale, Opacity, Sh0, ShN };

/// Fixed structure shared by every frame: template mesh, hierarchy, masks and pose prior.
struct AvatarRig {
  TemplateMesh mesh;
  Hierarchy hierarchy;
  PoseMaskSet masks;
  LocalPcaModel pose_prior;
  int face_dim = 0;

  const Skeleton& skeleton() const { return mesh.skeleton; }
  std::int64_t anchor_input_dim() const {
    return skeleton().param_count() + face_dim + kLatentDim;
  }
  /// Stored under "rig/", "hier/" and "loc/"; the mesh is embedded as JSON bytes.
  void save(Checkpoint& ck) const;
  static AvatarRig load(const Checkpoint& ck);
};

/// Hierarchy, localization masks and the pose prior fitted on training poses.
AvatarRig build_rig(const TemplateMesh& mesh, const HierarchyCounts& counts,
                    std::span<const std::vector<double>> training_thetas, int face_dim,
                    std::uint64_t seed);

struct DecoderConfig {
  std::vector<int> hidden{64, 32, 32, 32};
  double init_scale = 0.015;
  double init_opacity_logit = 2.0;
  double head_init_std = 1e-2;
};

/// Learnable decoder state. Anchor MLP weights are stacked per anchor so one
/// batched matmul evaluates every anchor's private network.
struct AvatarDecoder {
  std::vector<Tensor> mlp_weights;  // [N_a, in, out]
  std::vector<Tensor> mlp_biases;   // [N_a, 1, out]
  Tensor rotation_bias;    // [N_g, 4]
  Tensor rotation_basis;   // [N_g, 4, 16]
  Tensor scale_bias;       // [N_g, 3]
  Tensor scale_basis;      // [N_g, 3, 16]
  Tensor opacity_bias;     // [N_g, 1]
  Tensor sh0_bias;         // [N_g, 3]
  Tensor sh0_basis;        // [N_g, 3, 16]
  Tensor shn_bias;         // [N_g, 9]
  Tensor shn_basis;        // [N_g, 9, 16]
  Tensor offset;           // [N_g, 3] rest offset
  Tensor control_bias;     // [N_c, 3]
  Tensor control_basis;    // [N_c, 3, 16]

  static AvatarDecoder init(const AvatarRig& rig, const DecoderConfig& config, std::uint64_t seed);

  std::int64_t anchor_count() const { return mlp_weights.front().dim(0); }
  std::int64_t input_dim() const { return mlp_weights.front().dim(1); }
  std::vector<Tensor> mlp_parameters() const;

  void save(Checkpoint& ck, const std::string& prefix = "dec/") const;
  static AvatarDecoder load(const Checkpoint& ck, const std::string& prefix = "dec/");
};

/// Per-anchor MLP forward: inputs [N_a, in] -> [N_a, 32] (Gaussian then control coefficients).
Tensor decode_anchors(const AvatarDecoder& decoder, const Tensor& inputs);

/// Single-anchor convenience wrapper around the batched MLP.
std::pair<std::vector<double>, std::vector<double>> decode_anchor(
    const AvatarDecoder& decoder, std::int64_t anchor, std::span<const double> theta_local,
    std::span<const double> phi_local, std::span<const double> latent);

/// h_k(lambda + <w, dLambda>) for one property over all Gaussians. `basis` may
/// be undefined (no corrective). bias: [N, K], basis: [N, K, 16], w: [N, 16].
Tensor assemble_property(const Tensor& bias, const Tensor& basis, const Tensor& w, Property kind);

/// Localized anchor inputs [N_a, P + D] from prior-processed joint parameters.
Tensor anchor_pose_features(const AvatarRig& rig, std::span<const double> theta_features,
                            std::span<const double> phi);

struct FrameOptions {
  bool correctives = true;
};

/// Differentiable Gaussian set for one frame.
struct DecodedFrame {
  Tensor means;            // [N_g, 3] world
  Tensor rotations;        // [N_g, 4]
  Tensor scales;           // [N_g, 3]
  Tensor opacities;        // [N_g, 1]
  Tensor sh;               // [N_g, 4, 3]
  Tensor control_offsets;  // [N_c, 3]
  Tensor anchor_outputs;   // [N_a, 32]; undefined when correctives are off
};

/// Full frame decode. Joint features pass through the pose prior; posing uses the raw pose.
DecodedFrame pose_frame(const AvatarRig& rig, const AvatarDecoder& decoder, const Pose& pose,
                        std::span<const double> phi, const Tensor& latents,
                        const FrameOptions& options = {});

/// Same as above with explicit (already prior-processed) joint features.
DecodedFrame pose_frame_with_features(const AvatarRig& rig, const AvatarDecoder& decoder,
                                      const Pose& pose, std::span<const double> theta_features,
                                      std::span<const double> phi, const Tensor& latents,
                                      const FrameOptions& options = {});

GaussianFrame to_gaussian_frame(const DecodedFrame& frame, int sh_degree);

}  // namespace gavatar
