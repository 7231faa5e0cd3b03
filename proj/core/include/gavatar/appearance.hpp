#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "gavatar/checkpoint.hpp"
#include "gavatar/image_io.hpp"
#include "gavatar/mesh.hpp"
#include "gavatar/render.hpp"
#include "gavatar/tensor.hpp"

namespace gavatar {

/// Square RGB texture over the mesh UV atlas. Texel (x, y) covers the UV point
/// ((x + 0.5) / R, (y + 0.5) / R).
struct UvTexture {
  int resolution = 0;
  std::vector<double> rgb;     // [R, R, 3]
  std::vector<std::uint8_t> valid;  // [R, R]

  std::int64_t valid_count() const;
  /// Channel-major [3, R, R] tensor for the encoder; invalid texels are 0.
  Tensor to_tensor() const;
  Image to_image() const;
  /// PNG plus a sidecar validity mask "<stem>_valid.png".
  void save_png(const std::filesystem::path& path) const;
};

/// Surface location of every texel: the first triangle (in mesh order) whose
/// UV footprint contains the texel center, or -1.
struct UvAtlasMap {
  int resolution = 0;
  std::vector<int> triangle;
  std::vector<Vec3> barycentric;
};
UvAtlasMap build_uv_map(const TemplateMesh& mesh, int resolution);

/// Nearest-surface depth per pixel of a posed triangle mesh (+inf where empty).
std::vector<double> rasterize_depth(std::span<const Vec3> vertices,
                                    std::span<const std::array<int, 3>> triangles,
                                    const Camera& camera);

/// One input view for texture projection.
struct TextureView {
  const Camera* camera = nullptr;
  const Image* image = nullptr;   // RGB
  const Image* mask = nullptr;    // eroded foreground mask, 1 channel
};

/// Per channel: median m, keep samples in [0.8 m, 1.1 m], average the kept ones.
Vec3 fuse_texel_samples(std::span<const Vec3> samples);

/// Multi-view texture: each texel's posed surface point is projected into every
/// view; visible samples inside the eroded mask are fused with the median rule.
/// Face-region texels are zeroed last. Throws NumericalError when no texel is seen.
UvTexture project_uv_texture(const TemplateMesh& mesh, const UvAtlasMap& map, const Pose& pose,
                             std::span<const TextureView> views);

struct EncoderConfig {
  int resolution = 128;
  int output_side = 32;
  int latent_channels = 16;
  int first_channels = 8;
  int max_channels = 128;
  int groups = 8;
  double init_std = 0.05;
};

/// Down-convolution stack (3x3, stride 2, group norm, ReLU) with two 3x3 heads.
struct Encoder {
  EncoderConfig config;
  std::vector<Tensor> conv_weights;  // [C_out, C_in, 3, 3]
  std::vector<Tensor> conv_biases;   // [C_out]
  Tensor mu_weight, mu_bias;
  Tensor logvar_weight, logvar_bias;

  static Encoder init(const EncoderConfig& config, std::uint64_t seed);
  std::vector<Tensor> parameters() const;
  void save(Checkpoint& ck, const std::string& prefix = "enc/") const;
  static Encoder load(const Checkpoint& ck, const std::string& prefix = "enc/");
};

/// (mu, log sigma^2) maps, each [N_l, S, S], from a [3, R, R] texture.
std::pair<Tensor, Tensor> encode(const Encoder& encoder, const Tensor& texture);

/// z = mu + exp(logvar / 2) * noise. An undefined noise tensor means noise = 0.
Tensor sample_latent(const Tensor& mu, const Tensor& logvar, const Tensor& noise);

/// Per-anchor codes [N_a, N_l] by bilinear sampling of z at the anchor UVs.
Tensor anchor_latents(const Tensor& z, std::span<const Vec2> anchor_uvs);

/// mean of 0.5 (mu^2 + exp(logvar) - 1 - logvar).
Tensor kl_loss(const Tensor& mu, const Tensor& logvar);

}  // namespace gavatar
