#include "gavatar/appearance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "gavatar/error.hpp"
#include "gavatar/ops.hpp"

namespace gavatar {

using namespace ops;

namespace {

constexpr double kVisibilityTolerance = 0.015;  // meters behind the z-buffer still counted visible

bool project_point(const Camera& cam, const Vec3& world, double& u, double& v, double& z) {
  const Vec3 p = cam.world_to_camera.apply(world);
  if (p.z() < kNearPlane) return false;
  z = p.z();
  u = cam.fx * p.x() / p.z() + cam.cx;
  v = cam.fy * p.y() / p.z() + cam.cy;
  return true;
}

double median(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::int64_t UvTexture::valid_count() const {
  return std::count_if(valid.begin(), valid.end(), [](std::uint8_t b) { return b != 0; });
}

Tensor UvTexture::to_tensor() const {
  const auto r = static_cast<std::size_t>(resolution);
  std::vector<double> chw(3 * r * r, 0.0);
  for (std::size_t i = 0; i < r * r; ++i) {
    if (!valid[i]) continue;
    for (std::size_t c = 0; c < 3; ++c) chw[c * r * r + i] = rgb[3 * i + c];
  }
  return Tensor::from({3, resolution, resolution}, std::move(chw));
}

Image UvTexture::to_image() const {
  Image img = Image::zeros(resolution, resolution, 3);
  img.data = rgb;
  return img;
}

void UvTexture::save_png(const std::filesystem::path& path) const {
  write_png(path, to_image());
  Image mask = Image::zeros(resolution, resolution, 1);
  for (std::size_t i = 0; i < valid.size(); ++i) mask.data[i] = valid[i] ? 1.0 : 0.0;
  auto sidecar = path;
  sidecar.replace_filename(path.stem().string() + "_valid.png");
  write_png(sidecar, mask);
}

UvAtlasMap build_uv_map(const TemplateMesh& mesh, int resolution) {
  if (resolution < 1) throw ConfigError("build_uv_map: resolution must be >= 1");
  UvAtlasMap map;
  map.resolution = resolution;
  const auto r = static_cast<std::size_t>(resolution);
  map.triangle.assign(r * r, -1);
  map.barycentric.assign(r * r, Vec3::Zero());
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tri = mesh.triangles[t];
    const Vec2 a = mesh.uv[static_cast<std::size_t>(tri[0])] * resolution;
    const Vec2 b = mesh.uv[static_cast<std::size_t>(tri[1])] * resolution;
    const Vec2 c = mesh.uv[static_cast<std::size_t>(tri[2])] * resolution;
    const double area = (b - a).x() * (c - a).y() - (b - a).y() * (c - a).x();
    if (std::abs(area) < 1e-12) continue;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min({a.x(), b.x(), c.x()}) - 0.5)));
    const int x1 = std::min(resolution - 1, static_cast<int>(std::ceil(std::max({a.x(), b.x(), c.x()}) - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min({a.y(), b.y(), c.y()}) - 0.5)));
    const int y1 = std::min(resolution - 1, static_cast<int>(std::ceil(std::max({a.y(), b.y(), c.y()}) - 0.5)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const auto idx = static_cast<std::size_t>(y) * r + static_cast<std::size_t>(x);
        if (map.triangle[idx] >= 0) continue;
        const Vec2 p(x + 0.5, y + 0.5);
        const double w0 = ((b - p).x() * (c - p).y() - (b - p).y() * (c - p).x()) / area;
        const double w1 = ((c - p).x() * (a - p).y() - (c - p).y() * (a - p).x()) / area;
        const double w2 = 1.0 - w0 - w1;
        constexpr double eps = -1e-9;
        if (w0 < eps || w1 < eps || w2 < eps) continue;
        map.triangle[idx] = static_cast<int>(t);
        map.barycentric[idx] = Vec3(w0, w1, w2);
      }
    }
  }
  return map;
}

std::vector<double> rasterize_depth(std::span<const Vec3> vertices, std::span<const std::array<int, 3>> triangles,
                                    const Camera& camera) {
  camera.validate();
  const int w = camera.width;
  const int h = camera.height;
  std::vector<double> depth(static_cast<std::size_t>(w * h), std::numeric_limits<double>::infinity());
  std::vector<Vec3> screen(vertices.size());
  std::vector<std::uint8_t> ok(vertices.size(), 0);
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    double u = 0, v = 0, z = 0;
    if (project_point(camera, vertices[i], u, v, z)) {
      screen[i] = Vec3(u, v, z);
      ok[i] = 1;
    }
  }
  for (const auto& tri : triangles) {
    const auto ia = static_cast<std::size_t>(tri[0]);
    const auto ib = static_cast<std::size_t>(tri[1]);
    const auto ic = static_cast<std::size_t>(tri[2]);
    if (!ok[ia] || !ok[ib] || !ok[ic]) continue;
    const Vec3& a = screen[ia];
    const Vec3& b = screen[ib];
    const Vec3& c = screen[ic];
    const double area = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
    if (std::abs(area) < 1e-12) continue;
    const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({a.x(), b.x(), c.x()}))));
    const int x1 = std::min(w - 1, static_cast<int>(std::floor(std::max({a.x(), b.x(), c.x()}))));
    const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({a.y(), b.y(), c.y()}))));
    const int y1 = std::min(h - 1, static_cast<int>(std::floor(std::max({a.y(), b.y(), c.y()}))));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double w0 = ((b.x() - x) * (c.y() - y) - (b.y() - y) * (c.x() - x)) / area;
        const double w1 = ((c.x() - x) * (a.y() - y) - (c.y() - y) * (a.x() - x)) / area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
        const double z = 1.0 / (w0 / a.z() + w1 / b.z() + w2 / c.z());
        auto& d = depth[static_cast<std::size_t>(y * w + x)];
        d = std::min(d, z);
      }
    }
  }
  return depth;
}

Vec3 fuse_texel_samples(std::span<const Vec3> samples) {
  if (samples.empty()) throw ShapeError("fuse_texel_samples: no samples");
  Vec3 out;
  std::vector<double> ch(samples.size());
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < samples.size(); ++i) ch[i] = samples[i][c];
    std::vector<double> sorted = ch;
    const double m = median(sorted);
    double sum = 0.0;
    int kept = 0;
    for (double v : ch) {
      if (v >= 0.8 * m && v <= 1.1 * m) {
        sum += v;
        ++kept;
      }
    }
    out[c] = kept > 0 ? sum / kept : m;
  }
  return out;
}

UvTexture project_uv_texture(const TemplateMesh& mesh, const UvAtlasMap& map, const Pose& pose,
                             std::span<const TextureView> views) {
  if (views.empty()) throw ConfigError("project_uv_texture: need at least one view");
  const auto world = forward_kinematics(mesh.skeleton, pose);
  const auto posed = lbs(mesh.vertices, mesh.skinning, mesh.skeleton.rest_world(), world);
  std::vector<std::vector<double>> depth;
  for (const auto& view : views) {
    if (!view.camera || !view.image || !view.mask) throw ConfigError("project_uv_texture: incomplete view");
    if (view.image->width != view.camera->width || view.image->height != view.camera->height ||
        view.image->channels != 3 || view.mask->width != view.camera->width ||
        view.mask->height != view.camera->height || view.mask->channels != 1) {
      throw ShapeError("project_uv_texture: image or mask does not match its camera");
    }
    depth.push_back(rasterize_depth(posed, mesh.triangles, *view.camera));
  }
  UvTexture tex;
  tex.resolution = map.resolution;
  const auto r = static_cast<std::size_t>(map.resolution);
  tex.rgb.assign(3 * r * r, 0.0);
  tex.valid.assign(r * r, 0);
  std::vector<Vec3> samples;
  for (std::size_t idx = 0; idx < r * r; ++idx) {
    const int t = map.triangle[idx];
    if (t < 0) continue;
    const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
    const Vec3& bc = map.barycentric[idx];
    const Vec3 p = bc[0] * posed[static_cast<std::size_t>(tri[0])] + bc[1] * posed[static_cast<std::size_t>(tri[1])] +
                   bc[2] * posed[static_cast<std::size_t>(tri[2])];
    samples.clear();
    for (std::size_t v = 0; v < views.size(); ++v) {
      const Camera& cam = *views[v].camera;
      double u = 0, vv = 0, z = 0;
      if (!project_point(cam, p, u, vv, z)) continue;
      const int px = static_cast<int>(std::lround(u));
      const int py = static_cast<int>(std::lround(vv));
      if (px < 0 || py < 0 || px >= cam.width || py >= cam.height) continue;
      if (views[v].mask->at(px, py, 0) <= 0.5) continue;
      if (z > depth[v][static_cast<std::size_t>(py * cam.width + px)] + kVisibilityTolerance) continue;
      const Image& img = *views[v].image;
      samples.emplace_back(img.at(px, py, 0), img.at(px, py, 1), img.at(px, py, 2));
    }
    if (samples.empty()) continue;
    const Vec3 c = fuse_texel_samples(samples);
    for (int k = 0; k < 3; ++k) tex.rgb[3 * idx + static_cast<std::size_t>(k)] = c[k];
    tex.valid[idx] = 1;
  }
  if (tex.valid_count() == 0) throw NumericalError("project_uv_texture: no texel is visible in any view");
  for (std::size_t y = 0; y < r; ++y) {
    for (std::size_t x = 0; x < r; ++x) {
      const Vec2 uv((static_cast<double>(x) + 0.5) / static_cast<double>(r), (static_cast<double>(y) + 0.5) / static_cast<double>(r));
      if (!mesh.in_face_region(uv)) continue;
      for (std::size_t k = 0; k < 3; ++k) tex.rgb[3 * (y * r + x) + k] = 0.0;
    }
  }
  return tex;
}

Encoder Encoder::init(const EncoderConfig& config, std::uint64_t seed) {
  if (config.resolution < config.output_side || config.output_side < 1 || config.latent_channels < 1 ||
      config.first_channels < 1 || config.groups < 1) {
    throw ConfigError("encoder: invalid configuration");
  }
  int layers = 0;
  for (int side = config.resolution; side > config.output_side; side /= 2) {
    if (side % 2 != 0) throw ConfigError("encoder: resolution must be output_side times a power of two");
    ++layers;
  }
  std::mt19937_64 rng(seed);
  Encoder e;
  e.config = config;
  int in = 3;
  int out = config.first_channels;
  for (int l = 0; l < layers; ++l) {
    if (out % std::min(config.groups, out) != 0) throw ConfigError("encoder: channels must divide into groups");
    e.conv_weights.push_back(Tensor::randn({out, in, 3, 3}, rng, std::sqrt(2.0 / (9.0 * in)), true));
    e.conv_biases.push_back(Tensor::zeros({out}, true));
    in = out;
    out = std::min(2 * out, config.max_channels);
  }
  const int n = config.latent_channels;
  e.mu_weight = Tensor::randn({n, in, 3, 3}, rng, config.init_std / std::sqrt(9.0 * in), true);
  e.mu_bias = Tensor::zeros({n}, true);
  e.logvar_weight = Tensor::randn({n, in, 3, 3}, rng, config.init_std / std::sqrt(9.0 * in), true);
  e.logvar_bias = Tensor::full({n}, -4.0, true);
  return e;
}

std::vector<Tensor> Encoder::parameters() const {
  std::vector<Tensor> p;
  for (std::size_t l = 0; l < conv_weights.size(); ++l) {
    p.push_back(conv_weights[l]);
    p.push_back(conv_biases[l]);
  }
  for (const Tensor* t : {&mu_weight, &mu_bias, &logvar_weight, &logvar_bias}) p.push_back(*t);
  return p;
}

void Encoder::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put_scalar(prefix + "resolution", config.resolution);
  ck.put_scalar(prefix + "output_side", config.output_side);
  ck.put_scalar(prefix + "groups", config.groups);
  ck.put_scalar(prefix + "layers", static_cast<double>(conv_weights.size()));
  for (std::size_t l = 0; l < conv_weights.size(); ++l) {
    ck.put(prefix + "conv/w" + std::to_string(l), conv_weights[l]);
    ck.put(prefix + "conv/b" + std::to_string(l), conv_biases[l]);
  }
  ck.put(prefix + "mu/w", mu_weight);
  ck.put(prefix + "mu/b", mu_bias);
  ck.put(prefix + "logvar/w", logvar_weight);
  ck.put(prefix + "logvar/b", logvar_bias);
}

Encoder Encoder::load(const Checkpoint& ck, const std::string& prefix) {
  Encoder e;
  e.config.resolution = static_cast<int>(ck.scalar(prefix + "resolution"));
  e.config.output_side = static_cast<int>(ck.scalar(prefix + "output_side"));
  e.config.groups = static_cast<int>(ck.scalar(prefix + "groups"));
  const auto layers = static_cast<std::size_t>(ck.scalar(prefix + "layers"));
  for (std::size_t l = 0; l < layers; ++l) {
    e.conv_weights.push_back(ck.tensor(prefix + "conv/w" + std::to_string(l), true));
    e.conv_biases.push_back(ck.tensor(prefix + "conv/b" + std::to_string(l), true));
  }
  e.mu_weight = ck.tensor(prefix + "mu/w", true);
  e.mu_bias = ck.tensor(prefix + "mu/b", true);
  e.logvar_weight = ck.tensor(prefix + "logvar/w", true);
  e.logvar_bias = ck.tensor(prefix + "logvar/b", true);
  e.config.latent_channels = static_cast<int>(e.mu_weight.dim(0));
  if (!e.conv_weights.empty()) e.config.first_channels = static_cast<int>(e.conv_weights.front().dim(0));
  return e;
}

std::pair<Tensor, Tensor> encode(const Encoder& encoder, const Tensor& texture) {
  const int r = encoder.config.resolution;
  if (texture.rank() != 3 || texture.dim(0) != 3 || texture.dim(1) != r || texture.dim(2) != r) {
    throw ShapeError("encode: expected a [3, " + std::to_string(r) + ", " + std::to_string(r) + "] texture, got " +
                     shape_str(texture.shape()));
  }
  Tensor h = reshape(texture, {1, 3, r, r});
  for (std::size_t l = 0; l < encoder.conv_weights.size(); ++l) {
    h = conv2d(h, encoder.conv_weights[l], encoder.conv_biases[l], 2, 1);
    const auto channels = static_cast<int>(h.dim(1));
    h = relu(group_norm(h, std::min(encoder.config.groups, channels)));
  }
  const auto side = h.dim(2);
  const auto n = encoder.mu_weight.dim(0);
  Tensor mu = reshape(conv2d(h, encoder.mu_weight, encoder.mu_bias, 1, 1), {n, side, side});
  Tensor logvar = reshape(conv2d(h, encoder.logvar_weight, encoder.logvar_bias, 1, 1), {n, side, side});
  return {mu, logvar};
}

Tensor sample_latent(const Tensor& mu, const Tensor& logvar, const Tensor& noise) {
  if (mu.shape() != logvar.shape()) throw ShapeError("sample_latent: mu and logvar shapes differ");
  if (!noise.defined()) return mu;
  if (noise.shape() != mu.shape()) throw ShapeError("sample_latent: noise shape differs from mu");
  return add(mu, mul(exp(mul_scalar(logvar, 0.5)), noise));
}

Tensor anchor_latents(const Tensor& z, std::span<const Vec2> anchor_uvs) {
  std::vector<double> uvs;
  uvs.reserve(2 * anchor_uvs.size());
  for (const auto& q : anchor_uvs) {
    if (q.x() < 0.0 || q.x() > 1.0 || q.y() < 0.0 || q.y() > 1.0) throw ConfigError("anchor_latents: UV outside [0,1]^2");
    uvs.push_back(q.x());
    uvs.push_back(q.y());
  }
  return bilinear_sample(z, uvs);
}

Tensor kl_loss(const Tensor& mu, const Tensor& logvar) {
  if (mu.shape() != logvar.shape()) throw ShapeError("kl_loss: mu and logvar shapes differ");
  return mul_scalar(mean(sub(add(square(mu), exp(logvar)), add_scalar(logvar, 1.0))), 0.5);
}

}  // namespace gavatar
