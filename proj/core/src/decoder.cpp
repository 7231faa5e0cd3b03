#include "gavatar/decoder.hpp"

#include <cmath>
#include <random>

#include "gavatar/error.hpp"
#include "gavatar/ops.hpp"

namespace gavatar {

using namespace ops;

void AvatarRig::save(Checkpoint& ck) const {
  ck.put_text("rig/mesh_json", mesh.to_json_string());
  ck.put_scalar("rig/face_dim", face_dim);
  hierarchy.save(ck, "hier/");
  masks.save(ck, "loc/mask/");
  pose_prior.save(ck, "loc/pca/");
}

AvatarRig AvatarRig::load(const Checkpoint& ck) {
  AvatarRig rig;
  rig.mesh = TemplateMesh::from_json_string(ck.text("rig/mesh_json"));
  rig.face_dim = static_cast<int>(ck.scalar("rig/face_dim"));
  rig.hierarchy = Hierarchy::load(ck, "hier/");
  rig.masks = PoseMaskSet::load(ck, "loc/mask/");
  rig.pose_prior = LocalPcaModel::load(ck, "loc/pca/");
  return rig;
}

AvatarRig build_rig(const TemplateMesh& mesh, const HierarchyCounts& counts,
                    std::span<const std::vector<double>> training_thetas, int face_dim,
                    std::uint64_t seed) {
  if (face_dim < 0) throw ConfigError("build_rig: face_dim must be >= 0");
  AvatarRig rig;
  rig.mesh = mesh;
  rig.face_dim = face_dim;
  rig.hierarchy = build_hierarchy(mesh, counts, seed);
  rig.masks = build_pose_masks(mesh, rig.hierarchy);
  rig.pose_prior = fit_local_pca(training_thetas, mesh.skeleton);
  return rig;
}

AvatarDecoder AvatarDecoder::init(const AvatarRig& rig, const DecoderConfig& config,
                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  AvatarDecoder d;
  const std::int64_t na = rig.hierarchy.anchor_count();
  const std::int64_t ng = rig.hierarchy.gaussian_count();
  const std::int64_t nc = rig.hierarchy.control_count();
  std::int64_t in = rig.anchor_input_dim();
  for (int width : config.hidden) {
    d.mlp_weights.push_back(Tensor::randn({na, in, width}, rng, std::sqrt(2.0 / static_cast<double>(in)), true));
    d.mlp_biases.push_back(Tensor::zeros({na, 1, width}, true));
    in = width;
  }
  d.mlp_weights.push_back(Tensor::randn({na, in, 2 * kBasisSize}, rng,
                                        config.head_init_std / std::sqrt(static_cast<double>(in)), true));
  d.mlp_biases.push_back(Tensor::zeros({na, 1, 2 * kBasisSize}, true));

  std::vector<double> rot(static_cast<std::size_t>(ng * 4), 0.0);
  for (std::int64_t i = 0; i < ng; ++i) rot[static_cast<std::size_t>(4 * i)] = 1.0;
  d.rotation_bias = Tensor::from({ng, 4}, rot, true);
  d.rotation_basis = Tensor::zeros({ng, 4, kBasisSize}, true);
  d.scale_bias = Tensor::full({ng, 3}, std::log(config.init_scale), true);
  d.scale_basis = Tensor::zeros({ng, 3, kBasisSize}, true);
  d.opacity_bias = Tensor::full({ng, 1}, config.init_opacity_logit, true);
  d.sh0_bias = Tensor::zeros({ng, 3}, true);
  d.sh0_basis = Tensor::zeros({ng, 3, kBasisSize}, true);
  d.shn_bias = Tensor::zeros({ng, 9}, true);
  d.shn_basis = Tensor::zeros({ng, 9, kBasisSize}, true);
  d.offset = Tensor::zeros({ng, 3}, true);
  d.control_bias = Tensor::zeros({nc, 3}, true);
  d.control_basis = Tensor::zeros({nc, 3, kBasisSize}, true);
  return d;
}

std::vector<Tensor> AvatarDecoder::mlp_parameters() const {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < mlp_weights.size(); ++l) {
    out.push_back(mlp_weights[l]);
    out.push_back(mlp_biases[l]);
  }
  return out;
}

namespace {

const std::vector<std::pair<const char*, Tensor AvatarDecoder::*>>& named_fields() {
  static const std::vector<std::pair<const char*, Tensor AvatarDecoder::*>> fields{
      {"rotation_bias", &AvatarDecoder::rotation_bias},
      {"rotation_basis", &AvatarDecoder::rotation_basis},
      {"scale_bias", &AvatarDecoder::scale_bias},
      {"scale_basis", &AvatarDecoder::scale_basis},
      {"opacity_bias", &AvatarDecoder::opacity_bias},
      {"sh0_bias", &AvatarDecoder::sh0_bias},
      {"sh0_basis", &AvatarDecoder::sh0_basis},
      {"shn_bias", &AvatarDecoder::shn_bias},
      {"shn_basis", &AvatarDecoder::shn_basis},
      {"offset", &AvatarDecoder::offset},
      {"control_bias", &AvatarDecoder::control_bias},
      {"control_basis", &AvatarDecoder::control_basis},
  };
  return fields;
}

}  // namespace

void AvatarDecoder::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put_scalar(prefix + "mlp_layers", static_cast<double>(mlp_weights.size()));
  for (std::size_t l = 0; l < mlp_weights.size(); ++l) {
    ck.put(prefix + "mlp/w" + std::to_string(l), mlp_weights[l]);
    ck.put(prefix + "mlp/b" + std::to_string(l), mlp_biases[l]);
  }
  for (const auto& [name, field] : named_fields()) ck.put(prefix + name, this->*field);
}

AvatarDecoder AvatarDecoder::load(const Checkpoint& ck, const std::string& prefix) {
  AvatarDecoder d;
  const auto layers = static_cast<std::size_t>(ck.scalar(prefix + "mlp_layers"));
  for (std::size_t l = 0; l < layers; ++l) {
    d.mlp_weights.push_back(ck.tensor(prefix + "mlp/w" + std::to_string(l), true));
    d.mlp_biases.push_back(ck.tensor(prefix + "mlp/b" + std::to_string(l), true));
  }
  for (const auto& [name, field] : named_fields()) d.*field = ck.tensor(prefix + name, true);
  return d;
}

Tensor decode_anchors(const AvatarDecoder& decoder, const Tensor& inputs) {
  const std::int64_t na = decoder.anchor_count();
  if (inputs.rank() != 2 || inputs.dim(0) != na || inputs.dim(1) != decoder.input_dim()) {
    throw ShapeError("decode_anchors: expected [" + std::to_string(na) + ", " +
                     std::to_string(decoder.input_dim()) + "], got " + shape_str(inputs.shape()));
  }
  Tensor h = reshape(inputs, {na, 1, inputs.dim(1)});
  const std::size_t layers = decoder.mlp_weights.size();
  for (std::size_t l = 0; l < layers; ++l) {
    h = add(matmul(h, decoder.mlp_weights[l]), decoder.mlp_biases[l]);
    if (l + 1 < layers) h = relu(h);
  }
  return reshape(h, {na, 2 * kBasisSize});
}

std::pair<std::vector<double>, std::vector<double>> decode_anchor(
    const AvatarDecoder& decoder, std::int64_t anchor, std::span<const double> theta_local,
    std::span<const double> phi_local, std::span<const double> latent) {
  const std::int64_t in = decoder.input_dim();
  if (static_cast<std::int64_t>(theta_local.size() + phi_local.size() + latent.size()) != in) {
    throw ShapeError("decode_anchor: input of size " +
                     std::to_string(theta_local.size() + phi_local.size() + latent.size()) +
                     " does not match the MLP input " + std::to_string(in));
  }
  if (anchor < 0 || anchor >= decoder.anchor_count()) throw ShapeError("decode_anchor: bad anchor index");
  std::vector<double> x(theta_local.begin(), theta_local.end());
  x.insert(x.end(), phi_local.begin(), phi_local.end());
  x.insert(x.end(), latent.begin(), latent.end());
  Tensor h = Tensor::from({1, in}, x);
  const std::size_t layers = decoder.mlp_weights.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const Tensor w = reshape(slice(decoder.mlp_weights[l], 0, anchor, anchor + 1),
                             {decoder.mlp_weights[l].dim(1), decoder.mlp_weights[l].dim(2)});
    const Tensor b = reshape(slice(decoder.mlp_biases[l], 0, anchor, anchor + 1),
                             {1, decoder.mlp_biases[l].dim(2)});
    h = add(matmul(h, w), b);
    if (l + 1 < layers) h = relu(h);
  }
  const auto v = h.values();
  return {std::vector<double>(v.begin(), v.begin() + kBasisSize),
          std::vector<double>(v.begin() + kBasisSize, v.end())};
}

Tensor assemble_property(const Tensor& bias, const Tensor& basis, const Tensor& w, Property kind) {
  if (kind == Property::Opacity) return sigmoid(bias);
  Tensor pre = bias;
  if (basis.defined() && w.defined()) {
    const std::int64_t n = bias.dim(0);
    const std::int64_t k = bias.dim(1);
    if (basis.rank() != 3 || basis.dim(0) != n || basis.dim(1) != k || basis.dim(2) != kBasisSize ||
        w.rank() != 2 || w.dim(0) != n || w.dim(1) != kBasisSize) {
      throw ShapeError("assemble_property: bias " + shape_str(bias.shape()) + ", basis " +
                       shape_str(basis.shape()) + ", weights " + shape_str(w.shape()));
    }
    pre = add(bias, reshape(matmul(basis, reshape(w, {n, kBasisSize, 1})), {n, k}));
  }
  switch (kind) {
    case Property::Rotation:
      return div(pre, sqrt(sum(square(pre), 1, true)));
    case Property::Scale:
      return clamp_max(exp(pre), kMaxScale);
    case Property::Sh0:
      return mul_scalar(tanh(pre), 0.5 / kShC0);
    case Property::ShN:
      return tanh(pre);
    case Property::Opacity:
      break;
  }
  return pre;
}

Tensor anchor_pose_features(const AvatarRig& rig, std::span<const double> theta_features,
                            std::span<const double> phi) {
  const auto p = static_cast<std::size_t>(rig.skeleton().param_count());
  const auto d = static_cast<std::size_t>(rig.face_dim);
  if (theta_features.size() != p || phi.size() != d) {
    throw ShapeError("anchor features: theta has " + std::to_string(theta_features.size()) +
                     " (expected " + std::to_string(p) + "), phi has " + std::to_string(phi.size()) +
                     " (expected " + std::to_string(d) + ")");
  }
  const std::size_t na = rig.masks.anchor_count();
  std::vector<double> x;
  x.reserve(na * (p + d));
  for (std::size_t i = 0; i < na; ++i) {
    const auto [t, f] = localize(theta_features, phi, rig.masks.theta[i], rig.masks.phi[i]);
    x.insert(x.end(), t.begin(), t.end());
    x.insert(x.end(), f.begin(), f.end());
  }
  return Tensor::from({static_cast<std::int64_t>(na), static_cast<std::int64_t>(p + d)}, std::move(x));
}

DecodedFrame pose_frame(const AvatarRig& rig, const AvatarDecoder& decoder, const Pose& pose,
                        std::span<const double> phi, const Tensor& latents,
                        const FrameOptions& options) {
  const auto features = apply_pose_prior(pose.theta, rig.pose_prior);
  return pose_frame_with_features(rig, decoder, pose, features, phi, latents, options);
}

DecodedFrame pose_frame_with_features(const AvatarRig& rig, const AvatarDecoder& decoder,
                                      const Pose& pose, std::span<const double> theta_features,
                                      std::span<const double> phi, const Tensor& latents,
                                      const FrameOptions& options) {
  const auto& h = rig.hierarchy;
  const std::int64_t na = h.anchor_count();
  const std::int64_t ng = h.gaussian_count();
  const std::int64_t nc = h.control_count();
  if (!latents.defined()) throw ConfigError("pose_frame: latents are required");
  if (latents.rank() != 2 || latents.dim(0) != na || latents.dim(1) != kLatentDim) {
    throw ShapeError("pose_frame: latents must be [" + std::to_string(na) + ", 16], got " +
                     shape_str(latents.shape()));
  }
  DecodedFrame out;
  Tensor wg, wc;
  if (options.correctives) {
    const Tensor pose_in = anchor_pose_features(rig, theta_features, phi);
    const std::vector<Tensor> parts{pose_in, latents};
    out.anchor_outputs = decode_anchors(decoder, concat(parts, 1));
    wg = interpolate_corrective(slice(out.anchor_outputs, 1, 0, kBasisSize), h.gaussian_anchor, kBasisSize);
    wc = interpolate_corrective(slice(out.anchor_outputs, 1, kBasisSize, 2 * kBasisSize),
                                h.control_anchor, kBasisSize);
    out.control_offsets =
        add(decoder.control_bias,
            reshape(matmul(decoder.control_basis, reshape(wc, {nc, kBasisSize, 1})), {nc, 3}));
  } else {
    out.control_offsets = decoder.control_bias;
  }
  const Tensor basis_or_none = Tensor();
  const auto pick = [&](const Tensor& basis) { return options.correctives ? basis : basis_or_none; };

  // Canonical position: rest sample + interpolated control displacement + own offset.
  std::vector<double> rest;
  rest.reserve(static_cast<std::size_t>(3 * ng));
  for (const auto& p : h.gaussians.positions) rest.insert(rest.end(), {p.x(), p.y(), p.z()});
  const Tensor canonical =
      add(Tensor::from({ng, 3}, std::move(rest)),
          add(interpolate_corrective(out.control_offsets, h.gaussian_control, 3), decoder.offset));

  const Tensor q_canon = assemble_property(decoder.rotation_bias, pick(decoder.rotation_basis), wg, Property::Rotation);
  out.scales = assemble_property(decoder.scale_bias, pick(decoder.scale_basis), wg, Property::Scale);
  out.opacities = assemble_property(decoder.opacity_bias, Tensor(), Tensor(), Property::Opacity);
  const Tensor sh0 = assemble_property(decoder.sh0_bias, pick(decoder.sh0_basis), wg, Property::Sh0);
  const Tensor shn = assemble_property(decoder.shn_bias, pick(decoder.shn_basis), wg, Property::ShN);
  const std::vector<Tensor> sh_parts{reshape(sh0, {ng, 1, 3}), reshape(shn, {ng, 3, 3})};
  out.sh = concat(sh_parts, 1);

  // LBS: blended 3x4 matrix for the mean, dominant-joint rotation for the orientation.
  const auto rest_world = rig.skeleton().rest_world();
  const auto world = forward_kinematics(rig.skeleton(), pose);
  const auto skin = skinning_transforms(rest_world, world);
  std::vector<Quat> joint_q(skin.size());
  for (std::size_t j = 0; j < skin.size(); ++j) joint_q[j] = Quat(skin[j].rotation);
  std::vector<double> lin(static_cast<std::size_t>(9 * ng)), trans(static_cast<std::size_t>(3 * ng)),
      left(static_cast<std::size_t>(16 * ng));
  for (std::int64_t i = 0; i < ng; ++i) {
    const auto& row = h.gaussians.skinning[static_cast<std::size_t>(i)];
    const auto m = blend_transform(row, skin);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) lin[static_cast<std::size_t>(9 * i + 3 * r + c)] = m(r, c);
      trans[static_cast<std::size_t>(3 * i + r)] = m(r, 3);
    }
    const auto l = quaternion_left_matrix(joint_q[static_cast<std::size_t>(dominant_joint(row))]);
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) left[static_cast<std::size_t>(16 * i + 4 * r + c)] = l(r, c);
    }
  }
  out.means = add(reshape(matmul(Tensor::from({ng, 3, 3}, std::move(lin)), reshape(canonical, {ng, 3, 1})), {ng, 3}),
                  Tensor::from({ng, 3}, std::move(trans)));
  out.rotations = reshape(matmul(Tensor::from({ng, 4, 4}, std::move(left)), reshape(q_canon, {ng, 4, 1})), {ng, 4});
  return out;
}

GaussianFrame to_gaussian_frame(const DecodedFrame& frame, int sh_degree) {
  GaussianFrame g;
  const auto n = static_cast<std::size_t>(frame.means.dim(0));
  const auto m = frame.means.values();
  const auto q = frame.rotations.values();
  const auto s = frame.scales.values();
  const auto o = frame.opacities.values();
  for (std::size_t i = 0; i < n; ++i) {
    g.means.emplace_back(m[3 * i], m[3 * i + 1], m[3 * i + 2]);
    g.rotations.emplace_back(q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]);
    g.scales.emplace_back(s[3 * i], s[3 * i + 1], s[3 * i + 2]);
    g.opacities.push_back(o[i]);
  }
  const auto sh = frame.sh.values();
  g.sh.assign(sh.begin(), sh.end());
  g.sh_degree = sh_degree;
  return g;
}

}  // namespace gavatar
