#include "gavatar/localization.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>

#include "gavatar/error.hpp"

namespace gavatar {

BitMask base_pose_mask(const Skeleton& skeleton, const SkinRow& row) {
  const int joints = skeleton.joint_count();
  BitMask mask(static_cast<std::size_t>(3 * joints), 0);
  for (const auto& w : row) {
    if (w.joint < 0 || w.joint >= joints) {
      throw ConfigError("skin row references joint " + std::to_string(w.joint) +
                        " but the skeleton has " + std::to_string(joints));
    }
    if (w.weight == 0.0) continue;
    for (int j = w.joint; j >= 0; j = skeleton.joint(j).parent) {
      for (int a = 0; a < 3; ++a) mask[static_cast<std::size_t>(3 * j + a)] = 1;
    }
  }
  return mask;
}

std::vector<BitMask> dilate_masks(const std::vector<BitMask>& masks,
                                  std::span<const std::array<int, 3>> neighbors) {
  if (neighbors.size() != masks.size()) throw ShapeError("dilate_masks: neighbor count mismatch");
  std::vector<BitMask> out = masks;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    for (int n : neighbors[i]) {
      const auto& other = masks.at(static_cast<std::size_t>(n));
      for (std::size_t p = 0; p < other.size(); ++p) out[i][p] |= other[p];
    }
  }
  return out;
}

void reuse_wrist_masks(const Skeleton& skeleton, std::vector<BitMask>& masks) {
  const auto& groups = skeleton.groups();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& name = groups[g].name;
    if (name.size() < 5 || name.compare(name.size() - 5, 5, "_hand") != 0) continue;
    const auto wrist = skeleton.group_attachment(g);
    if (!wrist) continue;
    const auto params = skeleton.group_params(g);
    for (auto& m : masks) {
      std::uint8_t active = 0;
      for (int a = 0; a < 3; ++a) active |= m[static_cast<std::size_t>(3 * *wrist + a)];
      if (!active) continue;
      for (int p : params) m[static_cast<std::size_t>(p)] = 1;
    }
  }
}

PoseMaskSet build_pose_masks(const TemplateMesh& mesh, const Hierarchy& hierarchy) {
  PoseMaskSet set;
  const auto& anchors = hierarchy.anchors;
  set.base.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    set.base.push_back(base_pose_mask(mesh.skeleton, anchors.skinning[i]));
    set.phi.push_back(mesh.in_face_region(anchors.uv[i]) ? 1 : 0);
  }
  set.theta = dilate_masks(set.base, hierarchy.anchor_neighbors);
  reuse_wrist_masks(mesh.skeleton, set.theta);
  return set;
}

namespace {

void put_masks(Checkpoint& ck, const std::string& name, const std::vector<BitMask>& masks) {
  std::vector<std::int64_t> flat;
  for (const auto& m : masks) flat.insert(flat.end(), m.begin(), m.end());
  const auto width = masks.empty() ? 1 : static_cast<std::int64_t>(masks.front().size());
  ck.put_indices(name, {static_cast<std::int64_t>(masks.size()), width}, flat);
}

std::vector<BitMask> get_masks(const Checkpoint& ck, const std::string& name) {
  const auto& stored = ck.get(name);
  const auto rows = static_cast<std::size_t>(stored.shape[0]);
  const auto width = static_cast<std::size_t>(stored.shape[1]);
  std::vector<BitMask> out(rows, BitMask(width, 0));
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t p = 0; p < width; ++p) {
      out[i][p] = stored.values[i * width + p] != 0.0 ? 1 : 0;
    }
  }
  return out;
}

}  // namespace

void PoseMaskSet::save(Checkpoint& ck, const std::string& prefix) const {
  put_masks(ck, prefix + "base", base);
  put_masks(ck, prefix + "theta", theta);
  ck.put_indices(prefix + "phi", {static_cast<std::int64_t>(phi.size())},
                 std::vector<std::int64_t>(phi.begin(), phi.end()));
}

PoseMaskSet PoseMaskSet::load(const Checkpoint& ck, const std::string& prefix) {
  PoseMaskSet set;
  set.base = get_masks(ck, prefix + "base");
  set.theta = get_masks(ck, prefix + "theta");
  for (auto v : ck.indices(prefix + "phi")) set.phi.push_back(v != 0 ? 1 : 0);
  return set;
}

std::pair<std::vector<double>, std::vector<double>> localize(std::span<const double> theta,
                                                             std::span<const double> phi,
                                                             const BitMask& mask_theta,
                                                             std::uint8_t mask_phi) {
  if (theta.size() != mask_theta.size()) {
    throw ShapeError("localize: theta has " + std::to_string(theta.size()) +
                     " entries, mask has " + std::to_string(mask_theta.size()));
  }
  std::pair<std::vector<double>, std::vector<double>> out;
  out.first.resize(theta.size());
  for (std::size_t p = 0; p < theta.size(); ++p) out.first[p] = mask_theta[p] ? theta[p] : 0.0;
  out.second.assign(phi.size(), 0.0);
  if (mask_phi) std::copy(phi.begin(), phi.end(), out.second.begin());
  return out;
}

Eigen::VectorXd PcaBlock::coefficients(const Eigen::VectorXd& x) const {
  return components.transpose() * (x - mean);
}

Eigen::VectorXd PcaBlock::clamp(const Eigen::VectorXd& x) const {
  Eigen::VectorXd c = coefficients(x);
  for (int k = 0; k < c.size(); ++k) c[k] = std::clamp(c[k], -2.0 * sigma[k], 2.0 * sigma[k]);
  return mean + components * c;
}

PcaBlock fit_pca_block(const Eigen::MatrixXd& data, int components) {
  const auto n = data.rows();
  const auto d = data.cols();
  const int k = static_cast<int>(std::min<Eigen::Index>(components, d));
  if (n <= k) {
    throw ConfigError("PCA needs more samples (" + std::to_string(n) + ") than components (" +
                      std::to_string(k) + ")");
  }
  PcaBlock block;
  block.mean = data.colwise().mean().transpose();
  const Eigen::MatrixXd centered = data.rowwise() - block.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericalError("PCA eigendecomposition failed");
  block.components.resize(d, k);
  block.sigma.resize(k);
  for (int c = 0; c < k; ++c) {
    const auto src = d - 1 - c;  // eigenvalues are ascending
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    block.components.col(c) = v;
    block.sigma[c] = std::sqrt(std::max(0.0, solver.eigenvalues()[src]));
  }
  const double scale = std::max(1.0, block.sigma.size() ? block.sigma[0] : 0.0);
  for (int c = 0; c < k; ++c) {
    if (block.sigma[c] <= 1e-12 * scale) {
      block.sigma[c] = 0.0;
      block.rank_deficient = true;
    }
  }
  return block;
}

namespace {

void save_block(Checkpoint& ck, const std::string& prefix, const PcaBlock& b) {
  ck.put_indices(prefix + "indices", {static_cast<std::int64_t>(b.indices.size())},
                 std::vector<std::int64_t>(b.indices.begin(), b.indices.end()));
  ck.put(prefix + "mean", {b.mean.size()}, std::vector<double>(b.mean.data(), b.mean.data() + b.mean.size()));
  std::vector<double> comp(static_cast<std::size_t>(b.components.size()));
  for (Eigen::Index r = 0; r < b.components.rows(); ++r) {
    for (Eigen::Index c = 0; c < b.components.cols(); ++c) {
      comp[static_cast<std::size_t>(r * b.components.cols() + c)] = b.components(r, c);
    }
  }
  ck.put(prefix + "components", {b.components.rows(), b.components.cols()}, comp);
  ck.put(prefix + "sigma", {b.sigma.size()}, std::vector<double>(b.sigma.data(), b.sigma.data() + b.sigma.size()));
  ck.put_scalar(prefix + "rank_deficient", b.rank_deficient ? 1.0 : 0.0);
}

PcaBlock load_block(const Checkpoint& ck, const std::string& prefix) {
  PcaBlock b;
  for (auto v : ck.indices(prefix + "indices")) b.indices.push_back(static_cast<int>(v));
  const auto& mean = ck.get(prefix + "mean").values;
  b.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  const auto& comp = ck.get(prefix + "components");
  b.components.resize(comp.shape[0], comp.shape[1]);
  for (Eigen::Index r = 0; r < b.components.rows(); ++r) {
    for (Eigen::Index c = 0; c < b.components.cols(); ++c) {
      b.components(r, c) = comp.values[static_cast<std::size_t>(r * b.components.cols() + c)];
    }
  }
  const auto& sigma = ck.get(prefix + "sigma").values;
  b.sigma = Eigen::Map<const Eigen::VectorXd>(sigma.data(), static_cast<Eigen::Index>(sigma.size()));
  b.rank_deficient = ck.scalar(prefix + "rank_deficient") != 0.0;
  return b;
}

}  // namespace

void LocalPcaModel::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put_scalar(prefix + "param_count", param_count);
  ck.put_scalar(prefix + "group_count", static_cast<double>(groups.size()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    save_block(ck, prefix + names[g] + "/", groups[g]);
  }
}

LocalPcaModel LocalPcaModel::load(const Checkpoint& ck, const std::string& prefix) {
  LocalPcaModel model;
  model.param_count = static_cast<int>(ck.scalar(prefix + "param_count"));
  // Group names are recovered from the stored entry names.
  for (const auto& name : ck.names(prefix)) {
    const auto rest = name.substr(prefix.size());
    const auto slash = rest.find('/');
    if (slash == std::string::npos || rest.substr(slash + 1) != "indices") continue;
    model.names.push_back(rest.substr(0, slash));
  }
  // Restore the original group order: blocks are sorted by their first parameter.
  for (const auto& n : model.names) model.groups.push_back(load_block(ck, prefix + n + "/"));
  std::vector<std::size_t> order(model.groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return model.groups[a].indices.front() < model.groups[b].indices.front();
  });
  LocalPcaModel sorted;
  sorted.param_count = model.param_count;
  for (auto i : order) {
    sorted.names.push_back(model.names[i]);
    sorted.groups.push_back(std::move(model.groups[i]));
  }
  return sorted;
}

LocalPcaModel fit_local_pca(std::span<const std::vector<double>> poses, const Skeleton& skeleton,
                            int components) {
  const int p = skeleton.param_count();
  LocalPcaModel model;
  model.param_count = p;
  for (const auto& pose : poses) {
    if (static_cast<int>(pose.size()) != p) throw ShapeError("fit_local_pca: pose length mismatch");
  }
  for (std::size_t g = 0; g < skeleton.groups().size(); ++g) {
    const auto idx = skeleton.group_params(g);
    Eigen::MatrixXd data(static_cast<Eigen::Index>(poses.size()), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t r = 0; r < poses.size(); ++r) {
      for (std::size_t c = 0; c < idx.size(); ++c) {
        data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
            poses[r][static_cast<std::size_t>(idx[c])];
      }
    }
    auto block = fit_pca_block(data, components);
    block.indices = idx;
    model.names.push_back(skeleton.groups()[g].name);
    model.groups.push_back(std::move(block));
  }
  return model;
}

std::vector<double> apply_pose_prior(std::span<const double> theta, const LocalPcaModel& model) {
  if (static_cast<int>(theta.size()) != model.param_count) {
    throw ShapeError("apply_pose_prior: theta has " + std::to_string(theta.size()) +
                     " entries, model expects " + std::to_string(model.param_count));
  }
  std::vector<double> out(theta.begin(), theta.end());
  for (const auto& block : model.groups) {
    Eigen::VectorXd x(block.dim());
    for (int c = 0; c < block.dim(); ++c) x[c] = theta[static_cast<std::size_t>(block.indices[static_cast<std::size_t>(c)])];
    const Eigen::VectorXd y = block.clamp(x);
    for (int c = 0; c < block.dim(); ++c) out[static_cast<std::size_t>(block.indices[static_cast<std::size_t>(c)])] = y[c];
  }
  return out;
}

LatentPrior LatentPrior::fit(std::span<const std::vector<double>> frames, std::int64_t anchors,
                             std::int64_t dim, int components) {
  if (frames.empty()) throw ConfigError("latent prior: no training latents");
  for (const auto& f : frames) {
    if (static_cast<std::int64_t>(f.size()) != anchors * dim) {
      throw ShapeError("latent prior: frame has " + std::to_string(f.size()) + " values, expected " +
                       std::to_string(anchors * dim));
    }
  }
  LatentPrior prior;
  prior.dim_ = dim;
  for (std::int64_t a = 0; a < anchors; ++a) {
    Eigen::MatrixXd data(static_cast<Eigen::Index>(frames.size()), dim);
    for (std::size_t r = 0; r < frames.size(); ++r) {
      for (std::int64_t c = 0; c < dim; ++c) {
        data(static_cast<Eigen::Index>(r), c) = frames[r][static_cast<std::size_t>(a * dim + c)];
      }
    }
    auto block = fit_pca_block(data, components);
    block.indices.resize(static_cast<std::size_t>(dim));
    for (std::int64_t c = 0; c < dim; ++c) block.indices[static_cast<std::size_t>(c)] = static_cast<int>(c);
    prior.blocks_.push_back(std::move(block));
  }
  return prior;
}

Tensor LatentPrior::apply(const Tensor& latents) const {
  if (!fitted()) throw ConfigError("latent prior has not been fitted");
  if (latents.rank() != 2 || latents.dim(0) != anchor_count() || latents.dim(1) != dim_) {
    throw ShapeError("latent prior: expected [" + std::to_string(anchor_count()) + ", " +
                     std::to_string(dim_) + "], got " + shape_str(latents.shape()));
  }
  detail::require_finite(latents, "latent_prior");
  const auto in = latents.values();
  const auto n = static_cast<std::size_t>(anchor_count());
  std::vector<double> out(in.size());
  // Per anchor: which coefficients stayed inside the clamp (they carry gradient).
  auto pass = std::make_shared<std::vector<std::vector<std::uint8_t>>>(n);
  for (std::size_t a = 0; a < n; ++a) {
    const auto& b = blocks_[a];
    const Eigen::Map<const Eigen::VectorXd> x(in.data() + a * static_cast<std::size_t>(dim_), dim_);
    Eigen::VectorXd c = b.coefficients(x);
    auto& keep = (*pass)[a];
    keep.resize(static_cast<std::size_t>(c.size()));
    for (Eigen::Index k = 0; k < c.size(); ++k) {
      const double lim = 2.0 * b.sigma[k];
      keep[static_cast<std::size_t>(k)] = (c[k] > -lim && c[k] < lim) ? 1 : 0;
      c[k] = std::clamp(c[k], -lim, lim);
    }
    Eigen::Map<Eigen::VectorXd>(out.data() + a * static_cast<std::size_t>(dim_), dim_) =
        b.mean + b.components * c;
  }
  return custom_op("latent_prior", {latents}, latents.shape(), std::move(out),
                   [src = latents.impl(), pass, this_blocks = blocks_, dim = dim_](const TensorImpl& o) {
                     if (!src->requires_grad) return;
                     double* g = src->grad_buffer();
                     for (std::size_t a = 0; a < this_blocks.size(); ++a) {
                       const auto& b = this_blocks[a];
                       const Eigen::Map<const Eigen::VectorXd> go(o.grad.data() + a * static_cast<std::size_t>(dim), dim);
                       Eigen::VectorXd c = b.components.transpose() * go;
                       for (Eigen::Index k = 0; k < c.size(); ++k) {
                         if (!(*pass)[a][static_cast<std::size_t>(k)]) c[k] = 0.0;
                       }
                       Eigen::Map<Eigen::VectorXd>(g + a * static_cast<std::size_t>(dim), dim) += b.components * c;
                     }
                   });
}

void LatentPrior::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put_scalar(prefix + "anchors", static_cast<double>(blocks_.size()));
  ck.put_scalar(prefix + "dim", static_cast<double>(dim_));
  for (std::size_t a = 0; a < blocks_.size(); ++a) {
    save_block(ck, prefix + std::to_string(a) + "/", blocks_[a]);
  }
}

LatentPrior LatentPrior::load(const Checkpoint& ck, const std::string& prefix) {
  LatentPrior prior;
  if (!ck.has(prefix + "anchors")) throw ConfigError("checkpoint has no fitted latent prior");
  const auto anchors = static_cast<std::size_t>(ck.scalar(prefix + "anchors"));
  prior.dim_ = static_cast<std::int64_t>(ck.scalar(prefix + "dim"));
  for (std::size_t a = 0; a < anchors; ++a) {
    prior.blocks_.push_back(load_block(ck, prefix + std::to_string(a) + "/"));
  }
  return prior;
}

}  // namespace gavatar
