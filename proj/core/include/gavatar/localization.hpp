#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gavatar/checkpoint.hpp"
#include "gavatar/hierarchy.hpp"
#include "gavatar/mesh.hpp"
#include "gavatar/skeleton.hpp"
#include "gavatar/tensor.hpp"

namespace gavatar {

using BitMask = std::vector<std::uint8_t>;

/// Parameters of every joint whose rotation moves a point with this skin row:
/// joint j is active iff some joint skinned with nonzero weight lies in j's subtree.
BitMask base_pose_mask(const Skeleton& skeleton, const SkinRow& row);

/// Per-anchor localization masks.
struct PoseMaskSet {
  std::vector<BitMask> base;   // before dilation
  std::vector<BitMask> theta;  // after dilation and wrist reuse
  std::vector<std::uint8_t> phi;

  std::size_t anchor_count() const { return theta.size(); }
  void save(Checkpoint& ck, const std::string& prefix = "loc/mask/") const;
  static PoseMaskSet load(const Checkpoint& ck, const std::string& prefix = "loc/mask/");
};

/// One dilation step: each anchor ORs in the masks of its neighbor anchors.
std::vector<BitMask> dilate_masks(const std::vector<BitMask>& masks,
                                  std::span<const std::array<int, 3>> neighbors);

/// Hand groups ("*_hand") take the union with their wrist's activation.
void reuse_wrist_masks(const Skeleton& skeleton, std::vector<BitMask>& masks);

PoseMaskSet build_pose_masks(const TemplateMesh& mesh, const Hierarchy& hierarchy);

/// (m_theta * theta, m_phi * phi).
std::pair<std::vector<double>, std::vector<double>> localize(std::span<const double> theta,
                                                             std::span<const double> phi,
                                                             const BitMask& mask_theta,
                                                             std::uint8_t mask_phi);

/// PCA over one index block: mean, orthonormal components (columns, sorted by
/// descending variance) and per-component standard deviation.
struct PcaBlock {
  std::vector<int> indices;
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;
  Eigen::VectorXd sigma;
  bool rank_deficient = false;

  int dim() const { return static_cast<int>(mean.size()); }
  int rank() const { return static_cast<int>(sigma.size()); }
  Eigen::VectorXd coefficients(const Eigen::VectorXd& x) const;
  /// Project, clamp every coefficient to +-2 sigma, reconstruct.
  Eigen::VectorXd clamp(const Eigen::VectorXd& x) const;
};

/// Rows of `data` are samples.
PcaBlock fit_pca_block(const Eigen::MatrixXd& data, int components);

struct LocalPcaModel {
  static constexpr int kComponents = 5;
  std::vector<std::string> names;
  std::vector<PcaBlock> groups;
  int param_count = 0;

  void save(Checkpoint& ck, const std::string& prefix = "loc/pca/") const;
  static LocalPcaModel load(const Checkpoint& ck, const std::string& prefix = "loc/pca/");
};

LocalPcaModel fit_local_pca(std::span<const std::vector<double>> poses, const Skeleton& skeleton,
                            int components = LocalPcaModel::kComponents);

/// Clamps each group in PCA space; parameters outside every group pass through.
std::vector<double> apply_pose_prior(std::span<const double> theta, const LocalPcaModel& model);

/// Per-anchor PCA over appearance codes with +-2 sigma clamping.
class LatentPrior {
 public:
  static constexpr int kComponents = 8;

  bool fitted() const { return !blocks_.empty(); }
  std::int64_t anchor_count() const { return static_cast<std::int64_t>(blocks_.size()); }
  std::int64_t latent_dim() const { return dim_; }
  const PcaBlock& block(std::size_t anchor) const { return blocks_.at(anchor); }

  /// `frames` holds one [anchors * dim] row-major vector per frame.
  static LatentPrior fit(std::span<const std::vector<double>> frames, std::int64_t anchors,
                         std::int64_t dim, int components = kComponents);

  /// Differentiable clamp of [N_a, N_l] latents.
  Tensor apply(const Tensor& latents) const;

  void save(Checkpoint& ck, const std::string& prefix = "loc/latent/") const;
  static LatentPrior load(const Checkpoint& ck, const std::string& prefix = "loc/latent/");

 private:
  std::vector<PcaBlock> blocks_;
  std::int64_t dim_ = 0;
};

}  // namespace gavatar
