#pragma once

#include <random>
#include <vector>

#include "gavatar/decoder.hpp"
#include "gavatar/localization.hpp"
#include "gavatar/skeleton.hpp"
#include "gavatar/synthetic.hpp"

namespace gavatar::testing {

/// Random kinematic tree (parent index < child index) with random rigid rest
/// transforms and joints split into up to three contiguous groups.
Skeleton random_skeleton(int joints, std::mt19937_64& rng);

/// Random normalized skin row with 1..4 influences.
SkinRow random_skin_row(int joints, std::mt19937_64& rng);

/// Pose-parameter support by perturbation: entry p is set when changing theta[p]
/// by `step` moves the skinned point under LBS.
BitMask perturbation_mask(const Skeleton& skeleton, const Vec3& rest_point, const SkinRow& row,
                          const Pose& base, double step = 1e-3);

/// Indices of the k nearest points by exhaustive scan, ties broken by index.
std::vector<int> brute_force_knn(const std::vector<Vec3>& points, const Vec3& query, int k,
                                 int exclude = -1);

/// Body-mesh rig with a small hierarchy and a pose prior fitted on random motion.
AvatarRig small_rig(const HierarchyCounts& counts = {8, 48, 160}, std::uint64_t seed = 3);

/// Ten-frame, two-view 32x32 capture with one ambiguity pair.
SyntheticSpec small_capture_spec();
const CaptureDataset& small_capture();

}  // namespace gavatar::testing
