#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gavatar/checkpoint.hpp"
#include "gavatar/localization.hpp"
#include "gavatar/optim.hpp"
#include "gavatar/skeleton.hpp"
#include "gavatar/tensor.hpp"

namespace gavatar {

struct PredictorConfig {
  int history = 10;       // N_b
  int token_dim = 128;
  int heads = 4;
  int ff_dim = 256;
  int encoder_hidden = 64;
  int unroll = 4;         // frames predicted autoregressively per training sample
  double lr = 1e-3;
  double init_std = 0.02;
};

/// Features of one pose token: value, velocity and acceleration of a group's
/// parameters (or the global transform) for one frame.
inline constexpr int kGlobalFeatures = 6;  // axis-angle rotation, translation

/// Removes the last frame's global transform from every frame of the window.
std::vector<Pose> normalize_window(std::span<const Pose> window);

/// Value / velocity / acceleration rows [N_b, 3 D] for a window of D-vectors,
/// with zero-padded differences at the window start.
std::vector<std::vector<double>> motion_features(std::span<const std::vector<double>> values);

/// Transformer appearance predictor weights.
struct Predictor {
  PredictorConfig config;
  std::vector<std::vector<int>> group_params;  // parameter indices per pose group
  std::int64_t anchors = 0;
  std::int64_t latent_dim = 0;

  // Pose-group encoders (one per group) and the global-transform encoder.
  std::vector<Tensor> group_pos;               // [N_b, 3 |g|]
  std::vector<Tensor> group_w1, group_b1, group_w2, group_b2;
  Tensor global_pos, global_w1, global_b1, global_w2, global_b2;
  // Per-anchor latent encoders, stacked along the anchor axis.
  Tensor anchor_pos;                           // [N_a, N_l]
  Tensor anchor_w1, anchor_b1, anchor_w2, anchor_b2;
  // Transformer block and head.
  Tensor wq, wk, wv, wo;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor head_w, head_b;

  static Predictor init(const Skeleton& skeleton, std::int64_t anchors, std::int64_t latent_dim,
                        const PredictorConfig& config, std::uint64_t seed);
  std::int64_t token_count() const;
  std::vector<Tensor> parameters() const;
  /// Parameters that read the previous-frame latents (anchor-token encoders).
  std::vector<Tensor> history_parameters() const;

  void save(Checkpoint& ck, const std::string& prefix = "prd/") const;
  static Predictor load(const Checkpoint& ck, const std::string& prefix = "prd/");
};

/// Token embeddings [T, D] before the transformer block (the sinusoidal
/// encoding is not included). `window` must already be normalized.
Tensor tokenize(const Predictor& predictor, std::span<const Pose> window, const Tensor& prev_latents);

/// Sinusoidal absolute position encoding [T, D].
Tensor sinusoidal_encoding(std::int64_t tokens, std::int64_t dim);

/// One prediction: tokenize, transformer block, head on the anchor tokens,
/// latent-prior clamp. `window` holds N_b poses ending at the current frame.
Tensor predict(const Predictor& predictor, std::span<const Pose> window, const Tensor& prev_latents,
               const LatentPrior& prior);

/// Window of N_b poses ending at frame t, zero-padded at the front.
std::vector<Pose> history_window(std::span<const Pose> poses, std::size_t t, int history,
                                 const Skeleton& skeleton);

/// Predicts frames [first, end) autoregressively; `init_latents` plays the role
/// of the latents of frame first - 1.
std::vector<Tensor> rollout(const Predictor& predictor, std::span<const Pose> poses,
                            const Tensor& init_latents, const LatentPrior& prior,
                            const Skeleton& skeleton, std::size_t first = 0);

/// L1 on values plus L1 on the first three forward differences along time.
/// Difference terms that need more frames than available are skipped.
Tensor predictor_loss(std::span<const Tensor> pred, std::span<const Tensor> target);

/// A training sequence: poses with the encoder latents of every frame.
struct LatentSequence {
  std::vector<Pose> poses;
  std::vector<std::vector<double>> latents;  // [N_a * N_l] per frame
};

struct TrainSample {
  std::size_t sequence = 0;
  std::size_t start = 0;  // first predicted frame
};

struct PredictorStepResult {
  double loss = 0.0;
  double gt_context = 0.0;
  double zero_context = 0.0;
};

/// Dual-context step: every sample is unrolled once from the ground-truth
/// previous latents and once from zeros; the summed loss drives one AdamW update.
/// Throws NumericalError (without updating) when the loss is not finite.
PredictorStepResult predictor_train_step(Predictor& predictor, AdamW& optimizer,
                                         std::span<const LatentSequence> data,
                                         std::span<const TrainSample> batch,
                                         const LatentPrior& prior, const Skeleton& skeleton);

AdamW make_predictor_optimizer(const Predictor& predictor);

}  // namespace gavatar
