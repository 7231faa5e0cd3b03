#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gavatar/appearance.hpp"
#include "gavatar/checkpoint.hpp"
#include "gavatar/decoder.hpp"
#include "gavatar/image_io.hpp"
#include "gavatar/localization.hpp"
#include "gavatar/predictor.hpp"
#include "gavatar/render.hpp"
#include "gavatar/synthetic.hpp"

namespace gavatar {

struct LossWeights {
  double l1 = 1.0;
  double perceptual = 0.1;  // downsampled-L1 stand-in for LPIPS
  double opacity = 0.5;
  double scale = 1.0;
  double control = 0.5;
  double kl = 1e-6;
};

/// Learning rates for bias and corrective-basis parameters of each property.
struct LearningRates {
  double scale_bias = 5e-4, scale_basis = 1e-4;
  double rotation_bias = 5e-4, rotation_basis = 1e-4;
  double opacity_bias = 5e-4;
  double sh0_bias = 2.5e-3, sh0_basis = 1e-4;
  double shn_bias = 2.5e-5, shn_basis = 2.5e-6;
  double control_bias = 1.6e-4, control_basis = 1.6e-5;
  double position = 1e-4;
  double mlp = 5e-4;
  double encoder = 5e-4;
};

struct TrainConfig {
  LossWeights weights;
  LearningRates lr;
  int iterations = 2000;
  int batch_views = 4;             // views rendered per iteration (one frame per iteration)
  std::uint64_t seed = 1;
  int corrective_start = 500;      // iterations before correctives are enabled
  double sh_degree_fraction = 0.6; // SH degree 0 -> 1 at this fraction of the iterations
  HierarchyCounts counts;
  int texture_resolution = 128;
  int mask_dilation = 2;           // photometric loss mask = foreground dilated by this radius
  bool zero_latents = false;       // pose-only ablation: the encoder is never used
  bool latent_noise = true;
  int checkpoint_every = 0;        // 0 disables periodic checkpoints
  double divergence_factor = 10.0;
  int divergence_patience = 100;
  std::vector<int> frames;         // training frame subset; empty means all frames

  void validate() const;
};

/// Parses "key = value" lines ('#' starts a comment) on top of `base`.
/// Throws ConfigError on unknown keys or malformed values.
TrainConfig parse_train_config(const std::string& text, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});
/// Inverse of parse_train_config.
std::string format_train_config(const TrainConfig& config);

/// One rendered view with its supervision.
struct ViewTarget {
  const Camera* camera = nullptr;
  const Image* image = nullptr;   // RGB target
  const Image* mask = nullptr;    // photometric mask (1 channel)
  const Image* eroded = nullptr;  // eroded foreground (1 channel)
};

struct LossBreakdown {
  Tensor total;
  double l1 = 0.0;
  double perceptual = 0.0;
  double opacity = 0.0;
  double scale = 0.0;
  double control = 0.0;
  double kl = 0.0;

  std::string describe() const;
};

/// Weighted objective over the rendered views. `mu` / `logvar` may be undefined
/// (no KL term). Throws NumericalError naming the offending term when any term
/// is not finite.
LossBreakdown total_loss(std::span<const Tensor> renders, std::span<const ViewTarget> views,
                         const DecodedFrame& frame, const Hierarchy& hierarchy, const Tensor& mu,
                         const Tensor& logvar, const LossWeights& weights);

/// Individual terms, exposed for tests.
Tensor photometric_l1(const Tensor& render, const Image& target, const Image& mask);
Tensor perceptual_surrogate(const Tensor& render, const Image& target, const Image& mask);
Tensor opacity_loss(const Tensor& opacities, std::span<const std::uint8_t> inside);
Tensor scale_loss(const Tensor& scales);
Tensor control_smoothness(const Tensor& control_offsets,
                          std::span<const std::array<int, 5>> neighbors);

/// Gaussians whose projected mean lands inside the eroded mask of any view.
std::vector<std::uint8_t> gaussians_inside(const Tensor& means, std::span<const ViewTarget> views);

/// Square dilation of a binary mask.
Image dilate_mask(const Image& mask, int radius);

/// Everything a trained avatar needs at drive time.
struct AvatarModel {
  AvatarRig rig;
  AvatarDecoder decoder;
  Encoder encoder;
  LatentPrior latent_prior;
  std::vector<std::vector<double>> frame_latents;  // encoder latents per dataset frame
  int sh_degree = 0;
  bool zero_latents = false;

  void save(Checkpoint& ck) const;
  static AvatarModel load(const Checkpoint& ck);
};

/// UV textures of every dataset frame (projected from the eroded views).
std::vector<UvTexture> project_dataset_textures(const CaptureDataset& dataset, int resolution);

/// Per-anchor encoder latents (posterior mean) for one texture.
Tensor encoder_latents(const AvatarModel& model, const UvTexture& texture);

struct TrainProgress {
  int iteration = 0;
  LossBreakdown loss;
};

struct TrainState {
  AvatarModel model;
  TrainConfig config;
  int iteration = 0;
  double initial_loss = 0.0;
  int above_threshold = 0;
  std::vector<std::vector<double>> first_moments;
  std::vector<std::vector<double>> second_moments;
  std::int64_t optimizer_steps = 0;

  void save(Checkpoint& ck) const;
  static TrainState load(const Checkpoint& ck);
};

struct TrainHooks {
  std::function<void(const TrainProgress&)> on_step;
  std::filesystem::path checkpoint_dir;  // periodic checkpoints when non-empty
  int stop_after = -1;                   // stop (without finalizing) once this many iterations ran
};

/// Fresh training state: rig, decoder and encoder initialized from the seed.
TrainState init_training(const CaptureDataset& dataset, const TrainConfig& config);

/// Runs iterations until `config.iterations` (or `hooks.stop_after`). Throws
/// NumericalError on a non-finite loss or when the loss stays above
/// divergence_factor x the first loss for divergence_patience steps.
void run_training(TrainState& state, const CaptureDataset& dataset,
                  const std::vector<UvTexture>& textures, const TrainHooks& hooks = {});

/// Encoder latents for every training frame and the fitted latent prior.
void finalize_training(TrainState& state, const CaptureDataset& dataset,
                       const std::vector<UvTexture>& textures);

/// init_training + run_training + finalize_training.
AvatarModel train_avatar(const CaptureDataset& dataset, const TrainConfig& config,
                         const TrainHooks& hooks = {});

/// Decoded Gaussians of a dataset-style frame.
DecodedFrame decode_frame(const AvatarModel& model, const Pose& pose, std::span<const double> phi,
                          const Tensor& latents);

/// Fast-path render of one view.
Image render_view(const AvatarModel& model, const DecodedFrame& frame, const Camera& camera);

/// Masked photometric L1 of the model on one dataset frame (all views averaged),
/// using the encoder latents of that frame (or zeros for a pose-only model).
double frame_photometric_l1(const AvatarModel& model, const CaptureDataset& dataset, int frame,
                            const UvTexture& texture, int mask_dilation = 2);

struct PredictorTrainConfig {
  PredictorConfig model;
  int steps = 300;
  int batch = 4;
  std::uint64_t seed = 1;
};

struct PredictorTrainResult {
  Predictor predictor;
  std::vector<double> losses;
};

/// Trains the predictor on latent sequences. Throws ConfigError when the prior is unfitted.
PredictorTrainResult train_predictor(std::span<const LatentSequence> data, const LatentPrior& prior,
                                     const Skeleton& skeleton, const PredictorTrainConfig& config);

/// Poses of the dataset with the avatar's stored encoder latents.
LatentSequence training_sequence(const AvatarModel& model, const CaptureDataset& dataset);

enum class InitMode { Zeros, Encoder, Latents };

struct DriveOptions {
  InitMode mode = InitMode::Zeros;
  int reinit_interval = 0;  // encoder mode: re-encode every k frames (0: first frame only)
  Tensor init_latents;      // latents mode: stands in for the frame before the first
};

struct DriveResult {
  std::vector<Tensor> latents;             // per frame [N_a, N_l]
  std::vector<std::vector<Image>> images;  // [frame][camera]
};

/// Latents per frame then fast-path renders. `predictor` may be null, in which
/// case frames without an encoder texture use zero latents. Encoder mode needs
/// one texture per frame.
DriveResult drive(const AvatarModel& model, const Predictor* predictor, std::span<const Pose> poses,
                  std::span<const std::vector<double>> phis, std::span<const Camera> cameras,
                  const DriveOptions& options, std::span<const UvTexture> textures = {});

struct EvalReport {
  std::vector<double> psnr;
  std::vector<double> ssim;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double flicker = 0.0;     // mean adjacent-frame L1 of the renders
  double gt_flicker = 0.0;  // same statistic on the ground truth

  std::string to_json() const;
};

/// Per-frame PSNR / SSIM and adjacent-frame flicker for one aligned sequence.
EvalReport evaluate(std::span<const Image> renders, std::span<const Image> ground_truth);

/// Mean adjacent-frame L1 (0 for fewer than two frames).
double flicker_statistic(std::span<const Image> frames);

}  // namespace gavatar
