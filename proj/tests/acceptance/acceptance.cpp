// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Dense>

#include "fixtures.hpp"
#include "gavatar/checkpoint.hpp"
#include "gavatar/decoder.hpp"
#include "gavatar/hierarchy.hpp"
#include "gavatar/localization.hpp"
#include "gavatar/metrics.hpp"
#include "gavatar/ops.hpp"
#include "gavatar/pipeline.hpp"
#include "gavatar/predictor.hpp"
#include "gavatar/render.hpp"
#include "gavatar/synthetic.hpp"
#include "gradcheck.hpp"
#include "op_cases.hpp"

namespace fs = std::filesystem;
using namespace gavatar;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  const auto av = a.values();
  const auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  return s / static_cast<double>(av.size());
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto cases = testing::op_cases();
  double worst = 0.0;
  std::string worst_op;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    std::mt19937_64 rng(7000 + c);
    for (int trial = 0; trial < 20; ++trial) {
      auto inst = cases[c].make(rng);
      const double rel = testing::grad_check(inst.fn, inst.inputs).max_rel_error;
      if (!(rel <= worst)) {
        worst = rel;
        worst_op = cases[c].name;
      }
    }
  }

  // Render loss of a decoded avatar frame with respect to its appearance latents.
  const AvatarRig rig = testing::small_rig();
  double worst_e2e = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::mt19937_64 rng(8000 + static_cast<std::uint64_t>(trial));
    AvatarDecoder dec = AvatarDecoder::init(rig, {}, 100 + static_cast<std::uint64_t>(trial));
    for (Tensor* t : {&dec.sh0_bias, &dec.sh0_basis, &dec.scale_basis, &dec.rotation_basis, &dec.control_basis}) {
      for (auto& v : t->mutable_values()) v = std::normal_distribution<double>(0.0, 0.3)(rng);
    }
    const Pose pose = random_motion(rig.skeleton(), 1, 0.3, 50 + static_cast<std::uint64_t>(trial))[0];
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const Camera cam = Camera::look_at(Vec3(2.2 * u(rng), 1.0 + 0.3 * u(rng), 2.2), Vec3(0, 0.9, 0),
                                       Vec3(0, 1, 0), 40.0, 20, 20);
    Image target = Image::zeros(20, 20, 3);
    for (auto& v : target.data) v = 0.5 * (1.0 + u(rng));
    Image mask = Image::zeros(20, 20, 1);
    for (auto& v : mask.data) v = 1.0;
    const std::vector<double> phi(static_cast<std::size_t>(rig.face_dim), 0.1);
    const Tensor latents = Tensor::randn({rig.hierarchy.anchor_count(), kLatentDim}, rng);
    const auto r = testing::grad_check(
        [&](const std::vector<Tensor>& in) {
          const auto f = pose_frame(rig, dec, pose, phi, in[0]);
          const Tensor rgb = sh_to_rgb(f.sh, f.means, cam.center(), 0);
          const Tensor img = render_differentiable(f.means, f.rotations, f.scales, f.opacities, rgb, cam);
          return photometric_l1(img, target, mask);
        },
        {latents});
    worst_e2e = std::max(worst_e2e, r.max_rel_error);
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst < 1e-4 && worst_e2e < 1e-3 && secs < 120.0;
  o.detail = fmt("%zu ops x 20 cases max rel %.2e (%s); end-to-end 20 cases max rel %.2e; %.1f s", cases.size(),
                 worst, worst_op.c_str(), worst_e2e, secs);
  return o;
}

// ---------------------------------------------------------------------------
// 2. Mask oracle

TemplateMesh random_sheet(const Skeleton& skeleton, std::mt19937_64& rng) {
  constexpr int kGrid = 12;
  TemplateMesh mesh;
  mesh.skeleton = skeleton;
  std::uniform_real_distribution<double> bump(-0.1, 0.1);
  for (int j = 0; j < kGrid; ++j) {
    for (int i = 0; i < kGrid; ++i) {
      const double x = static_cast<double>(i) / (kGrid - 1);
      const double y = static_cast<double>(j) / (kGrid - 1);
      mesh.vertices.emplace_back(2.0 * x - 1.0, 2.0 * y - 1.0, bump(rng));
      mesh.uv.emplace_back(x, y);
      mesh.skinning.push_back(testing::random_skin_row(skeleton.joint_count(), rng));
    }
  }
  for (int j = 0; j + 1 < kGrid; ++j) {
    for (int i = 0; i + 1 < kGrid; ++i) {
      const int v = j * kGrid + i;
      mesh.triangles.push_back({v, v + 1, v + kGrid + 1});
      mesh.triangles.push_back({v, v + kGrid + 1, v + kGrid});
    }
  }
  mesh.validate();
  return mesh;
}

Outcome mask_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(21);
  int skeletons = 0;
  int anchors = 0;
  int mismatches = 0;
  std::vector<int> sizes;
  for (int trial = 0; trial < 6; ++trial) {
    const int joints = 8 + static_cast<int>(rng() % 29);
    const Skeleton sk = testing::random_skeleton(joints, rng);
    const TemplateMesh mesh = random_sheet(sk, rng);
    const Hierarchy h = build_hierarchy(mesh, {40, 80, 160}, 30 + static_cast<std::uint64_t>(trial));
    const PoseMaskSet masks = build_pose_masks(mesh, h);
    Pose base = Pose::zero(sk);
    std::normal_distribution<double> g(0.0, 0.4);
    for (auto& t : base.theta) t = g(rng);
    for (std::size_t a = 0; a < h.anchors.size(); ++a) {
      const auto oracle = testing::perturbation_mask(sk, h.anchors.positions[a], h.anchors.skinning[a], base);
      if (oracle != masks.base[a]) ++mismatches;
      ++anchors;
    }
    sizes.push_back(joints);
    ++skeletons;
  }
  const double secs = seconds_since(t0);
  std::ostringstream js;
  for (std::size_t i = 0; i < sizes.size(); ++i) js << (i ? "," : "") << sizes[i];
  Outcome o;
  o.pass = skeletons >= 5 && mismatches == 0 && secs < 60.0;
  o.detail = fmt("%d skeletons (joints %s), %d anchors, %d mismatches; %.1f s", skeletons, js.str().c_str(), anchors,
                 mismatches, secs);
  return o;
}

// ---------------------------------------------------------------------------
// 3. PCA prior

Outcome pca_prior() {
  const Skeleton sk = Skeleton::canonical();
  std::vector<std::vector<double>> training;
  for (std::uint64_t s = 0; s < 6; ++s) {
    for (const auto& p : random_motion(sk, 100, 0.35, 300 + s)) training.push_back(p.theta);
  }
  const LocalPcaModel model = fit_local_pca(training, sk);
  const std::array<int, 7> expected{12, 9, 9, 12, 12, 27, 27};
  bool sizes_ok = model.groups.size() == expected.size();
  for (std::size_t g = 0; sizes_ok && g < expected.size(); ++g) {
    sizes_ok = model.groups[g].dim() == expected[g] && model.groups[g].rank() == 5;
  }

  std::mt19937_64 rng(31);
  std::normal_distribution<double> wide(0.0, 0.8);
  double idempotence = 0.0;
  double bound_excess = 0.0;
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> theta(static_cast<std::size_t>(sk.param_count()));
    for (auto& v : theta) v = wide(rng);
    const auto once = apply_pose_prior(theta, model);
    const auto twice = apply_pose_prior(once, model);
    for (std::size_t k = 0; k < once.size(); ++k) idempotence = std::max(idempotence, std::abs(twice[k] - once[k]));
    for (const auto& b : model.groups) {
      Eigen::VectorXd x(b.dim());
      for (int c = 0; c < b.dim(); ++c) x[c] = once[static_cast<std::size_t>(b.indices[static_cast<std::size_t>(c)])];
      const Eigen::VectorXd coeff = b.coefficients(x);
      for (int c = 0; c < b.rank(); ++c) bound_excess = std::max(bound_excess, std::abs(coeff[c]) - 2.0 * b.sigma[c]);
    }
  }

  std::uniform_real_distribution<double> inside(-1.9, 1.9);
  double round_trip = 0.0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> theta(static_cast<std::size_t>(sk.param_count()), 0.0);
    for (const auto& b : model.groups) {
      Eigen::VectorXd x = b.mean;
      for (int c = 0; c < b.rank(); ++c) x += inside(rng) * b.sigma[c] * b.components.col(c);
      for (int c = 0; c < b.dim(); ++c) theta[static_cast<std::size_t>(b.indices[static_cast<std::size_t>(c)])] = x[c];
    }
    const auto back = apply_pose_prior(theta, model);
    for (std::size_t k = 0; k < theta.size(); ++k) round_trip = std::max(round_trip, std::abs(back[k] - theta[k]));
  }
  Outcome o;
  o.pass = sizes_ok && idempotence < 1e-10 && round_trip < 1e-8 && bound_excess <= 1e-12;
  o.detail = fmt("groups (12,9,9,12,12,27,27)x5 %s; idempotence %.1e; round trip %.1e; max |c|-2sigma over 10k poses %.1e",
                 sizes_ok ? "ok" : "WRONG", idempotence, round_trip, bound_excess);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Interpolation weights

Outcome interpolation_weights() {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double sum_err = 0.0;
  double hull_err = 0.0;
  double scale_err = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const Vec3 x(u(rng), u(rng), u(rng));
    const std::array<Vec3, 3> n{Vec3(u(rng), u(rng), u(rng)), Vec3(u(rng), u(rng), u(rng)), Vec3(u(rng), u(rng), u(rng))};
    const auto w = interp_weights(x, n);
    sum_err = std::max(sum_err, std::abs(w[0] + w[1] + w[2] - 1.0));
    const std::array<double, 3> values{u(rng), u(rng), u(rng)};
    const double blend = w[0] * values[0] + w[1] * values[1] + w[2] * values[2];
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    hull_err = std::max({hull_err, *lo - blend, blend - *hi});
    for (double wk : w) hull_err = std::max({hull_err, -wk, wk - 1.0});
    const double c = std::exp(3.0 * u(rng));
    const Vec3 shift(u(rng), u(rng), u(rng));
    const auto ws = interp_weights(c * x + shift, {c * n[0] + shift, c * n[1] + shift, c * n[2] + shift});
    for (int k = 0; k < 3; ++k) scale_err = std::max(scale_err, std::abs(ws[static_cast<std::size_t>(k)] - w[static_cast<std::size_t>(k)]));
  }
  const auto w = interp_weights(Vec3::Zero(), {Vec3(1, 0, 0), Vec3(0, 2, 0), Vec3(0, 0, 4)});
  const double exact = std::max({std::abs(w[0] - 4.0 / 7.0), std::abs(w[1] - 2.0 / 7.0), std::abs(w[2] - 1.0 / 7.0)});
  Outcome o;
  o.pass = sum_err < 1e-12 && hull_err <= 1e-12 && scale_err < 1e-12 && exact < 1e-12;
  o.detail = fmt("sum-to-1 %.1e; hull %.1e; scale/translation %.1e; (1,2,4) -> (%.15f, %.15f, %.15f) err %.1e", sum_err,
                 hull_err, scale_err, w[0], w[1], w[2], exact);
  return o;
}

// ---------------------------------------------------------------------------
// Shared desk-scale models for criteria 5, 6, 7 and 9

struct DeskModels {
  CaptureDataset dataset;
  std::vector<UvTexture> textures;
  AvatarModel latent;
  AvatarModel pose_only;
  double latent_seconds = 0.0;
  int latent_iterations = 0;
  double pose_only_seconds = 0.0;
};

AvatarModel train_or_load(const CaptureDataset& ds, const TrainConfig& cfg, const fs::path& cache, double& secs,
                          int& iterations) {
  const fs::path time_file = fs::path(cache.string() + ".time");
  if (!cache.empty() && fs::exists(cache) && fs::exists(time_file)) {
    std::ifstream in(time_file);
    in >> secs >> iterations;
    return AvatarModel::load(Checkpoint::load(cache));
  }
  const auto t0 = Clock::now();
  iterations = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const TrainProgress& p) {
    iterations = p.iteration + 1;
    if (p.iteration % 250 == 0) {
      std::cerr << "  [train" << (cfg.zero_latents ? " pose-only" : "") << "] iteration " << p.iteration << "  "
                << p.loss.describe() << "\n";
    }
  };
  AvatarModel model = train_avatar(ds, cfg, hooks);
  secs = seconds_since(t0);
  if (!cache.empty()) {
    Checkpoint ck;
    model.save(ck);
    ck.save(cache);
    std::ofstream(time_file) << secs << " " << iterations << "\n";
  }
  return model;
}

DeskModels& desk_models(const fs::path& cache_dir) {
  static std::optional<DeskModels> models;
  if (models) return *models;
  models.emplace();
  DeskModels& m = *models;
  m.dataset = generate_synthetic_capture(SyntheticSpec{});
  TrainConfig cfg;
  m.textures = project_dataset_textures(m.dataset, cfg.texture_resolution);
  if (!cache_dir.empty()) fs::create_directories(cache_dir);
  const auto cached = [&](const char* name) { return cache_dir.empty() ? fs::path() : cache_dir / name; };
  m.latent = train_or_load(m.dataset, cfg, cached("latent.gavt"), m.latent_seconds, m.latent_iterations);
  TrainConfig zero = cfg;
  zero.zero_latents = true;
  int zero_iterations = 0;
  m.pose_only = train_or_load(m.dataset, zero, cached("pose_only.gavt"), m.pose_only_seconds, zero_iterations);
  return m;
}

Tensor frame_latents(const AvatarModel& model, const UvTexture& texture) {
  if (model.zero_latents) return Tensor::zeros({model.rig.hierarchy.anchor_count(), kLatentDim});
  return encoder_latents(model, texture);
}

// ---------------------------------------------------------------------------
// 5. Desk-scale overfit

Outcome desk_overfit(const fs::path& cache_dir) {
  DeskModels& m = desk_models(cache_dir);
  NoGradGuard guard;
  double total = 0.0;
  int count = 0;
  for (std::size_t f = 0; f < m.dataset.frames.size(); ++f) {
    const auto frame = decode_frame(m.latent, m.dataset.frames[f].pose, m.dataset.frames[f].phi,
                                    frame_latents(m.latent, m.textures[f]));
    for (std::size_t v = 0; v < m.dataset.cameras.size(); ++v) {
      const Image img = render_view(m.latent, frame, m.dataset.cameras[v]);
      const Image& gt = m.dataset.frames[f].images[v];
      total += psnr({img.data, img.width, img.height, 3}, {gt.data, gt.width, gt.height, 3});
      ++count;
    }
  }
  const double mean = total / count;
  const auto& s = m.dataset;
  Outcome o;
  o.pass = mean >= 30.0 && m.latent_iterations <= 2000 && m.latent_seconds < 1800.0;
  o.detail = fmt("%zu frames x %zu views %dx%d, hierarchy %lld/%lld/%lld: mean PSNR %.2f dB after %d iterations in %.0f s",
                 s.frames.size(), s.cameras.size(), s.cameras[0].width, s.cameras[0].height,
                 static_cast<long long>(m.latent.rig.hierarchy.anchor_count()),
                 static_cast<long long>(m.latent.rig.hierarchy.control_count()),
                 static_cast<long long>(m.latent.rig.hierarchy.gaussian_count()), mean, m.latent_iterations,
                 m.latent_seconds);
  return o;
}

// ---------------------------------------------------------------------------
// 6. Disambiguation

Outcome disambiguation(const fs::path& cache_dir) {
  DeskModels& m = desk_models(cache_dir);
  bool latent_ok = true;
  bool ablation_fails_every_pair = !m.dataset.ambiguity_pairs.empty();
  std::ostringstream detail;
  for (const auto& [a, b] : m.dataset.ambiguity_pairs) {
    const double la = frame_photometric_l1(m.latent, m.dataset, a, m.textures[static_cast<std::size_t>(a)]);
    const double lb = frame_photometric_l1(m.latent, m.dataset, b, m.textures[static_cast<std::size_t>(b)]);
    const double za = frame_photometric_l1(m.pose_only, m.dataset, a, m.textures[static_cast<std::size_t>(a)]);
    const double zb = frame_photometric_l1(m.pose_only, m.dataset, b, m.textures[static_cast<std::size_t>(b)]);
    latent_ok = latent_ok && la < 0.02 && lb < 0.02;
    ablation_fails_every_pair = ablation_fails_every_pair && (za >= 0.02 || zb >= 0.02);
    detail << fmt("pair (%d,%d): latent %.4f/%.4f, zero-latent %.4f/%.4f; ", a, b, la, lb, za, zb);
  }
  Outcome o;
  o.pass = latent_ok && ablation_fails_every_pair;
  o.detail = detail.str() + "bound 0.02";
  return o;
}

// ---------------------------------------------------------------------------
// 7. Localization

/// Anchors a Gaussian reads from: its own corrective triple plus the triples of
/// the control points that displace it.
std::vector<std::set<int>> gaussian_anchor_sets(const Hierarchy& h) {
  std::vector<std::set<int>> sets(static_cast<std::size_t>(h.gaussian_count()));
  for (std::size_t g = 0; g < sets.size(); ++g) {
    for (int a : h.gaussian_anchor[g].index) sets[g].insert(a);
    for (int c : h.gaussian_control[g].index) {
      for (int a : h.control_anchor[static_cast<std::size_t>(c)].index) sets[g].insert(a);
    }
  }
  return sets;
}

std::vector<Splat2D> splats_of(const GaussianFrame& f, const Camera& cam) {
  std::vector<Splat2D> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!project(f.means[i], f.rotations[i], f.scales[i], f.opacities[i], Vec3::Zero(), cam, out[i])) out[i].index = -2;
  }
  return out;
}

Outcome localization(const fs::path& cache_dir) {
  DeskModels& m = desk_models(cache_dir);
  const AvatarModel& model = m.latent;
  const AvatarRig& rig = model.rig;
  const Skeleton& sk = rig.skeleton();
  const auto& ds = m.dataset;
  const auto anchor_sets = gaussian_anchor_sets(rig.hierarchy);
  NoGradGuard guard;

  int params_tested = 0;
  int masked_out_checks = 0;
  int nonzero_masked_out = 0;
  int pixels_changed = 0;
  int pixels_outside = 0;
  int raw_leaks = 0;
  std::mt19937_64 rng(71);
  std::vector<int> params;
  for (std::size_t g = 0; g < sk.groups().size(); ++g) {
    const auto gp = sk.group_params(g);
    params.push_back(gp[rng() % gp.size()]);
    params.push_back(gp[rng() % gp.size()]);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const int p = params[i];
    const std::size_t f = i % ds.frames.size();
    const auto& frame = ds.frames[f];
    const Tensor lat = frame_latents(model, m.textures[f]);
    const auto features = apply_pose_prior(frame.pose.theta, rig.pose_prior);
    auto perturbed = features;
    perturbed[static_cast<std::size_t>(p)] += 0.5;
    const auto base = pose_frame_with_features(rig, model.decoder, frame.pose, features, frame.phi, lat);
    const auto moved = pose_frame_with_features(rig, model.decoder, frame.pose, perturbed, frame.phi, lat);

    std::vector<std::uint8_t> anchor_has(rig.masks.anchor_count(), 0);
    const auto width = static_cast<std::size_t>(base.anchor_outputs.dim(1));
    for (std::size_t a = 0; a < rig.masks.anchor_count(); ++a) {
      anchor_has[a] = rig.masks.theta[a][static_cast<std::size_t>(p)];
      if (anchor_has[a]) continue;
      ++masked_out_checks;
      const auto x = base.anchor_outputs.values().subspan(a * width, width);
      const auto y = moved.anchor_outputs.values().subspan(a * width, width);
      if (!std::equal(x.begin(), x.end(), y.begin())) ++nonzero_masked_out;
    }

    const GaussianFrame gb = to_gaussian_frame(base, model.sh_degree);
    const GaussianFrame gm = to_gaussian_frame(moved, model.sh_degree);
    for (const Camera& cam : ds.cameras) {
      const RenderResult rb = render(gb, cam);
      const RenderResult rm = render(gm, cam);
      std::vector<std::uint8_t> covered(static_cast<std::size_t>(cam.width * cam.height), 0);
      for (const auto& splats : {splats_of(gb, cam), splats_of(gm, cam)}) {
        for (std::size_t g = 0; g < splats.size(); ++g) {
          if (splats[g].index == -2) continue;
          bool reads = false;
          for (int a : anchor_sets[g]) reads = reads || anchor_has[static_cast<std::size_t>(a)];
          if (!reads) continue;
          for (int y = splats[g].y0; y <= splats[g].y1; ++y) {
            for (int x = splats[g].x0; x <= splats[g].x1; ++x) covered[static_cast<std::size_t>(y * cam.width + x)] = 1;
          }
        }
      }
      for (int px = 0; px < cam.width * cam.height; ++px) {
        const auto k = static_cast<std::size_t>(px);
        bool diff = rb.alpha[k] != rm.alpha[k];
        for (int c = 0; c < 3; ++c) diff = diff || rb.rgb[3 * k + static_cast<std::size_t>(c)] != rm.rgb[3 * k + static_cast<std::size_t>(c)];
        if (!diff) continue;
        ++pixels_changed;
        if (!covered[k]) ++pixels_outside;
      }
    }

    // Informational: the raw pose drives skinning, so a raw-theta change also
    // moves geometry outside the masked anchors.
    Pose raw = frame.pose;
    raw.theta[static_cast<std::size_t>(p)] += 0.5;
    const auto raw_frame = pose_frame(rig, model.decoder, raw, frame.phi, lat);
    const auto base_raw = pose_frame(rig, model.decoder, frame.pose, frame.phi, lat);
    for (std::size_t a = 0; a < rig.masks.anchor_count(); ++a) {
      if (anchor_has[a]) continue;
      const auto x = base_raw.anchor_outputs.values().subspan(a * width, width);
      const auto y = raw_frame.anchor_outputs.values().subspan(a * width, width);
      if (!std::equal(x.begin(), x.end(), y.begin())) ++raw_leaks;
    }
    ++params_tested;
  }
  Outcome o;
  o.pass = masked_out_checks > 0 && nonzero_masked_out == 0 && pixels_changed > 0 && pixels_outside == 0;
  o.detail = fmt("%d parameters, %d masked-out anchor outputs checked, %d changed; %d changed pixels, %d outside the "
                 "reading Gaussians' footprints (raw-theta perturbation through the PCA group: %d masked-out anchor "
                 "outputs move)",
                 params_tested, masked_out_checks, nonzero_masked_out, pixels_changed, pixels_outside, raw_leaks);
  return o;
}

// ---------------------------------------------------------------------------
// 8. Predictor dynamics oracle

struct LinearDynamics {
  Eigen::MatrixXd a;               // state transition, spectral radius 0.7
  Eigen::MatrixXd b;               // pose input
  std::vector<Eigen::MatrixXd> u;  // per-anchor orthonormal embedding of the state
};

LinearDynamics make_dynamics(int anchors, int state, int params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  const auto gaussian = [&](int r, int c) { return Eigen::MatrixXd(Eigen::MatrixXd::NullaryExpr(r, c, [&] { return g(rng); })); };
  LinearDynamics d;
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(state, state)).householderQ();
  d.a = 0.7 * q;
  d.b = gaussian(state, params) / std::sqrt(static_cast<double>(params));
  for (int k = 0; k < anchors; ++k) {
    const Eigen::MatrixXd full = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(kLatentDim, state)).householderQ();
    d.u.push_back(full.leftCols(state));
  }
  return d;
}

/// l_t = A_k l_{t-1} + B_k theta_t per anchor with A_k = U_k A U_k^T, B_k = U_k B.
LatentSequence simulate(const LinearDynamics& d, const Skeleton& sk, int frames, std::uint64_t seed) {
  LatentSequence seq;
  seq.poses = random_motion(sk, frames, 0.35, seed);
  Eigen::VectorXd s = Eigen::VectorXd::Zero(d.a.rows());
  for (const auto& pose : seq.poses) {
    s = d.a * s + d.b * Eigen::Map<const Eigen::VectorXd>(pose.theta.data(), static_cast<Eigen::Index>(pose.theta.size()));
    std::vector<double> l;
    for (const auto& u : d.u) {
      const Eigen::VectorXd v = u * s;
      l.insert(l.end(), v.data(), v.data() + v.size());
    }
    seq.latents.push_back(std::move(l));
  }
  return seq;
}

Outcome predictor_oracle() {
  const auto t0 = Clock::now();
  const Skeleton sk = Skeleton::canonical();
  constexpr int kAnchors = 4;
  const LinearDynamics dyn = make_dynamics(kAnchors, LatentPrior::kComponents, sk.param_count(), 81);
  std::vector<LatentSequence> train, held_out;
  for (std::uint64_t s = 0; s < 128; ++s) train.push_back(simulate(dyn, sk, 60, 1000 + s));
  for (std::uint64_t s = 0; s < 4; ++s) held_out.push_back(simulate(dyn, sk, 60, 2000 + s));
  std::vector<std::vector<double>> frames;
  for (const auto& seq : train) frames.insert(frames.end(), seq.latents.begin(), seq.latents.end());
  const LatentPrior prior = LatentPrior::fit(frames, kAnchors, kLatentDim);

  PredictorTrainConfig cfg;
  cfg.model.token_dim = 64;
  cfg.model.ff_dim = 128;
  cfg.model.unroll = 1;
  cfg.steps = 4000;
  cfg.batch = 4;
  cfg.seed = 82;
  const Predictor pred = train_predictor(train, prior, sk, cfg).predictor;

  NoGradGuard guard;
  double one_step = 0.0;
  int one_step_count = 0;
  for (const auto& seq : held_out) {
    for (std::size_t t = 1; t < seq.poses.size(); ++t) {
      const auto window = normalize_window(history_window(seq.poses, t, cfg.model.history, sk));
      const Tensor out = predict(pred, window, Tensor::from({kAnchors, kLatentDim}, seq.latents[t - 1]), prior);
      one_step += mean_abs_diff(out, Tensor::from({kAnchors, kLatentDim}, seq.latents[t]));
      ++one_step_count;
    }
  }
  one_step /= one_step_count;

  // Rollouts from zeros and from the ground-truth latents of the frame before.
  double worst_ratio = 0.0;
  const std::size_t history = static_cast<std::size_t>(cfg.model.history);
  for (const auto& seq : held_out) {
    for (std::size_t first : {std::size_t{15}, std::size_t{35}}) {
      const Tensor gt_init = Tensor::from({kAnchors, kLatentDim}, seq.latents[first - 1]);
      const Tensor zeros = Tensor::zeros({kAnchors, kLatentDim});
      const double initial_gap = mean_abs_diff(zeros, gt_init);
      const auto from_zero = rollout(pred, seq.poses, zeros, prior, sk, first);
      const auto from_gt = rollout(pred, seq.poses, gt_init, prior, sk, first);
      const double gap = mean_abs_diff(from_zero[history - 1], from_gt[history - 1]);
      worst_ratio = std::max(worst_ratio, gap / initial_gap);
    }
  }
  Outcome o;
  o.pass = one_step < 0.05 && worst_ratio < 0.1;
  o.detail = fmt("held-out one-step L1 %.4f (latent rms scale %.3f); zero-init vs GT-init gap at frame %zu <= %.3f%% "
                 "of the initial gap; %.0f s",
                 one_step, std::sqrt(prior.block(0).sigma.squaredNorm() / kLatentDim), history, 100.0 * worst_ratio,
                 seconds_since(t0));
  return o;
}

// ---------------------------------------------------------------------------
// 9. Temporal stability

double sequence_flicker(const DriveResult& r) {
  double total = 0.0;
  const std::size_t views = r.images.front().size();
  for (std::size_t v = 0; v < views; ++v) {
    std::vector<Image> seq;
    for (const auto& frame : r.images) seq.push_back(frame[v]);
    total += flicker_statistic(seq);
  }
  return total / static_cast<double>(views);
}

Outcome temporal_stability(const fs::path& cache_dir) {
  DeskModels& m = desk_models(cache_dir);
  const auto t0 = Clock::now();
  const LatentSequence train_seq = training_sequence(m.latent, m.dataset);
  PredictorTrainConfig cfg;
  cfg.seed = 91;
  const Predictor pred = train_predictor(std::span(&train_seq, 1), m.latent.latent_prior, m.latent.rig.skeleton(), cfg).predictor;

  double pred_total = 0.0, enc_total = 0.0, pose_total = 0.0, gt_total = 0.0;
  std::ostringstream per_seq;
  constexpr int kSequences = 3;
  for (int s = 0; s < kSequences; ++s) {
    SyntheticSpec spec;
    spec.seed = 900 + static_cast<std::uint64_t>(s);
    spec.ambiguity_pairs = 0;
    const CaptureDataset held = generate_synthetic_capture(spec);
    const auto textures = project_dataset_textures(held, m.latent.encoder.config.resolution);
    std::vector<Pose> poses;
    std::vector<std::vector<double>> phis;
    for (const auto& f : held.frames) {
      poses.push_back(f.pose);
      phis.push_back(f.phi);
    }
    DriveOptions first_frame;
    first_frame.mode = InitMode::Encoder;
    DriveOptions every_frame = first_frame;
    every_frame.reinit_interval = 1;
    const double fp = sequence_flicker(drive(m.latent, &pred, poses, phis, held.cameras, first_frame, textures));
    const double fe = sequence_flicker(drive(m.latent, nullptr, poses, phis, held.cameras, every_frame, textures));
    const double fz = sequence_flicker(drive(m.pose_only, nullptr, poses, phis, held.cameras, DriveOptions{}));
    double fg = 0.0;
    for (std::size_t v = 0; v < held.cameras.size(); ++v) {
      std::vector<Image> seq;
      for (const auto& f : held.frames) seq.push_back(f.images[v]);
      fg += flicker_statistic(seq) / static_cast<double>(held.cameras.size());
    }
    pred_total += fp;
    enc_total += fe;
    pose_total += fz;
    gt_total += fg;
    per_seq << fmt(" seq%d %.5f/%.5f/%.5f", s, fp, fe, fz);
  }
  const double fp = pred_total / kSequences, fe = enc_total / kSequences, fz = pose_total / kSequences;
  Outcome o;
  o.pass = fp <= 1.25 * fe && fp < fz;
  o.detail = fmt("flicker predictor %.5f, encoder %.5f (ratio %.3f, bound 1.25), pose-only %.5f, ground truth %.5f;",
                 fp, fe, fp / fe, fz, gt_total / kSequences) +
             per_seq.str() + fmt("; %.0f s", seconds_since(t0));
  return o;
}

// ---------------------------------------------------------------------------
// 10. Rasterizer

GaussianFrame random_gaussians(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> pos(-0.6, 0.6), s(0.02, 0.15), o(0.05, 0.99), c(-1.0, 1.0);
  GaussianFrame f;
  for (int i = 0; i < n; ++i) {
    f.means.emplace_back(pos(rng), pos(rng), pos(rng));
    f.rotations.push_back(Eigen::Vector4d(c(rng), c(rng), c(rng), c(rng)).normalized());
    f.scales.emplace_back(s(rng), s(rng), s(rng));
    f.opacities.push_back(o(rng));
  }
  for (int i = 0; i < n * kShCoeffs * 3; ++i) f.sh.push_back(c(rng));
  f.sh_degree = 1;
  return f;
}

GaussianFrame permuted(const GaussianFrame& f, const std::vector<std::size_t>& perm) {
  GaussianFrame out;
  out.sh_degree = f.sh_degree;
  for (auto i : perm) {
    out.means.push_back(f.means[i]);
    out.rotations.push_back(f.rotations[i]);
    out.scales.push_back(f.scales[i]);
    out.opacities.push_back(f.opacities[i]);
    const auto* sh = &f.sh[i * kShCoeffs * 3];
    out.sh.insert(out.sh.end(), sh, sh + kShCoeffs * 3);
  }
  return out;
}

Outcome rasterizer() {
  std::mt19937_64 rng(101);
  const Camera cam = Camera::look_at({0, 0, -3}, {0, 0, 0}, {0, -1, 0}, 40.0, 40, 40);
  RenderOptions exact;
  exact.skip_low_alpha = false;
  exact.early_termination = false;

  double path_diff = 0.0;
  bool permutation_exact = true;
  for (int trial = 0; trial < 5; ++trial) {
    const GaussianFrame f = random_gaussians(rng, 250);
    const RenderResult fast = render(f, cam, exact);
    std::vector<double> m, q, s;
    for (std::size_t i = 0; i < f.size(); ++i) {
      for (int k = 0; k < 3; ++k) m.push_back(f.means[i][k]);
      for (int k = 0; k < 4; ++k) q.push_back(f.rotations[i][k]);
      for (int k = 0; k < 3; ++k) s.push_back(f.scales[i][k]);
    }
    const auto n = static_cast<std::int64_t>(f.size());
    const Tensor means = Tensor::from({n, 3}, m);
    const Tensor rgb = sh_to_rgb(Tensor::from({n, kShCoeffs, 3}, f.sh), means, cam.center(), f.sh_degree);
    const Tensor img = render_differentiable(means, Tensor::from({n, 4}, q), Tensor::from({n, 3}, s),
                                             Tensor::from({n}, f.opacities), rgb, cam);
    const auto iv = img.values();
    for (std::size_t i = 0; i < fast.rgb.size(); ++i) path_diff = std::max(path_diff, std::abs(fast.rgb[i] - iv[i]));

    std::vector<std::size_t> perm(f.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (int shuffle = 0; shuffle < 3; ++shuffle) {
      std::shuffle(perm.begin(), perm.end(), rng);
      const GaussianFrame g = permuted(f, perm);
      for (const RenderOptions& opts : {RenderOptions{}, exact}) {
        const RenderResult a = render(f, cam, opts);
        const RenderResult b = render(g, cam, opts);
        permutation_exact = permutation_exact && a.rgb == b.rgb && a.alpha == b.alpha;
      }
    }
  }

  // Axis-aligned Gaussians on the optical axis: Sigma_2D = diag((f s_x / z)^2, (f s_y / z)^2) + eps I.
  double footprint_err = 0.0;
  bool bounds_ok = true;
  const std::array<std::array<double, 4>, 3> shapes{{{0.05, 0.05, 0.8, 3.0}, {0.09, 0.03, 0.6, 2.5}, {0.02, 0.07, 0.95, 4.0}}};
  const Camera center = Camera::look_at({0, 0, 0}, {0, 0, 1}, {0, -1, 0}, 40.0, 41, 41);
  for (const auto& [sx, sy, opacity, depth] : shapes) {
    GaussianFrame f;
    f.means = {Vec3(0, 0, depth)};
    f.rotations = {Eigen::Vector4d(1, 0, 0, 0)};
    f.scales = {Vec3(sx, sy, 0.01)};
    f.opacities = {opacity};
    f.sh.assign(kShCoeffs * 3, 0.0);
    const RenderResult r = render(f, center, exact);
    const RenderResult skipped = render(f, center);
    const double a = std::pow(center.fx * sx / depth, 2) + kCovarianceEps;
    const double c = std::pow(center.fy * sy / depth, 2) + kCovarianceEps;
    const double radius = 3.0 * std::sqrt(std::max(a, c));
    for (int y = 0; y < center.height; ++y) {
      for (int x = 0; x < center.width; ++x) {
        const double dx = x - center.cx;
        const double dy = y - center.cy;
        const bool inside = std::abs(dx) <= radius && std::abs(dy) <= radius;
        const double expected = inside ? opacity * std::exp(-0.5 * (dx * dx / a + dy * dy / c)) : 0.0;
        const auto k = static_cast<std::size_t>(y * center.width + x);
        footprint_err = std::max(footprint_err, std::abs(r.alpha[k] - expected));
        const double expected_skip = expected < 1.0 / 255.0 ? 0.0 : expected;
        footprint_err = std::max(footprint_err, std::abs(skipped.alpha[k] - expected_skip));
        if (!inside && r.alpha[k] != 0.0) bounds_ok = false;
      }
    }
    const auto mid = static_cast<std::size_t>(20 * center.width + 20);
    footprint_err = std::max(footprint_err, std::abs(r.alpha[mid] - opacity));
  }
  Outcome o;
  o.pass = path_diff < 1e-6 && permutation_exact && footprint_err < 1e-12 && bounds_ok;
  o.detail = fmt("fast vs differentiable max |diff| %.2e; permutation %s; analytic footprint max err %.1e%s", path_diff,
                 permutation_exact ? "bit-exact" : "DIFFERS", footprint_err, bounds_ok ? "" : " (support leak)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gavatar acceptance suite"};
  std::vector<int> only;
  std::string cache_dir;
  bool train_only = false;
  bool fresh = false;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--cache-dir", cache_dir, "reuse or store the trained desk-scale avatars here");
  app.add_flag("--train-only", train_only, "train the desk-scale avatars into --cache-dir and exit");
  app.add_flag("--fresh", fresh, "discard cached avatars before running");
  CLI11_PARSE(app, argc, argv);

  const fs::path cache(cache_dir);
  if (fresh && !cache.empty()) fs::remove_all(cache);
  if (train_only) {
    if (cache.empty()) {
      std::cerr << "--train-only needs --cache-dir\n";
      return 2;
    }
    const DeskModels& m = desk_models(cache);
    std::cout << fmt("trained desk-scale avatars: latent %.0f s, pose-only %.0f s", m.latent_seconds, m.pose_only_seconds)
              << std::endl;
    return 0;
  }
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"mask oracle", mask_oracle},
      {"PCA prior", pca_prior},
      {"interpolation weights", interpolation_weights},
      {"desk-scale overfit", [&] { return desk_overfit(cache); }},
      {"disambiguation", [&] { return disambiguation(cache); }},
      {"localization", [&] { return localization(cache); }},
      {"predictor dynamics oracle", predictor_oracle},
      {"temporal stability", [&] { return temporal_stability(cache); }},
      {"rasterizer", rasterizer},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << "criterion " << id << " (" << criteria[i].first << "): " << (o.pass ? "PASS" : "FAIL") << "  "
              << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
