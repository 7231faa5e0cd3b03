#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gavatar/error.hpp"
#include "gavatar/parallel.hpp"
#include "gavatar/pipeline.hpp"
#include "gavatar/pose_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gavatar;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

TrainConfig read_config(const std::string& path, std::optional<std::uint64_t> seed) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_train_config(path);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "key = value training configuration file");
  cmd->add_option("--seed", o.seed, "random seed (overrides the config)");
  cmd->add_option("--out-dir", o.out_dir, "output directory")->capture_default_str();
}

int build_hierarchy_cmd(const Options& o, const std::string& dataset_dir) {
  const TrainConfig cfg = read_config(o.config, o.seed);
  const CaptureDataset ds = CaptureDataset::load(dataset_dir);
  const AvatarRig rig = build_rig(ds.mesh, cfg.counts, ds.thetas(), ds.face_dim, cfg.seed);
  fs::create_directories(o.out_dir);
  Checkpoint ck;
  rig.save(ck);
  ck.save(fs::path(o.out_dir) / "rig.gavt");
  json summary{{"anchors", rig.hierarchy.anchor_count()},
               {"control_points", rig.hierarchy.control_count()},
               {"gaussians", rig.hierarchy.gaussian_count()},
               {"pose_groups", rig.pose_prior.names}};
  write_text(fs::path(o.out_dir) / "hierarchy.json", summary.dump(2));
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int gen_synthetic_cmd(const Options& o, SyntheticSpec spec) {
  if (o.seed) spec.seed = *o.seed;
  const CaptureDataset ds = generate_synthetic_capture(spec);
  ds.save(o.out_dir);
  std::cout << "wrote " << ds.frames.size() << " frames x " << ds.cameras.size() << " views to " << o.out_dir
            << " (ambiguity pairs:";
  for (const auto& [i, j] : ds.ambiguity_pairs) std::cout << " " << i << "/" << j;
  std::cout << ")\n";
  return 0;
}

int fit_cmd(const Options& o, const std::string& dataset_dir, const std::string& resume) {
  const CaptureDataset ds = CaptureDataset::load(dataset_dir);
  TrainState state;
  if (!resume.empty()) {
    state = TrainState::load(Checkpoint::load(resume));
    if (o.seed) state.config.seed = *o.seed;
  } else {
    state = init_training(ds, read_config(o.config, o.seed));
  }
  const auto textures = state.config.zero_latents ? std::vector<UvTexture>{}
                                                  : project_dataset_textures(ds, state.config.texture_resolution);
  fs::create_directories(o.out_dir);
  std::ofstream log(fs::path(o.out_dir) / "loss.csv", resume.empty() ? std::ios::trunc : std::ios::app);
  if (resume.empty()) log << "iteration,total,l1,perceptual,opacity,scale,control,kl\n";
  TrainHooks hooks;
  hooks.checkpoint_dir = o.out_dir;
  hooks.on_step = [&](const TrainProgress& p) {
    const auto& b = p.loss;
    log << p.iteration << "," << b.total.item() << "," << b.l1 << "," << b.perceptual << "," << b.opacity << ","
        << b.scale << "," << b.control << "," << b.kl << "\n";
    if (p.iteration % 100 == 0) std::cout << "iter " << p.iteration << "  " << b.describe() << std::endl;
  };
  run_training(state, ds, textures, hooks);
  finalize_training(state, ds, textures);
  Checkpoint ck;
  state.save(ck);
  ck.save(fs::path(o.out_dir) / "avatar.gavt");
  std::cout << "saved " << (fs::path(o.out_dir) / "avatar.gavt").string() << "\n";
  return 0;
}

int train_predictor_cmd(const Options& o, const std::string& dataset_dir, const std::string& avatar_path,
                        PredictorTrainConfig cfg) {
  if (o.seed) cfg.seed = *o.seed;
  const CaptureDataset ds = CaptureDataset::load(dataset_dir);
  const AvatarModel model = AvatarModel::load(Checkpoint::load(avatar_path));
  const std::vector<LatentSequence> seqs = {training_sequence(model, ds)};
  const PredictorTrainResult r = train_predictor(seqs, model.latent_prior, model.rig.skeleton(), cfg);
  fs::create_directories(o.out_dir);
  Checkpoint ck;
  r.predictor.save(ck);
  ck.save(fs::path(o.out_dir) / "predictor.gavt");
  std::ofstream log(fs::path(o.out_dir) / "predictor_loss.csv");
  log << "step,loss\n";
  for (std::size_t i = 0; i < r.losses.size(); ++i) log << i << "," << r.losses[i] << "\n";
  std::cout << "final loss " << (r.losses.empty() ? 0.0 : r.losses.back()) << "\n";
  return 0;
}

struct DriveArgs {
  std::string avatar, predictor, dataset, poses, faces, cameras, latents;
  std::string init = "zeros";
  int reinit = 0;
};

int drive_cmd(const Options& o, const DriveArgs& a) {
  const AvatarModel model = AvatarModel::load(Checkpoint::load(a.avatar));
  std::optional<Predictor> predictor;
  if (!a.predictor.empty()) predictor = Predictor::load(Checkpoint::load(a.predictor));
  std::optional<CaptureDataset> ds;
  if (!a.dataset.empty()) ds = CaptureDataset::load(a.dataset);

  std::vector<Pose> poses;
  std::vector<std::vector<double>> phis;
  std::vector<Camera> cameras;
  if (!a.poses.empty()) {
    poses = PoseSequence::load(a.poses).frames;
  } else if (ds) {
    for (const auto& f : ds->frames) poses.push_back(f.pose);
  } else {
    throw ConfigError("drive: pass --poses or --dataset");
  }
  if (!a.faces.empty()) {
    phis = VectorSequence::load(a.faces).frames;
  } else if (ds && a.poses.empty()) {
    for (const auto& f : ds->frames) phis.push_back(f.phi);
  } else {
    phis.assign(poses.size(), std::vector<double>(static_cast<std::size_t>(model.rig.face_dim), 0.0));
  }
  if (!a.cameras.empty()) {
    cameras = load_cameras_json(a.cameras);
  } else if (ds) {
    cameras = ds->cameras;
  } else {
    throw ConfigError("drive: pass --cameras or --dataset");
  }

  DriveOptions opts;
  opts.reinit_interval = a.reinit;
  std::vector<UvTexture> textures;
  if (a.init == "zeros") {
    opts.mode = InitMode::Zeros;
  } else if (a.init == "encoder") {
    opts.mode = InitMode::Encoder;
    if (!ds || !a.poses.empty()) throw ConfigError("drive: --init encoder needs --dataset (textures come from its views)");
    textures = project_dataset_textures(*ds, model.encoder.config.resolution);
  } else if (a.init == "latents") {
    opts.mode = InitMode::Latents;
    if (a.latents.empty()) throw ConfigError("drive: --init latents needs --latents <file.gfem>");
    const auto seq = VectorSequence::load(a.latents);
    if (seq.frames.empty()) throw ConfigError("drive: latent file is empty");
    const auto anchors = model.rig.hierarchy.anchor_count();
    if (static_cast<std::int64_t>(seq.frames.front().size()) != anchors * kLatentDim) {
      throw ShapeError("drive: latent file rows must have " + std::to_string(anchors * kLatentDim) + " values");
    }
    opts.init_latents = Tensor::from({anchors, kLatentDim}, seq.frames.front());
  } else {
    throw ConfigError("drive: --init must be zeros, encoder or latents");
  }

  const DriveResult r = drive(model, predictor ? &*predictor : nullptr, poses, phis, cameras, opts, textures);
  const fs::path frames_dir = fs::path(o.out_dir) / "frames";
  fs::create_directories(frames_dir);
  VectorSequence latent_dump;
  latent_dump.dim = static_cast<std::uint32_t>(model.rig.hierarchy.anchor_count() * kLatentDim);
  json files = json::array();
  for (std::size_t t = 0; t < r.images.size(); ++t) {
    for (std::size_t v = 0; v < r.images[t].size(); ++v) {
      const std::string name = frame_file_name(static_cast<int>(t), static_cast<int>(v));
      write_png(frames_dir / name, r.images[t][v]);
      files.push_back("frames/" + name);
    }
    const auto lv = r.latents[t].values();
    latent_dump.frames.emplace_back(lv.begin(), lv.end());
  }
  latent_dump.save(fs::path(o.out_dir) / "latents.gfem");
  json manifest{{"frames", r.images.size()},
                {"views", cameras.size()},
                {"init", a.init},
                {"re_init_interval", a.reinit},
                {"predictor", !a.predictor.empty()},
                {"files", files}};
  write_text(fs::path(o.out_dir) / "manifest.json", manifest.dump(2));
  std::cout << "rendered " << r.images.size() << " frames x " << cameras.size() << " views\n";
  return 0;
}

/// Images named fFFFF_vV.png grouped by view, in frame order.
std::map<int, std::vector<fs::path>> list_frames(const fs::path& dir) {
  const fs::path root = fs::exists(dir / "frames") ? dir / "frames" : dir;
  if (!fs::is_directory(root)) throw ConfigError("eval: " + dir.string() + " is not a directory");
  static const std::regex pattern(R"(f(\d+)_v(\d+)\.png)");
  std::map<int, std::map<int, fs::path>> found;
  for (const auto& e : fs::directory_iterator(root)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, pattern)) found[std::stoi(m[2])][std::stoi(m[1])] = e.path();
  }
  std::map<int, std::vector<fs::path>> out;
  for (const auto& [view, frames] : found) {
    for (const auto& [frame, path] : frames) out[view].push_back(path);
  }
  return out;
}

int eval_cmd(const Options& o, const std::string& renders_dir, const std::string& gt_dir) {
  const auto renders = list_frames(renders_dir);
  const auto truth = list_frames(gt_dir);
  if (renders.empty()) throw ConfigError("eval: no fFFFF_vV.png images in " + renders_dir);
  json report;
  report["views"] = json::object();
  double psnr_sum = 0.0, ssim_sum = 0.0, flicker_sum = 0.0, gt_flicker_sum = 0.0;
  for (const auto& [view, paths] : renders) {
    const auto it = truth.find(view);
    if (it == truth.end()) throw ShapeError("eval: ground truth has no view " + std::to_string(view));
    std::vector<Image> a, b;
    for (const auto& p : paths) a.push_back(read_png(p));
    for (const auto& p : it->second) b.push_back(read_png(p));
    const EvalReport r = evaluate(a, b);
    report["views"][std::to_string(view)] = json::parse(r.to_json());
    psnr_sum += r.mean_psnr;
    ssim_sum += r.mean_ssim;
    flicker_sum += r.flicker;
    gt_flicker_sum += r.gt_flicker;
  }
  const double n = static_cast<double>(renders.size());
  report["mean_psnr"] = std::isfinite(psnr_sum) ? json(psnr_sum / n) : json("inf");
  report["mean_ssim"] = ssim_sum / n;
  report["flicker"] = flicker_sum / n;
  report["gt_flicker"] = gt_flicker_sum / n;
  fs::create_directories(o.out_dir);
  write_text(fs::path(o.out_dir) / "report.json", report.dump(2));
  std::cout << report.dump(2) << "\n";
  return 0;
}

int inspect_masks_cmd(const std::string& checkpoint, int anchor) {
  const AvatarRig rig = AvatarRig::load(Checkpoint::load(checkpoint));
  const Skeleton& sk = rig.skeleton();
  json out = json::array();
  for (std::size_t a = 0; a < rig.masks.anchor_count(); ++a) {
    if (anchor >= 0 && static_cast<std::size_t>(anchor) != a) continue;
    json groups = json::object();
    for (std::size_t g = 0; g < sk.groups().size(); ++g) {
      int active = 0;
      for (int p : sk.group_params(g)) active += rig.masks.theta[a][static_cast<std::size_t>(p)] ? 1 : 0;
      if (active > 0) groups[sk.groups()[g].name] = active;
    }
    int before = 0, after = 0;
    for (auto v : rig.masks.base[a]) before += v ? 1 : 0;
    for (auto v : rig.masks.theta[a]) after += v ? 1 : 0;
    out.push_back({{"anchor", a},
                   {"base_params", before},
                   {"dilated_params", after},
                   {"face", rig.masks.phi[a] != 0},
                   {"groups", groups}});
  }
  if (anchor >= 0 && out.empty()) throw ConfigError("inspect-masks: anchor " + std::to_string(anchor) + " does not exist");
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Drivable Gaussian avatar toolkit"};
  app.require_subcommand(1);
  Options o;

  auto* hier = app.add_subcommand("build-hierarchy", "sample anchors, control points and Gaussians; fit the pose prior");
  std::string dataset_dir;
  add_common(hier, o);
  hier->add_option("--dataset", dataset_dir, "capture directory")->required();

  auto* gen = app.add_subcommand("gen-synthetic", "render a procedural multi-view capture");
  SyntheticSpec spec;
  int size = 64;
  add_common(gen, o);
  gen->add_option("--frames", spec.frames)->capture_default_str();
  gen->add_option("--views", spec.views)->capture_default_str();
  gen->add_option("--size", size, "image width and height")->capture_default_str();
  gen->add_option("--ambiguity-pairs", spec.ambiguity_pairs)->capture_default_str();
  gen->add_option("--gt-gaussians", spec.gt_gaussians)->capture_default_str();

  auto* fit = app.add_subcommand("fit", "train the avatar on a capture");
  std::string resume;
  add_common(fit, o);
  fit->add_option("--dataset", dataset_dir, "capture directory")->required();
  fit->add_option("--resume", resume, "training checkpoint to continue from");

  auto* tp = app.add_subcommand("train-predictor", "train the appearance predictor on avatar latents");
  std::string avatar_path;
  PredictorTrainConfig pcfg;
  add_common(tp, o);
  tp->add_option("--dataset", dataset_dir, "capture directory")->required();
  tp->add_option("--avatar", avatar_path, "avatar checkpoint")->required();
  tp->add_option("--steps", pcfg.steps)->capture_default_str();
  tp->add_option("--batch", pcfg.batch)->capture_default_str();
  tp->add_option("--history", pcfg.model.history)->capture_default_str();
  tp->add_option("--unroll", pcfg.model.unroll)->capture_default_str();

  auto* dr = app.add_subcommand("drive", "render a pose sequence");
  DriveArgs da;
  add_common(dr, o);
  dr->add_option("--avatar", da.avatar, "avatar checkpoint")->required();
  dr->add_option("--predictor", da.predictor, "predictor checkpoint");
  dr->add_option("--dataset", da.dataset, "capture directory (poses, faces, cameras, textures)");
  dr->add_option("--poses", da.poses, "pose sequence (.gpsq)");
  dr->add_option("--faces", da.faces, "face embeddings (.gfem)");
  dr->add_option("--cameras", da.cameras, "cameras JSON");
  dr->add_option("--init", da.init, "zeros | encoder | latents")->capture_default_str();
  dr->add_option("--latents", da.latents, "initial latents (.gfem, first row)");
  dr->add_option("--re-init-interval", da.reinit, "re-encode every k frames in encoder mode (0: first frame only)")
      ->capture_default_str();

  auto* ev = app.add_subcommand("eval", "PSNR / SSIM / flicker of renders against ground truth");
  std::string renders_dir, gt_dir;
  add_common(ev, o);
  ev->add_option("--renders", renders_dir)->required();
  ev->add_option("--ground-truth", gt_dir)->required();

  auto* im = app.add_subcommand("inspect-masks", "print per-anchor localization masks");
  std::string ckpt;
  int anchor = -1;
  add_common(im, o);
  im->add_option("--checkpoint", ckpt, "rig or avatar checkpoint")->required();
  im->add_option("--anchor", anchor, "single anchor index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*hier) return build_hierarchy_cmd(o, dataset_dir);
    if (*gen) {
      spec.width = spec.height = size;
      spec.focal = 101.0 * size / 64.0;
      return gen_synthetic_cmd(o, spec);
    }
    if (*fit) return fit_cmd(o, dataset_dir, resume);
    if (*tp) return train_predictor_cmd(o, dataset_dir, avatar_path, pcfg);
    if (*dr) return drive_cmd(o, da);
    if (*ev) return eval_cmd(o, renders_dir, gt_dir);
    if (*im) return inspect_masks_cmd(ckpt, anchor);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
