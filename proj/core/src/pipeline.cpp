#include "gavatar/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gavatar/error.hpp"
#include "gavatar/metrics.hpp"
#include "gavatar/ops.hpp"

namespace gavatar {

using namespace ops;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  const double d = parse_double(key, v);
  if (d != std::floor(d)) throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  return static_cast<std::int64_t>(d);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
Field number_field(T TrainConfig::*member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) {
            if constexpr (std::is_floating_point_v<T>) {
              c.*member = parse_double(k, v);
            } else {
              c.*member = static_cast<T>(parse_int(k, v));
            }
          },
          [member](const TrainConfig& c) { return fmt(static_cast<double>(c.*member)); }};
}

Field weight_field(double LossWeights::*member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) { c.weights.*member = parse_double(k, v); },
          [member](const TrainConfig& c) { return fmt(c.weights.*member); }};
}

Field lr_field(double LearningRates::*member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) { c.lr.*member = parse_double(k, v); },
          [member](const TrainConfig& c) { return fmt(c.lr.*member); }};
}

Field count_field(std::int64_t HierarchyCounts::*member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) { c.counts.*member = parse_int(k, v); },
          [member](const TrainConfig& c) { return std::to_string(c.counts.*member); }};
}

Field bool_field(bool TrainConfig::*member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) { c.*member = parse_bool(k, v); },
          [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

const std::map<std::string, Field>& config_fields() {
  static const std::map<std::string, Field> fields = {
      {"lambda_l1", weight_field(&LossWeights::l1)},
      {"lambda_perceptual", weight_field(&LossWeights::perceptual)},
      {"lambda_opac", weight_field(&LossWeights::opacity)},
      {"lambda_scale", weight_field(&LossWeights::scale)},
      {"lambda_cpt", weight_field(&LossWeights::control)},
      {"lambda_kl", weight_field(&LossWeights::kl)},
      {"lr_scale_bias", lr_field(&LearningRates::scale_bias)},
      {"lr_scale_basis", lr_field(&LearningRates::scale_basis)},
      {"lr_rotation_bias", lr_field(&LearningRates::rotation_bias)},
      {"lr_rotation_basis", lr_field(&LearningRates::rotation_basis)},
      {"lr_opacity_bias", lr_field(&LearningRates::opacity_bias)},
      {"lr_sh0_bias", lr_field(&LearningRates::sh0_bias)},
      {"lr_sh0_basis", lr_field(&LearningRates::sh0_basis)},
      {"lr_shn_bias", lr_field(&LearningRates::shn_bias)},
      {"lr_shn_basis", lr_field(&LearningRates::shn_basis)},
      {"lr_control_bias", lr_field(&LearningRates::control_bias)},
      {"lr_control_basis", lr_field(&LearningRates::control_basis)},
      {"lr_position", lr_field(&LearningRates::position)},
      {"lr_mlp", lr_field(&LearningRates::mlp)},
      {"lr_encoder", lr_field(&LearningRates::encoder)},
      {"iterations", number_field(&TrainConfig::iterations)},
      {"batch_views", number_field(&TrainConfig::batch_views)},
      {"seed", number_field(&TrainConfig::seed)},
      {"corrective_start", number_field(&TrainConfig::corrective_start)},
      {"sh_degree_fraction", number_field(&TrainConfig::sh_degree_fraction)},
      {"anchors", count_field(&HierarchyCounts::anchors)},
      {"control_points", count_field(&HierarchyCounts::control_points)},
      {"gaussians", count_field(&HierarchyCounts::gaussians)},
      {"texture_resolution", number_field(&TrainConfig::texture_resolution)},
      {"mask_dilation", number_field(&TrainConfig::mask_dilation)},
      {"zero_latents", bool_field(&TrainConfig::zero_latents)},
      {"latent_noise", bool_field(&TrainConfig::latent_noise)},
      {"checkpoint_every", number_field(&TrainConfig::checkpoint_every)},
      {"divergence_factor", number_field(&TrainConfig::divergence_factor)},
      {"divergence_patience", number_field(&TrainConfig::divergence_patience)},
      {"frames",
       {[](TrainConfig& c, const std::string& k, const std::string& v) {
          c.frames.clear();
          std::stringstream ss(v);
          std::string item;
          while (std::getline(ss, item, ',')) {
            if (!trim(item).empty()) c.frames.push_back(static_cast<int>(parse_int(k, trim(item))));
          }
        },
        [](const TrainConfig& c) {
          std::string out;
          for (std::size_t i = 0; i < c.frames.size(); ++i) out += (i ? "," : "") + std::to_string(c.frames[i]);
          return out;
        }}},
  };
  return fields;
}

Tensor image_tensor(const Image& img) {
  return Tensor::from({img.height, img.width, img.channels}, img.data);
}

Image image_from_render(const RenderResult& r) {
  Image img = Image::zeros(r.width, r.height, 3);
  img.data = r.rgb;
  return img;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

void require_finite(double v, const char* term, const LossBreakdown& b) {
  if (!std::isfinite(v)) {
    throw NumericalError(std::string("total_loss: non-finite ") + term + " term (" + b.describe() + ")");
  }
}

EncoderConfig encoder_config(int resolution) {
  EncoderConfig c;
  c.resolution = resolution;
  return c;
}

std::vector<ParamGroup> avatar_param_groups(const AvatarModel& m, const LearningRates& lr) {
  const auto& d = m.decoder;
  std::vector<ParamGroup> g = {
      {"rotation_bias", {d.rotation_bias}, lr.rotation_bias, false},
      {"rotation_basis", {d.rotation_basis}, lr.rotation_basis, false},
      {"scale_bias", {d.scale_bias}, lr.scale_bias, false},
      {"scale_basis", {d.scale_basis}, lr.scale_basis, false},
      {"opacity_bias", {d.opacity_bias}, lr.opacity_bias, false},
      {"sh0_bias", {d.sh0_bias}, lr.sh0_bias, false},
      {"sh0_basis", {d.sh0_basis}, lr.sh0_basis, false},
      {"shn_bias", {d.shn_bias}, lr.shn_bias, false},
      {"shn_basis", {d.shn_basis}, lr.shn_basis, false},
      {"control_bias", {d.control_bias}, lr.control_bias, false},
      {"control_basis", {d.control_basis}, lr.control_basis, false},
      {"position", {d.offset}, lr.position, false},
      {"mlp", d.mlp_parameters(), lr.mlp, true},
  };
  if (!m.zero_latents) g.push_back({"encoder", m.encoder.parameters(), lr.encoder, true});
  return g;
}

std::vector<int> training_frames(const TrainConfig& config, const CaptureDataset& dataset) {
  std::vector<int> frames = config.frames;
  if (frames.empty()) {
    frames.resize(dataset.frames.size());
    std::iota(frames.begin(), frames.end(), 0);
  }
  for (int f : frames) {
    if (f < 0 || f >= static_cast<int>(dataset.frames.size())) {
      throw ConfigError("train: frame " + std::to_string(f) + " is outside the dataset");
    }
  }
  return frames;
}

void save_rows(Checkpoint& ck, const std::string& name, const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  const auto width = rows.empty() ? 0 : static_cast<std::int64_t>(rows.front().size());
  ck.put(name, {static_cast<std::int64_t>(rows.size()), width}, std::move(flat));
}

std::vector<std::vector<double>> load_rows(const Checkpoint& ck, const std::string& name) {
  const auto& st = ck.get(name);
  std::vector<std::vector<double>> rows;
  const auto n = static_cast<std::size_t>(st.shape.at(0));
  const auto w = static_cast<std::size_t>(st.shape.at(1));
  for (std::size_t i = 0; i < n; ++i) {
    rows.emplace_back(st.values.begin() + static_cast<std::ptrdiff_t>(i * w),
                      st.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
  }
  return rows;
}

}  // namespace

void TrainConfig::validate() const {
  const LossWeights& w = weights;
  for (double v : {w.l1, w.perceptual, w.opacity, w.scale, w.control, w.kl}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("config: loss weights must be finite and >= 0");
  }
  for (double v : {lr.scale_bias, lr.scale_basis, lr.rotation_bias, lr.rotation_basis, lr.opacity_bias,
                   lr.sh0_bias, lr.sh0_basis, lr.shn_bias, lr.shn_basis, lr.control_bias, lr.control_basis,
                   lr.position, lr.mlp, lr.encoder}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("config: learning rates must be finite and >= 0");
  }
  if (!(sh_degree_fraction >= 0.0 && sh_degree_fraction <= 1.0)) {
    throw ConfigError("config: sh_degree_fraction must lie in [0, 1]");
  }
  if (iterations < 0 || batch_views < 1 || corrective_start < 0 || mask_dilation < 0 || checkpoint_every < 0 ||
      divergence_patience < 1 || !(divergence_factor > 1.0)) {
    throw ConfigError("config: iterations, batch_views, corrective_start, mask_dilation, checkpoint_every and "
                      "divergence settings are out of range");
  }
  if (counts.anchors < 3 || counts.control_points < 6 || counts.gaussians < 3) {
    throw ConfigError("config: hierarchy needs >= 3 anchors, >= 6 control points and >= 3 Gaussians");
  }
  const EncoderConfig enc = encoder_config(texture_resolution);
  int r = texture_resolution;
  while (r > enc.output_side && r % 2 == 0) r /= 2;
  if (r != enc.output_side) {
    throw ConfigError("config: texture_resolution must be " + std::to_string(enc.output_side) +
                      " times a power of two");
  }
}

TrainConfig parse_train_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& fields = config_fields();
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("config line " + std::to_string(number) + ": unknown key '" + key + "'");
    it->second.set(base, key, value);
  }
  base.validate();
  return base;
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_train_config(ss.str(), std::move(base));
}

std::string format_train_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [key, field] : config_fields()) out += key + " = " + field.get(config) + "\n";
  return out;
}

std::string LossBreakdown::describe() const {
  std::ostringstream os;
  os << "l1 " << l1 << ", perceptual " << perceptual << ", opac " << opacity << ", scale " << scale << ", cpt "
     << control << ", kl " << kl;
  return os.str();
}

Image dilate_mask(const Image& mask, int radius) {
  Image out = Image::zeros(mask.width, mask.height, 1);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(x, y, 0) <= 0.5) continue;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          const int xx = x + dx;
          const int yy = y + dy;
          if (xx >= 0 && yy >= 0 && xx < mask.width && yy < mask.height) out.at(xx, yy, 0) = 1.0;
        }
      }
    }
  }
  return out;
}

Tensor photometric_l1(const Tensor& render, const Image& target, const Image& mask) {
  if (render.rank() != 3 || render.dim(0) != target.height || render.dim(1) != target.width ||
      render.dim(2) != 3 || mask.width != target.width || mask.height != target.height) {
    throw ShapeError("photometric_l1: render " + shape_str(render.shape()) + " does not match the target");
  }
  const double count = std::accumulate(mask.data.begin(), mask.data.end(), 0.0, [](double acc, double v) {
    return acc + (v > 0.5 ? 1.0 : 0.0);
  });
  if (count == 0.0) return Tensor::scalar(0.0);
  Image binary = mask;
  for (auto& v : binary.data) v = v > 0.5 ? 1.0 : 0.0;
  const Tensor diff = mul(abs(sub(render, image_tensor(target))), image_tensor(binary));
  return mul_scalar(sum(diff), 1.0 / (3.0 * count));
}

Tensor perceptual_surrogate(const Tensor& render, const Image& target, const Image& mask) {
  Image binary = mask;
  for (auto& v : binary.data) v = v > 0.5 ? 1.0 : 0.0;
  const Tensor m = image_tensor(binary);
  const Tensor a = avg_pool_hwc(mul(render, m), 4);
  const Tensor b = avg_pool_hwc(mul(image_tensor(target), m), 4);
  return mean(abs(sub(a, b)));
}

Tensor opacity_loss(const Tensor& opacities, std::span<const std::uint8_t> inside) {
  if (static_cast<std::int64_t>(inside.size()) != opacities.dim(0)) {
    throw ShapeError("opacity_loss: selection size does not match the Gaussian count");
  }
  std::vector<std::int64_t> idx;
  for (std::size_t i = 0; i < inside.size(); ++i) {
    if (inside[i]) idx.push_back(static_cast<std::int64_t>(i));
  }
  if (idx.empty()) return Tensor::scalar(0.0);
  return mean(neg(log(add_scalar(index_select(opacities, idx), 1e-6))));
}

Tensor scale_loss(const Tensor& scales) { return mean(relu(add_scalar(scales, -0.1))); }

Tensor control_smoothness(const Tensor& control_offsets, std::span<const std::array<int, 5>> neighbors) {
  if (static_cast<std::int64_t>(neighbors.size()) != control_offsets.dim(0)) {
    throw ShapeError("control_smoothness: neighbor table does not match the control points");
  }
  std::vector<std::int64_t> self;
  std::vector<std::int64_t> other;
  for (std::size_t c = 0; c < neighbors.size(); ++c) {
    for (int n : neighbors[c]) {
      self.push_back(static_cast<std::int64_t>(c));
      other.push_back(n);
    }
  }
  return mean(square(sub(index_select(control_offsets, self), index_select(control_offsets, other))));
}

std::vector<std::uint8_t> gaussians_inside(const Tensor& means, std::span<const ViewTarget> views) {
  const auto n = static_cast<std::size_t>(means.dim(0));
  const auto m = means.values();
  std::vector<std::uint8_t> inside(n, 0);
  for (const auto& view : views) {
    const Camera& cam = *view.camera;
    for (std::size_t i = 0; i < n; ++i) {
      if (inside[i]) continue;
      const Vec3 p = cam.world_to_camera.apply(Vec3(m[3 * i], m[3 * i + 1], m[3 * i + 2]));
      if (p.z() <= kNearPlane) continue;
      const auto x = static_cast<int>(std::lround(cam.fx * p.x() / p.z() + cam.cx));
      const auto y = static_cast<int>(std::lround(cam.fy * p.y() / p.z() + cam.cy));
      if (x >= 0 && y >= 0 && x < view.eroded->width && y < view.eroded->height && view.eroded->at(x, y, 0) > 0.5) {
        inside[i] = 1;
      }
    }
  }
  return inside;
}

LossBreakdown total_loss(std::span<const Tensor> renders, std::span<const ViewTarget> views,
                         const DecodedFrame& frame, const Hierarchy& hierarchy, const Tensor& mu,
                         const Tensor& logvar, const LossWeights& weights) {
  if (renders.size() != views.size() || renders.empty()) {
    throw ShapeError("total_loss: need one render per view and at least one view");
  }
  LossBreakdown b;
  Tensor l1 = Tensor::scalar(0.0);
  Tensor perceptual = Tensor::scalar(0.0);
  const double inv_views = 1.0 / static_cast<double>(views.size());
  for (std::size_t v = 0; v < views.size(); ++v) {
    l1 = add(l1, mul_scalar(photometric_l1(renders[v], *views[v].image, *views[v].mask), inv_views));
    perceptual =
        add(perceptual, mul_scalar(perceptual_surrogate(renders[v], *views[v].image, *views[v].mask), inv_views));
  }
  const Tensor opac = opacity_loss(frame.opacities, gaussians_inside(frame.means, views));
  const Tensor scale = scale_loss(frame.scales);
  const Tensor cpt = control_smoothness(frame.control_offsets, hierarchy.control_neighbors);
  const Tensor kl = mu.defined() ? kl_loss(mu, logvar) : Tensor::scalar(0.0);
  b.l1 = l1.item();
  b.perceptual = perceptual.item();
  b.opacity = opac.item();
  b.scale = scale.item();
  b.control = cpt.item();
  b.kl = kl.item();
  require_finite(b.l1, "l1", b);
  require_finite(b.perceptual, "perceptual", b);
  require_finite(b.opacity, "opacity", b);
  require_finite(b.scale, "scale", b);
  require_finite(b.control, "control-point", b);
  require_finite(b.kl, "KL", b);
  b.total = add(add(add(mul_scalar(l1, weights.l1), mul_scalar(perceptual, weights.perceptual)),
                    add(mul_scalar(opac, weights.opacity), mul_scalar(scale, weights.scale))),
                add(mul_scalar(cpt, weights.control), mul_scalar(kl, weights.kl)));
  return b;
}

void AvatarModel::save(Checkpoint& ck) const {
  rig.save(ck);
  decoder.save(ck);
  encoder.save(ck);
  if (latent_prior.fitted()) latent_prior.save(ck);
  if (!frame_latents.empty()) save_rows(ck, "model/frame_latents", frame_latents);
  ck.put_scalar("model/sh_degree", sh_degree);
  ck.put_scalar("model/zero_latents", zero_latents ? 1.0 : 0.0);
}

AvatarModel AvatarModel::load(const Checkpoint& ck) {
  AvatarModel m;
  m.rig = AvatarRig::load(ck);
  m.decoder = AvatarDecoder::load(ck);
  m.encoder = Encoder::load(ck);
  if (ck.has("loc/latent/anchors")) m.latent_prior = LatentPrior::load(ck);
  if (ck.has("model/frame_latents")) m.frame_latents = load_rows(ck, "model/frame_latents");
  m.sh_degree = static_cast<int>(ck.scalar("model/sh_degree"));
  m.zero_latents = ck.scalar("model/zero_latents") != 0.0;
  return m;
}

void TrainState::save(Checkpoint& ck) const {
  model.save(ck);
  ck.put_text("train/config", format_train_config(config));
  ck.put_scalar("train/iteration", iteration);
  ck.put_scalar("train/initial_loss", initial_loss);
  ck.put_scalar("train/above_threshold", above_threshold);
  ck.put_scalar("train/optimizer_steps", static_cast<double>(optimizer_steps));
  ck.put_scalar("train/moment_count", static_cast<double>(first_moments.size()));
  for (std::size_t i = 0; i < first_moments.size(); ++i) {
    const auto n = static_cast<std::int64_t>(first_moments[i].size());
    ck.put("train/m/" + std::to_string(i), {n}, first_moments[i]);
    ck.put("train/v/" + std::to_string(i), {n}, second_moments[i]);
  }
}

TrainState TrainState::load(const Checkpoint& ck) {
  TrainState s;
  s.model = AvatarModel::load(ck);
  s.config = parse_train_config(ck.text("train/config"));
  s.iteration = static_cast<int>(ck.scalar("train/iteration"));
  s.initial_loss = ck.scalar("train/initial_loss");
  s.above_threshold = static_cast<int>(ck.scalar("train/above_threshold"));
  s.optimizer_steps = static_cast<std::int64_t>(ck.scalar("train/optimizer_steps"));
  const auto count = static_cast<std::size_t>(ck.scalar("train/moment_count"));
  for (std::size_t i = 0; i < count; ++i) {
    s.first_moments.push_back(ck.get("train/m/" + std::to_string(i)).values);
    s.second_moments.push_back(ck.get("train/v/" + std::to_string(i)).values);
  }
  return s;
}

std::vector<UvTexture> project_dataset_textures(const CaptureDataset& dataset, int resolution) {
  const UvAtlasMap map = build_uv_map(dataset.mesh, resolution);
  std::vector<UvTexture> out;
  for (const auto& frame : dataset.frames) {
    std::vector<TextureView> views;
    for (std::size_t v = 0; v < dataset.cameras.size(); ++v) {
      views.push_back({&dataset.cameras[v], &frame.images[v], &frame.eroded[v]});
    }
    out.push_back(project_uv_texture(dataset.mesh, map, frame.pose, views));
  }
  return out;
}

Tensor encoder_latents(const AvatarModel& model, const UvTexture& texture) {
  const auto [mu, logvar] = encode(model.encoder, texture.to_tensor());
  return anchor_latents(mu, model.rig.hierarchy.anchors.uv);
}

TrainState init_training(const CaptureDataset& dataset, const TrainConfig& config) {
  config.validate();
  if (dataset.frames.empty() || dataset.cameras.empty()) throw ConfigError("train: dataset has no frames or views");
  TrainState s;
  s.config = config;
  const auto thetas = dataset.thetas();
  s.model.rig = build_rig(dataset.mesh, config.counts, thetas, dataset.face_dim, config.seed);
  s.model.decoder = AvatarDecoder::init(s.model.rig, {}, mix_seed(config.seed, 1, 0));
  s.model.encoder = Encoder::init(encoder_config(config.texture_resolution), mix_seed(config.seed, 2, 0));
  s.model.zero_latents = config.zero_latents;
  return s;
}

void run_training(TrainState& state, const CaptureDataset& dataset, const std::vector<UvTexture>& textures,
                  const TrainHooks& hooks) {
  const TrainConfig& cfg = state.config;
  AvatarModel& model = state.model;
  const std::vector<int> frames = training_frames(cfg, dataset);
  if (!cfg.zero_latents && textures.size() != dataset.frames.size()) {
    throw ConfigError("train: one UV texture per dataset frame is required");
  }
  const std::size_t view_count = dataset.cameras.size();
  std::vector<std::vector<Image>> masks(dataset.frames.size());
  for (int f : frames) {
    auto& m = masks[static_cast<std::size_t>(f)];
    if (!m.empty()) continue;
    for (const auto& mask : dataset.frames[static_cast<std::size_t>(f)].masks) {
      m.push_back(dilate_mask(mask, cfg.mask_dilation));
    }
  }
  AdamW optimizer(avatar_param_groups(model, cfg.lr));
  if (!state.first_moments.empty()) {
    if (state.first_moments.size() != optimizer.first_moments().size()) {
      throw ConfigError("train: optimizer state does not match the model");
    }
    optimizer.first_moments() = state.first_moments;
    optimizer.second_moments() = state.second_moments;
    optimizer.set_step_count(state.optimizer_steps);
  }
  const int sh_switch = static_cast<int>(std::floor(cfg.sh_degree_fraction * cfg.iterations));
  const int end = hooks.stop_after >= 0 ? std::min(cfg.iterations, state.iteration + hooks.stop_after) : cfg.iterations;
  const auto& anchor_uvs = model.rig.hierarchy.anchors.uv;
  const std::int64_t anchors = model.rig.hierarchy.anchor_count();

  while (state.iteration < end) {
    const int it = state.iteration;
    std::mt19937_64 rng(mix_seed(cfg.seed, 3, static_cast<std::uint64_t>(it)));
    const int f = frames[static_cast<std::size_t>(rng() % frames.size())];
    const CaptureFrame& frame = dataset.frames[static_cast<std::size_t>(f)];
    std::vector<std::size_t> view_ids(view_count);
    std::iota(view_ids.begin(), view_ids.end(), 0);
    if (static_cast<std::size_t>(cfg.batch_views) < view_count) {
      std::shuffle(view_ids.begin(), view_ids.end(), rng);
      view_ids.resize(static_cast<std::size_t>(cfg.batch_views));
      std::sort(view_ids.begin(), view_ids.end());
    }
    const bool correctives = it >= cfg.corrective_start;
    const int sh_degree = it >= sh_switch ? 1 : 0;

    optimizer.zero_grad();
    Tensor mu, logvar;
    Tensor latents = Tensor::zeros({anchors, kLatentDim});
    if (correctives && !cfg.zero_latents) {
      std::tie(mu, logvar) = encode(model.encoder, textures[static_cast<std::size_t>(f)].to_tensor());
      const Tensor noise = cfg.latent_noise ? Tensor::randn(mu.shape(), rng) : Tensor();
      latents = anchor_latents(sample_latent(mu, logvar, noise), anchor_uvs);
    }
    const DecodedFrame decoded =
        pose_frame(model.rig, model.decoder, frame.pose, frame.phi, latents, {.correctives = correctives});
    std::vector<Tensor> renders;
    std::vector<ViewTarget> targets;
    for (std::size_t v : view_ids) {
      const Camera& cam = dataset.cameras[v];
      const Tensor rgb = sh_to_rgb(decoded.sh, decoded.means, cam.center(), sh_degree);
      renders.push_back(render_differentiable(decoded.means, decoded.rotations, decoded.scales, decoded.opacities,
                                              rgb, cam));
      targets.push_back({&cam, &frame.images[v], &masks[static_cast<std::size_t>(f)][v], &frame.eroded[v]});
    }
    const LossBreakdown loss = total_loss(renders, targets, decoded, model.rig.hierarchy, mu, logvar, cfg.weights);
    const double value = loss.total.item();
    if (!std::isfinite(value)) {
      throw NumericalError("train: non-finite loss at iteration " + std::to_string(it) + " (" + loss.describe() + ")");
    }
    if (it == 0) state.initial_loss = value;
    state.above_threshold = value > cfg.divergence_factor * state.initial_loss ? state.above_threshold + 1 : 0;
    if (state.above_threshold >= cfg.divergence_patience) {
      throw NumericalError("train: diverged at iteration " + std::to_string(it) + ": loss " + fmt(value) +
                           " stayed above " + fmt(cfg.divergence_factor) + " x the initial " +
                           fmt(state.initial_loss) + " for " + std::to_string(cfg.divergence_patience) +
                           " steps (" + loss.describe() + ")");
    }
    backward(loss.total);
    optimizer.step();
    model.sh_degree = sh_degree;
    state.iteration = it + 1;
    state.first_moments = optimizer.first_moments();
    state.second_moments = optimizer.second_moments();
    state.optimizer_steps = optimizer.step_count();
    if (hooks.on_step) hooks.on_step({it, loss});
    if (cfg.checkpoint_every > 0 && !hooks.checkpoint_dir.empty() && state.iteration % cfg.checkpoint_every == 0) {
      Checkpoint ck;
      state.save(ck);
      std::filesystem::create_directories(hooks.checkpoint_dir);
      ck.save(hooks.checkpoint_dir / "latest.gavt");
    }
  }
}

void finalize_training(TrainState& state, const CaptureDataset& dataset, const std::vector<UvTexture>& textures) {
  AvatarModel& model = state.model;
  model.sh_degree = state.config.iterations > 0 && state.iteration >= static_cast<int>(std::floor(
                        state.config.sh_degree_fraction * state.config.iterations)) ? 1 : model.sh_degree;
  model.frame_latents.clear();
  if (model.zero_latents) return;
  NoGradGuard no_grad;
  for (std::size_t f = 0; f < dataset.frames.size(); ++f) {
    const Tensor l = encoder_latents(model, textures.at(f));
    model.frame_latents.emplace_back(l.values().begin(), l.values().end());
  }
  model.latent_prior =
      LatentPrior::fit(model.frame_latents, model.rig.hierarchy.anchor_count(), kLatentDim);
}

AvatarModel train_avatar(const CaptureDataset& dataset, const TrainConfig& config, const TrainHooks& hooks) {
  TrainState state = init_training(dataset, config);
  const std::vector<UvTexture> textures =
      config.zero_latents ? std::vector<UvTexture>{} : project_dataset_textures(dataset, config.texture_resolution);
  run_training(state, dataset, textures, hooks);
  finalize_training(state, dataset, textures);
  return std::move(state.model);
}

DecodedFrame decode_frame(const AvatarModel& model, const Pose& pose, std::span<const double> phi,
                          const Tensor& latents) {
  return pose_frame(model.rig, model.decoder, pose, phi, latents);
}

Image render_view(const AvatarModel& model, const DecodedFrame& frame, const Camera& camera) {
  return image_from_render(render(to_gaussian_frame(frame, model.sh_degree), camera));
}

double frame_photometric_l1(const AvatarModel& model, const CaptureDataset& dataset, int frame,
                            const UvTexture& texture, int mask_dilation) {
  NoGradGuard no_grad;
  const CaptureFrame& fr = dataset.frames.at(static_cast<std::size_t>(frame));
  const Tensor latents = model.zero_latents ? Tensor::zeros({model.rig.hierarchy.anchor_count(), kLatentDim})
                                            : encoder_latents(model, texture);
  const DecodedFrame decoded = decode_frame(model, fr.pose, fr.phi, latents);
  double total = 0.0;
  for (std::size_t v = 0; v < dataset.cameras.size(); ++v) {
    const Image img = render_view(model, decoded, dataset.cameras[v]);
    total += photometric_l1(image_tensor(img), fr.images[v], dilate_mask(fr.masks[v], mask_dilation)).item();
  }
  return total / static_cast<double>(dataset.cameras.size());
}

LatentSequence training_sequence(const AvatarModel& model, const CaptureDataset& dataset) {
  if (model.frame_latents.size() != dataset.frames.size()) {
    throw ConfigError("training_sequence: the avatar stores latents for " + std::to_string(model.frame_latents.size()) +
                      " frames but the dataset has " + std::to_string(dataset.frames.size()));
  }
  LatentSequence seq;
  for (const auto& f : dataset.frames) seq.poses.push_back(f.pose);
  seq.latents = model.frame_latents;
  return seq;
}

PredictorTrainResult train_predictor(std::span<const LatentSequence> data, const LatentPrior& prior,
                                     const Skeleton& skeleton, const PredictorTrainConfig& config) {
  if (!prior.fitted()) throw ConfigError("train_predictor: the avatar has no fitted latent prior");
  if (data.empty()) throw ConfigError("train_predictor: no training sequences");
  if (config.steps < 0 || config.batch < 1) throw ConfigError("train_predictor: steps must be >= 0 and batch >= 1");
  const std::size_t unroll = static_cast<std::size_t>(std::max(1, config.model.unroll));
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t s = 0; s < data.size(); ++s) {
    if (data[s].poses.size() >= unroll + 1) ranges.emplace_back(s, data[s].poses.size() - unroll);
  }
  if (ranges.empty()) throw ConfigError("train_predictor: every sequence is shorter than unroll + 1 frames");
  PredictorTrainResult result{Predictor::init(skeleton, prior.anchor_count(), prior.latent_dim(), config.model,
                                              mix_seed(config.seed, 4, 0)),
                              {}};
  AdamW optimizer = make_predictor_optimizer(result.predictor);
  std::mt19937_64 rng(mix_seed(config.seed, 5, 0));
  for (int step = 0; step < config.steps; ++step) {
    std::vector<TrainSample> batch;
    for (int b = 0; b < config.batch; ++b) {
      const auto& [seq, last] = ranges[static_cast<std::size_t>(rng() % ranges.size())];
      batch.push_back({seq, 1 + static_cast<std::size_t>(rng() % last)});
    }
    result.losses.push_back(predictor_train_step(result.predictor, optimizer, data, batch, prior, skeleton).loss);
  }
  return result;
}

DriveResult drive(const AvatarModel& model, const Predictor* predictor, std::span<const Pose> poses,
                  std::span<const std::vector<double>> phis, std::span<const Camera> cameras,
                  const DriveOptions& options, std::span<const UvTexture> textures) {
  const Skeleton& skeleton = model.rig.skeleton();
  const auto params = static_cast<std::size_t>(skeleton.param_count());
  if (phis.size() != poses.size()) throw ShapeError("drive: one face embedding per pose is required");
  for (std::size_t t = 0; t < poses.size(); ++t) {
    if (poses[t].theta.size() != params) {
      throw ShapeError("drive: pose " + std::to_string(t) + " has " + std::to_string(poses[t].theta.size()) +
                       " parameters, the avatar expects " + std::to_string(params));
    }
    if (phis[t].size() != static_cast<std::size_t>(model.rig.face_dim)) {
      throw ShapeError("drive: face embedding " + std::to_string(t) + " has the wrong dimension");
    }
  }
  if (options.reinit_interval < 0) throw ConfigError("drive: re-init interval must be >= 0");
  if (options.mode == InitMode::Encoder && textures.size() != poses.size()) {
    throw ConfigError("drive: encoder mode needs one texture per frame");
  }
  const std::int64_t anchors = model.rig.hierarchy.anchor_count();
  Tensor prev = Tensor::zeros({anchors, kLatentDim});
  if (options.mode == InitMode::Latents) {
    if (!options.init_latents.defined() || options.init_latents.rank() != 2 || options.init_latents.dim(0) != anchors ||
        options.init_latents.dim(1) != kLatentDim) {
      throw ShapeError("drive: initial latents must be [" + std::to_string(anchors) + ", 16]");
    }
    prev = options.init_latents.detach();
  }
  if (predictor && !model.zero_latents && !model.latent_prior.fitted()) {
    throw ConfigError("drive: the avatar has no fitted latent prior");
  }
  NoGradGuard no_grad;
  DriveResult out;
  for (std::size_t t = 0; t < poses.size(); ++t) {
    const bool reinit = options.mode == InitMode::Encoder &&
                        (t == 0 || (options.reinit_interval > 0 && t % static_cast<std::size_t>(options.reinit_interval) == 0));
    Tensor latents;
    if (model.zero_latents) {
      latents = Tensor::zeros({anchors, kLatentDim});
    } else if (reinit) {
      latents = encoder_latents(model, textures[t]);
    } else if (predictor) {
      const auto window = normalize_window(history_window(poses, t, predictor->config.history, skeleton));
      latents = predict(*predictor, window, prev, model.latent_prior);
    } else {
      latents = Tensor::zeros({anchors, kLatentDim});
    }
    prev = latents;
    const DecodedFrame decoded = decode_frame(model, poses[t], phis[t], latents);
    std::vector<Image> views;
    for (const auto& cam : cameras) views.push_back(render_view(model, decoded, cam));
    out.latents.push_back(latents);
    out.images.push_back(std::move(views));
  }
  return out;
}

double flicker_statistic(std::span<const Image> frames) {
  if (frames.size() < 2) return 0.0;
  double total = 0.0;
  for (std::size_t t = 1; t < frames.size(); ++t) {
    const Image& a = frames[t - 1];
    const Image& b = frames[t];
    if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
      throw ShapeError("flicker_statistic: frames differ in size");
    }
    total += mean_l1({a.data, a.width, a.height, a.channels}, {b.data, b.width, b.height, b.channels});
  }
  return total / static_cast<double>(frames.size() - 1);
}

EvalReport evaluate(std::span<const Image> renders, std::span<const Image> ground_truth) {
  if (renders.size() != ground_truth.size() || renders.empty()) {
    throw ShapeError("evaluate: render and ground-truth lists must be non-empty and aligned (" +
                     std::to_string(renders.size()) + " vs " + std::to_string(ground_truth.size()) + ")");
  }
  EvalReport r;
  for (std::size_t i = 0; i < renders.size(); ++i) {
    const Image& a = renders[i];
    const Image& b = ground_truth[i];
    if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
      throw ShapeError("evaluate: frame " + std::to_string(i) + " differs in size from its ground truth");
    }
    const ImageView va{a.data, a.width, a.height, a.channels};
    const ImageView vb{b.data, b.width, b.height, b.channels};
    r.psnr.push_back(psnr(va, vb));
    r.ssim.push_back(ssim(va, vb));
  }
  const double n = static_cast<double>(renders.size());
  r.mean_psnr = std::accumulate(r.psnr.begin(), r.psnr.end(), 0.0) / n;
  r.mean_ssim = std::accumulate(r.ssim.begin(), r.ssim.end(), 0.0) / n;
  r.flicker = flicker_statistic(renders);
  r.gt_flicker = flicker_statistic(ground_truth);
  return r;
}

std::string EvalReport::to_json() const {
  const auto finite = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json("inf"); };
  nlohmann::json j;
  j["frames"] = psnr.size();
  j["psnr"] = nlohmann::json::array();
  for (double v : psnr) j["psnr"].push_back(finite(v));
  j["ssim"] = ssim;
  j["mean_psnr"] = finite(mean_psnr);
  j["mean_ssim"] = mean_ssim;
  j["flicker"] = flicker;
  j["gt_flicker"] = gt_flicker;
  return j.dump(2);
}

}  // namespace gavatar
