#include "gavatar/predictor.hpp"

#include <cmath>
#include <random>

#include "gavatar/error.hpp"
#include "gavatar/geometry.hpp"
#include "gavatar/ops.hpp"

namespace gavatar {

using namespace ops;

std::vector<Pose> normalize_window(std::span<const Pose> window) {
  std::vector<Pose> out(window.begin(), window.end());
  if (out.empty()) return out;
  const RigidTransform inv = window.back().global.inverse();
  for (auto& p : out) p.global = inv * p.global;
  out.back().global = RigidTransform::identity();
  return out;
}

std::vector<std::vector<double>> motion_features(std::span<const std::vector<double>> values) {
  std::vector<std::vector<double>> rows;
  if (values.empty()) return rows;
  const std::size_t d = values.front().size();
  std::vector<double> prev_vel(d, 0.0);
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (values[k].size() != d) throw ShapeError("motion_features: rows differ in length");
    std::vector<double> row(3 * d);
    for (std::size_t i = 0; i < d; ++i) {
      const double vel = k == 0 ? 0.0 : values[k][i] - values[k - 1][i];
      row[i] = values[k][i];
      row[d + i] = vel;
      row[2 * d + i] = k == 0 ? 0.0 : vel - prev_vel[i];
      prev_vel[i] = vel;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

Tensor rows_tensor(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::from({static_cast<std::int64_t>(rows.size()), static_cast<std::int64_t>(rows.front().size())},
                      std::move(flat));
}

Tensor mlp2(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2) {
  return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
}

Tensor multi_head_attention(const Predictor& p, const Tensor& h) {
  const std::int64_t t = h.dim(0);
  const std::int64_t d = p.config.token_dim;
  const std::int64_t heads = p.config.heads;
  const std::int64_t dh = d / heads;
  static constexpr int kSwap[] = {1, 0, 2};
  const auto split = [&](const Tensor& x) { return permute(reshape(x, {t, heads, dh}), kSwap); };
  const Tensor att = scaled_dot_product_attention(split(matmul(h, p.wq)), split(matmul(h, p.wk)),
                                                  split(matmul(h, p.wv)));
  return matmul(reshape(permute(att, kSwap), {t, d}), p.wo);
}

}  // namespace

Predictor Predictor::init(const Skeleton& skeleton, std::int64_t anchors, std::int64_t latent_dim,
                          const PredictorConfig& config, std::uint64_t seed) {
  if (config.history < 1 || config.token_dim < 1 || config.heads < 1 || config.token_dim % config.heads != 0 ||
      config.ff_dim < 1 || config.encoder_hidden < 1 || config.unroll < 0) {
    throw ConfigError("predictor: invalid configuration (token_dim must be divisible by heads)");
  }
  if (anchors < 1 || latent_dim < 1) throw ConfigError("predictor: anchors and latent_dim must be >= 1");
  std::mt19937_64 rng(seed);
  Predictor p;
  p.config = config;
  p.anchors = anchors;
  p.latent_dim = latent_dim;
  const std::int64_t nb = config.history;
  const std::int64_t d = config.token_dim;
  const std::int64_t hid = config.encoder_hidden;
  const auto he = [](std::int64_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  const auto xav = [](std::int64_t fan_in) { return std::sqrt(1.0 / static_cast<double>(fan_in)); };
  for (std::size_t g = 0; g < skeleton.groups().size(); ++g) {
    p.group_params.push_back(skeleton.group_params(g));
    const auto in = static_cast<std::int64_t>(3 * p.group_params.back().size());
    p.group_pos.push_back(Tensor::randn({nb, in}, rng, config.init_std, true));
    p.group_w1.push_back(Tensor::randn({in, hid}, rng, he(in), true));
    p.group_b1.push_back(Tensor::zeros({hid}, true));
    p.group_w2.push_back(Tensor::randn({hid, d}, rng, xav(hid), true));
    p.group_b2.push_back(Tensor::zeros({d}, true));
  }
  const std::int64_t gin = 3 * kGlobalFeatures;
  p.global_pos = Tensor::randn({nb, gin}, rng, config.init_std, true);
  p.global_w1 = Tensor::randn({gin, hid}, rng, he(gin), true);
  p.global_b1 = Tensor::zeros({hid}, true);
  p.global_w2 = Tensor::randn({hid, d}, rng, xav(hid), true);
  p.global_b2 = Tensor::zeros({d}, true);
  p.anchor_pos = Tensor::randn({anchors, latent_dim}, rng, config.init_std, true);
  p.anchor_w1 = Tensor::randn({anchors, latent_dim, hid}, rng, he(latent_dim), true);
  p.anchor_b1 = Tensor::zeros({anchors, 1, hid}, true);
  p.anchor_w2 = Tensor::randn({anchors, hid, d}, rng, xav(hid), true);
  p.anchor_b2 = Tensor::zeros({anchors, 1, d}, true);
  p.wq = Tensor::randn({d, d}, rng, xav(d), true);
  p.wk = Tensor::randn({d, d}, rng, xav(d), true);
  p.wv = Tensor::randn({d, d}, rng, xav(d), true);
  p.wo = Tensor::randn({d, d}, rng, xav(d), true);
  p.ff_w1 = Tensor::randn({d, config.ff_dim}, rng, he(d), true);
  p.ff_b1 = Tensor::zeros({config.ff_dim}, true);
  p.ff_w2 = Tensor::randn({config.ff_dim, d}, rng, xav(config.ff_dim), true);
  p.ff_b2 = Tensor::zeros({d}, true);
  p.head_w = Tensor::randn({d, latent_dim}, rng, config.init_std, true);
  p.head_b = Tensor::zeros({latent_dim}, true);
  return p;
}

std::int64_t Predictor::token_count() const {
  return config.history * static_cast<std::int64_t>(group_params.size() + 1) + anchors;
}

std::vector<Tensor> Predictor::parameters() const {
  std::vector<Tensor> out;
  for (std::size_t g = 0; g < group_params.size(); ++g) {
    for (const Tensor* t : {&group_pos[g], &group_w1[g], &group_b1[g], &group_w2[g], &group_b2[g]}) out.push_back(*t);
  }
  for (const Tensor* t : {&global_pos, &global_w1, &global_b1, &global_w2, &global_b2}) out.push_back(*t);
  for (const Tensor& t : history_parameters()) out.push_back(t);
  for (const Tensor* t : {&wq, &wk, &wv, &wo, &ff_w1, &ff_b1, &ff_w2, &ff_b2, &head_w, &head_b}) out.push_back(*t);
  return out;
}

std::vector<Tensor> Predictor::history_parameters() const {
  return {anchor_pos, anchor_w1, anchor_b1, anchor_w2, anchor_b2};
}

void Predictor::save(Checkpoint& ck, const std::string& prefix) const {
  ck.put_scalar(prefix + "history", config.history);
  ck.put_scalar(prefix + "heads", config.heads);
  ck.put_scalar(prefix + "unroll", config.unroll);
  ck.put_scalar(prefix + "groups", static_cast<double>(group_params.size()));
  for (std::size_t g = 0; g < group_params.size(); ++g) {
    const std::string gp = prefix + "group" + std::to_string(g) + "/";
    std::vector<std::int64_t> idx(group_params[g].begin(), group_params[g].end());
    ck.put_indices(gp + "params", {static_cast<std::int64_t>(idx.size())}, idx);
    ck.put(gp + "pos", group_pos[g]);
    ck.put(gp + "w1", group_w1[g]);
    ck.put(gp + "b1", group_b1[g]);
    ck.put(gp + "w2", group_w2[g]);
    ck.put(gp + "b2", group_b2[g]);
  }
  const std::pair<const char*, const Tensor*> named[] = {
      {"global/pos", &global_pos}, {"global/w1", &global_w1}, {"global/b1", &global_b1},
      {"global/w2", &global_w2},   {"global/b2", &global_b2}, {"anchor/pos", &anchor_pos},
      {"anchor/w1", &anchor_w1},   {"anchor/b1", &anchor_b1}, {"anchor/w2", &anchor_w2},
      {"anchor/b2", &anchor_b2},   {"attn/wq", &wq},          {"attn/wk", &wk},
      {"attn/wv", &wv},            {"attn/wo", &wo},          {"ff/w1", &ff_w1},
      {"ff/b1", &ff_b1},           {"ff/w2", &ff_w2},         {"ff/b2", &ff_b2},
      {"head/w", &head_w},         {"head/b", &head_b}};
  for (const auto& [name, t] : named) ck.put(prefix + name, *t);
}

Predictor Predictor::load(const Checkpoint& ck, const std::string& prefix) {
  Predictor p;
  p.config.history = static_cast<int>(ck.scalar(prefix + "history"));
  p.config.heads = static_cast<int>(ck.scalar(prefix + "heads"));
  p.config.unroll = static_cast<int>(ck.scalar(prefix + "unroll"));
  const auto groups = static_cast<std::size_t>(ck.scalar(prefix + "groups"));
  for (std::size_t g = 0; g < groups; ++g) {
    const std::string gp = prefix + "group" + std::to_string(g) + "/";
    const auto idx = ck.indices(gp + "params");
    p.group_params.emplace_back(idx.begin(), idx.end());
    p.group_pos.push_back(ck.tensor(gp + "pos", true));
    p.group_w1.push_back(ck.tensor(gp + "w1", true));
    p.group_b1.push_back(ck.tensor(gp + "b1", true));
    p.group_w2.push_back(ck.tensor(gp + "w2", true));
    p.group_b2.push_back(ck.tensor(gp + "b2", true));
  }
  const std::pair<const char*, Tensor*> named[] = {
      {"global/pos", &p.global_pos}, {"global/w1", &p.global_w1}, {"global/b1", &p.global_b1},
      {"global/w2", &p.global_w2},   {"global/b2", &p.global_b2}, {"anchor/pos", &p.anchor_pos},
      {"anchor/w1", &p.anchor_w1},   {"anchor/b1", &p.anchor_b1}, {"anchor/w2", &p.anchor_w2},
      {"anchor/b2", &p.anchor_b2},   {"attn/wq", &p.wq},          {"attn/wk", &p.wk},
      {"attn/wv", &p.wv},            {"attn/wo", &p.wo},          {"ff/w1", &p.ff_w1},
      {"ff/b1", &p.ff_b1},           {"ff/w2", &p.ff_w2},         {"ff/b2", &p.ff_b2},
      {"head/w", &p.head_w},         {"head/b", &p.head_b}};
  for (const auto& [name, t] : named) *t = ck.tensor(prefix + name, true);
  p.config.token_dim = static_cast<int>(p.wq.dim(0));
  p.config.ff_dim = static_cast<int>(p.ff_w1.dim(1));
  p.config.encoder_hidden = static_cast<int>(p.global_w1.dim(1));
  p.anchors = p.anchor_pos.dim(0);
  p.latent_dim = p.anchor_pos.dim(1);
  return p;
}

Tensor tokenize(const Predictor& p, std::span<const Pose> window, const Tensor& prev_latents) {
  if (static_cast<int>(window.size()) != p.config.history) {
    throw ShapeError("tokenize: window has " + std::to_string(window.size()) + " poses, expected " +
                     std::to_string(p.config.history));
  }
  if (prev_latents.rank() != 2 || prev_latents.dim(0) != p.anchors || prev_latents.dim(1) != p.latent_dim) {
    throw ShapeError("tokenize: previous latents must be [" + std::to_string(p.anchors) + ", " +
                     std::to_string(p.latent_dim) + "], got " + shape_str(prev_latents.shape()));
  }
  std::vector<Tensor> parts;
  for (std::size_t g = 0; g < p.group_params.size(); ++g) {
    std::vector<std::vector<double>> values;
    for (const auto& pose : window) {
      std::vector<double> v;
      for (int idx : p.group_params[g]) {
        if (idx >= static_cast<int>(pose.theta.size())) throw ShapeError("tokenize: pose has too few parameters");
        v.push_back(pose.theta[static_cast<std::size_t>(idx)]);
      }
      values.push_back(std::move(v));
    }
    const Tensor x = add(rows_tensor(motion_features(values)), p.group_pos[g]);
    parts.push_back(mlp2(x, p.group_w1[g], p.group_b1[g], p.group_w2[g], p.group_b2[g]));
  }
  std::vector<std::vector<double>> globals;
  for (const auto& pose : window) {
    const Vec3 aa = matrix_to_axis_angle(pose.global.rotation);
    const Vec3& t = pose.global.translation;
    globals.push_back({aa.x(), aa.y(), aa.z(), t.x(), t.y(), t.z()});
  }
  const Tensor gx = add(rows_tensor(motion_features(globals)), p.global_pos);
  parts.push_back(mlp2(gx, p.global_w1, p.global_b1, p.global_w2, p.global_b2));
  const Tensor lx = reshape(add(prev_latents, p.anchor_pos), {p.anchors, 1, p.latent_dim});
  const Tensor lh = relu(add(matmul(lx, p.anchor_w1), p.anchor_b1));
  parts.push_back(reshape(add(matmul(lh, p.anchor_w2), p.anchor_b2), {p.anchors, p.config.token_dim}));
  return concat(parts, 0);
}

Tensor sinusoidal_encoding(std::int64_t tokens, std::int64_t dim) {
  std::vector<double> pe(static_cast<std::size_t>(tokens * dim));
  for (std::int64_t pos = 0; pos < tokens; ++pos) {
    for (std::int64_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      pe[static_cast<std::size_t>(pos * dim + i)] =
          i % 2 == 0 ? std::sin(static_cast<double>(pos) * freq) : std::cos(static_cast<double>(pos) * freq);
    }
  }
  return Tensor::from({tokens, dim}, std::move(pe));
}

Tensor predict(const Predictor& p, std::span<const Pose> window, const Tensor& prev_latents,
               const LatentPrior& prior) {
  if (!prior.fitted()) throw ConfigError("predict: the latent prior has not been fitted");
  if (prior.anchor_count() != p.anchors || prior.latent_dim() != p.latent_dim) {
    throw ConfigError("predict: latent prior does not match the predictor dimensions");
  }
  const Tensor tokens = tokenize(p, window, prev_latents);
  const std::int64_t t = tokens.dim(0);
  Tensor x = add(tokens, sinusoidal_encoding(t, p.config.token_dim));
  x = add(x, multi_head_attention(p, layer_norm(x)));
  x = add(x, mlp2(layer_norm(x), p.ff_w1, p.ff_b1, p.ff_w2, p.ff_b2));
  const Tensor anchor_tokens = slice(x, 0, t - p.anchors, t);
  return prior.apply(add(matmul(anchor_tokens, p.head_w), p.head_b));
}

std::vector<Pose> history_window(std::span<const Pose> poses, std::size_t t, int history, const Skeleton& skeleton) {
  if (t >= poses.size()) throw ShapeError("history_window: frame index out of range");
  std::vector<Pose> window;
  const auto nb = static_cast<std::size_t>(history);
  for (std::size_t k = 0; k < nb; ++k) {
    const std::size_t back = nb - 1 - k;
    window.push_back(back > t ? Pose::zero(skeleton) : poses[t - back]);
  }
  return window;
}

std::vector<Tensor> rollout(const Predictor& p, std::span<const Pose> poses, const Tensor& init_latents,
                            const LatentPrior& prior, const Skeleton& skeleton, std::size_t first) {
  std::vector<Tensor> out;
  Tensor prev = init_latents;
  NoGradGuard no_grad;
  for (std::size_t t = first; t < poses.size(); ++t) {
    const auto window = normalize_window(history_window(poses, t, p.config.history, skeleton));
    prev = predict(p, window, prev, prior);
    out.push_back(prev);
  }
  return out;
}

Tensor predictor_loss(std::span<const Tensor> pred, std::span<const Tensor> target) {
  if (pred.size() != target.size() || pred.empty()) throw ShapeError("predictor_loss: sequences must be non-empty and aligned");
  std::vector<Tensor> p(pred.begin(), pred.end());
  std::vector<Tensor> q(target.begin(), target.end());
  Tensor total = Tensor::scalar(0.0);
  for (int order = 0; order <= 3 && p.size() >= 1; ++order) {
    Tensor term = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < p.size(); ++i) term = add(term, mean(abs(sub(p[i], q[i]))));
    total = add(total, mul_scalar(term, 1.0 / static_cast<double>(p.size())));
    if (p.size() < 2) break;
    std::vector<Tensor> dp, dq;
    for (std::size_t i = 0; i + 1 < p.size(); ++i) {
      dp.push_back(sub(p[i + 1], p[i]));
      dq.push_back(sub(q[i + 1], q[i]));
    }
    p = std::move(dp);
    q = std::move(dq);
  }
  return total;
}

AdamW make_predictor_optimizer(const Predictor& predictor) {
  return AdamW({ParamGroup{"predictor", predictor.parameters(), predictor.config.lr, true}});
}

PredictorStepResult predictor_train_step(Predictor& p, AdamW& optimizer, std::span<const LatentSequence> data,
                                         std::span<const TrainSample> batch, const LatentPrior& prior,
                                         const Skeleton& skeleton) {
  if (batch.empty()) throw ConfigError("predictor_train_step: empty batch");
  const std::size_t unroll = static_cast<std::size_t>(std::max(1, p.config.unroll));
  const auto width = p.anchors * p.latent_dim;
  const auto latent = [&](const std::vector<double>& v) {
    if (static_cast<std::int64_t>(v.size()) != width) throw ShapeError("predictor_train_step: latent size mismatch");
    return Tensor::from({p.anchors, p.latent_dim}, v);
  };
  optimizer.zero_grad();
  PredictorStepResult result;
  Tensor total = Tensor::scalar(0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const auto& seq = data[s.sequence];
    if (s.start + unroll > seq.poses.size() || seq.latents.size() != seq.poses.size()) {
      throw ShapeError("predictor_train_step: sample exceeds its sequence");
    }
    for (int context = 0; context < 2; ++context) {
      Tensor prev = (context == 0 && s.start > 0) ? latent(seq.latents[s.start - 1])
                                                  : Tensor::zeros({p.anchors, p.latent_dim});
      std::vector<Tensor> preds, targets;
      for (std::size_t u = 0; u < unroll; ++u) {
        const std::size_t t = s.start + u;
        const auto window = normalize_window(history_window(seq.poses, t, p.config.history, skeleton));
        prev = predict(p, window, prev, prior);
        preds.push_back(prev);
        targets.push_back(latent(seq.latents[t]));
      }
      const Tensor loss = mul_scalar(predictor_loss(preds, targets), scale);
      (context == 0 ? result.gt_context : result.zero_context) += loss.item();
      total = add(total, loss);
    }
  }
  result.loss = total.item();
  if (!std::isfinite(result.loss)) throw NumericalError("predictor_train_step: non-finite loss");
  backward(total);
  optimizer.step();
  return result;
}

}  // namespace gavatar
