#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gavatar/error.hpp"
#include "gavatar/geometry.hpp"
#include "gavatar/ops.hpp"
#include "gavatar/predictor.hpp"
#include "gavatar/synthetic.hpp"
#include "gradcheck.hpp"

namespace gavatar {
namespace {

using namespace ops;

constexpr std::int64_t kAnchors = 3;
constexpr std::int64_t kDim = 4;

PredictorConfig tiny_config() {
  PredictorConfig c;
  c.history = 3;
  c.token_dim = 8;
  c.heads = 2;
  c.ff_dim = 8;
  c.encoder_hidden = 6;
  c.unroll = 2;
  c.lr = 3e-3;
  c.init_std = 0.2;
  return c;
}

LatentPrior wide_prior(std::int64_t anchors, std::int64_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 3.0);
  std::vector<std::vector<double>> frames(64, std::vector<double>(static_cast<std::size_t>(anchors * dim)));
  for (auto& f : frames) {
    for (auto& v : f) v = n(rng);
  }
  return LatentPrior::fit(frames, anchors, dim, static_cast<int>(dim));
}

struct PredictorFixture : ::testing::Test {
  Skeleton skeleton = Skeleton::canonical();
  std::vector<Pose> poses = random_motion(skeleton, 12, 0.35, 5);
  LatentPrior prior = wide_prior(kAnchors, kDim, 2);
  Predictor pred = Predictor::init(skeleton, kAnchors, kDim, tiny_config(), 9);

  std::vector<Pose> window(std::size_t t) const {
    return normalize_window(history_window(poses, t, pred.config.history, skeleton));
  }
};

RigidTransform random_rigid(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return {axis_angle_to_matrix(Vec3(n(rng), n(rng), n(rng))), Vec3(n(rng), n(rng), n(rng))};
}

double max_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

TEST(NormalizeWindow, LastFrameBecomesIdentity) {
  std::mt19937_64 rng(1);
  const Skeleton sk = Skeleton::canonical();
  std::vector<Pose> w(4, Pose::zero(sk));
  for (auto& p : w) p.global = random_rigid(rng);
  const auto out = normalize_window(w);
  EXPECT_TRUE(out.back().global.rotation.isApprox(Mat3::Identity(), 1e-12));
  EXPECT_LT(out.back().global.translation.norm(), 1e-12);
  for (std::size_t k = 0; k < w.size(); ++k) {
    const RigidTransform expect = w.back().global.inverse() * w[k].global;
    EXPECT_TRUE(out[k].global.rotation.isApprox(expect.rotation, 1e-12));
    EXPECT_LT((out[k].global.translation - expect.translation).norm(), 1e-12);
    EXPECT_EQ(out[k].theta, w[k].theta);
  }
}

TEST(NormalizeWindow, InvariantToSharedGlobalTransform) {
  std::mt19937_64 rng(2);
  const Skeleton sk = Skeleton::canonical();
  std::vector<Pose> w(5, Pose::zero(sk));
  for (auto& p : w) p.global = random_rigid(rng);
  const RigidTransform shared = random_rigid(rng);
  std::vector<Pose> moved = w;
  for (auto& p : moved) p.global = shared * p.global;
  const auto a = normalize_window(w);
  const auto b = normalize_window(moved);
  for (std::size_t k = 0; k < w.size(); ++k) {
    EXPECT_TRUE(a[k].global.rotation.isApprox(b[k].global.rotation, 1e-10));
    EXPECT_LT((a[k].global.translation - b[k].global.translation).norm(), 1e-10);
  }
}

TEST(MotionFeatures, ConstantWindowHasZeroDerivatives) {
  const std::vector<std::vector<double>> values(4, {0.3, -1.2});
  const auto rows = motion_features(values);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    ASSERT_EQ(r.size(), 6u);
    EXPECT_DOUBLE_EQ(r[0], 0.3);
    EXPECT_DOUBLE_EQ(r[1], -1.2);
    for (int i = 2; i < 6; ++i) EXPECT_DOUBLE_EQ(r[static_cast<std::size_t>(i)], 0.0);
  }
}

TEST(MotionFeatures, LinearRamp) {
  std::vector<std::vector<double>> values;
  for (int k = 0; k < 5; ++k) values.push_back({0.5 * k});
  const auto rows = motion_features(values);
  EXPECT_DOUBLE_EQ(rows[0][1], 0.0);
  EXPECT_DOUBLE_EQ(rows[0][2], 0.0);
  EXPECT_DOUBLE_EQ(rows[1][1], 0.5);
  EXPECT_DOUBLE_EQ(rows[1][2], 0.5);
  for (std::size_t k = 2; k < 5; ++k) {
    EXPECT_DOUBLE_EQ(rows[k][0], 0.5 * static_cast<double>(k));
    EXPECT_DOUBLE_EQ(rows[k][1], 0.5);
    EXPECT_DOUBLE_EQ(rows[k][2], 0.0);
  }
}

TEST(HistoryWindow, PadsWithZeroPosesAtTheStart) {
  const Skeleton sk = Skeleton::canonical();
  const auto poses = random_motion(sk, 6, 0.35, 1);
  const auto w = history_window(poses, 1, 4, sk);
  ASSERT_EQ(w.size(), 4u);
  for (std::size_t k = 0; k < 2; ++k) {
    for (double v : w[k].theta) EXPECT_EQ(v, 0.0);
  }
  EXPECT_EQ(w[2].theta, poses[0].theta);
  EXPECT_EQ(w[3].theta, poses[1].theta);
  const auto full = history_window(poses, 5, 4, sk);
  EXPECT_EQ(full.front().theta, poses[2].theta);
  EXPECT_THROW(history_window(poses, 6, 4, sk), ShapeError);
}

TEST_F(PredictorFixture, TokenCountCoversGroupsGlobalAndAnchors) {
  const std::int64_t groups = static_cast<std::int64_t>(skeleton.groups().size());
  EXPECT_EQ(pred.token_count(), pred.config.history * (groups + 1) + kAnchors);
  const Tensor tokens = tokenize(pred, window(5), Tensor::zeros({kAnchors, kDim}));
  EXPECT_EQ(tokens.dim(0), pred.token_count());
  EXPECT_EQ(tokens.dim(1), pred.config.token_dim);
}

TEST_F(PredictorFixture, DefaultSizesMatchTheReferenceModel) {
  const Predictor full = Predictor::init(skeleton, 32, 16, {}, 1);
  EXPECT_EQ(full.token_count(), 10 * 8 + 32);
  EXPECT_EQ(full.wq.dim(0), 128);
  EXPECT_EQ(full.ff_w1.dim(1), 256);
  EXPECT_EQ(full.head_w.dim(1), 16);
}

TEST_F(PredictorFixture, SinusoidalEncodingValues) {
  const Tensor pe = sinusoidal_encoding(3, 4);
  EXPECT_DOUBLE_EQ(pe.at({0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(pe.at({0, 1}), 1.0);
  EXPECT_NEAR(pe.at({2, 0}), std::sin(2.0), 1e-15);
  EXPECT_NEAR(pe.at({2, 3}), std::cos(2.0 / 100.0), 1e-15);
}

TEST_F(PredictorFixture, PredictIsDeterministicAndShaped) {
  std::mt19937_64 rng(3);
  const Tensor prev = Tensor::randn({kAnchors, kDim}, rng);
  const Tensor a = predict(pred, window(6), prev, prior);
  const Tensor b = predict(pred, window(6), prev, prior);
  ASSERT_EQ(a.dim(0), kAnchors);
  ASSERT_EQ(a.dim(1), kDim);
  EXPECT_EQ(max_diff(a, b), 0.0);
  const Predictor again = Predictor::init(skeleton, kAnchors, kDim, tiny_config(), 9);
  EXPECT_EQ(max_diff(a, predict(again, window(6), prev, prior)), 0.0);
}

TEST_F(PredictorFixture, OutputsLieInsideThePrior) {
  const LatentPrior tight = wide_prior(kAnchors, kDim, 4);
  std::mt19937_64 rng(4);
  for (auto& v : pred.head_b.mutable_values()) v = 40.0 * std::normal_distribution<double>()(rng);
  const Tensor out = predict(pred, window(4), Tensor::zeros({kAnchors, kDim}), tight);
  EXPECT_LT(max_diff(out, tight.apply(out)), 1e-9);
}

TEST_F(PredictorFixture, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const auto w = window(7);
  const auto fn = [&](const std::vector<Tensor>& in) {
    Predictor p = pred;
    p.head_w = in[1];
    p.wq = in[2];
    return testing::random_projection(predict(p, w, in[0], prior), 17);
  };
  const auto r = testing::grad_check(fn, {Tensor::randn({kAnchors, kDim}, rng, 1.0, true), pred.head_w.detach(),
                                          pred.wq.detach()});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST_F(PredictorFixture, RejectsBadInputs) {
  EXPECT_THROW(predict(pred, window(5), Tensor::zeros({kAnchors, kDim}), LatentPrior{}), ConfigError);
  EXPECT_THROW(predict(pred, window(5), Tensor::zeros({kAnchors + 1, kDim}), prior), ShapeError);
  const auto short_window = history_window(poses, 5, 2, skeleton);
  EXPECT_THROW(tokenize(pred, short_window, Tensor::zeros({kAnchors, kDim})), ShapeError);
  PredictorConfig bad = tiny_config();
  bad.heads = 3;
  EXPECT_THROW(Predictor::init(skeleton, kAnchors, kDim, bad, 1), ConfigError);
}

TEST(PredictorLoss, ZeroForIdenticalSequences) {
  std::mt19937_64 rng(6);
  std::vector<Tensor> a;
  for (int i = 0; i < 5; ++i) a.push_back(Tensor::randn({2, 3}, rng));
  EXPECT_DOUBLE_EQ(predictor_loss(a, a).item(), 0.0);
}

TEST(PredictorLoss, ConstantOffsetOnlyHitsTheValueTerm) {
  std::mt19937_64 rng(7);
  std::vector<Tensor> a, b;
  for (int i = 0; i < 6; ++i) {
    a.push_back(Tensor::randn({2, 3}, rng));
    b.push_back(add_scalar(a.back(), -0.25));
  }
  EXPECT_NEAR(predictor_loss(a, b).item(), 0.25, 1e-12);
}

TEST(PredictorLoss, MatchesHandComputedDifferences) {
  const std::vector<double> p = {0.0, 1.0, 3.0, 2.0};
  const std::vector<double> q = {0.0, 0.0, 0.0, 0.0};
  std::vector<Tensor> pt, qt;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pt.push_back(Tensor::from({1}, {p[i]}));
    qt.push_back(Tensor::from({1}, {q[i]}));
  }
  // values 1.5, diffs (1,2,-1) -> 4/3, second (1,-3) -> 2, third (-4) -> 4
  EXPECT_NEAR(predictor_loss(pt, qt).item(), 1.5 + 4.0 / 3.0 + 2.0 + 4.0, 1e-12);
  // two frames: values and one difference only
  EXPECT_NEAR(predictor_loss(std::span(pt).first(2), std::span(qt).first(2)).item(), 0.5 + 1.0, 1e-12);
  EXPECT_NEAR(predictor_loss(std::span(pt).first(1), std::span(qt).first(1)).item(), 0.0, 1e-12);
  EXPECT_THROW(predictor_loss(std::span(pt).first(2), std::span(qt).first(3)), ShapeError);
}

TEST_F(PredictorFixture, RolloutLengthsAndDeterminism) {
  const Tensor init = Tensor::zeros({kAnchors, kDim});
  const auto all = rollout(pred, poses, init, prior, skeleton);
  EXPECT_EQ(all.size(), poses.size());
  const auto again = rollout(pred, poses, init, prior, skeleton);
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(max_diff(all[i], again[i]), 0.0);
  const auto tail = rollout(pred, poses, all[4], prior, skeleton, 5);
  ASSERT_EQ(tail.size(), poses.size() - 5);
  for (std::size_t i = 0; i < tail.size(); ++i) EXPECT_LT(max_diff(tail[i], all[i + 5]), 1e-12);
  const auto last = rollout(pred, poses, init, prior, skeleton, poses.size() - 1);
  EXPECT_EQ(last.size(), 1u);
}

LatentSequence make_sequence(const std::vector<Pose>& poses, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  LatentSequence s;
  s.poses = poses;
  for (std::size_t t = 0; t < poses.size(); ++t) {
    std::vector<double> l(static_cast<std::size_t>(kAnchors * kDim));
    for (std::size_t i = 0; i < l.size(); ++i) l[i] = std::sin(poses[t].theta[i % poses[t].theta.size()] * 3.0) + 0.1 * n(rng);
    s.latents.push_back(std::move(l));
  }
  return s;
}

TEST_F(PredictorFixture, HistoryFreeModelSeesBothContextsAlike) {
  for (Tensor t : pred.history_parameters()) {
    for (auto& v : t.mutable_values()) v = 0.0;
  }
  const std::vector<LatentSequence> data = {make_sequence(poses, 1)};
  const std::vector<TrainSample> batch = {{0, 3}, {0, 6}};
  AdamW opt = make_predictor_optimizer(pred);
  const auto r = predictor_train_step(pred, opt, data, batch, prior, skeleton);
  EXPECT_NEAR(r.gt_context, r.zero_context, 1e-12);
  EXPECT_NEAR(r.loss, 2.0 * r.gt_context, 1e-12);
}

TEST_F(PredictorFixture, TrainingReducesTheLoss) {
  const std::vector<LatentSequence> data = {make_sequence(poses, 2)};
  std::vector<TrainSample> batch;
  for (std::size_t s = 1; s + 2 <= poses.size(); s += 2) batch.push_back({0, s});
  AdamW opt = make_predictor_optimizer(pred);
  const double first = predictor_train_step(pred, opt, data, batch, prior, skeleton).loss;
  double last = first;
  for (int i = 0; i < 60; ++i) last = predictor_train_step(pred, opt, data, batch, prior, skeleton).loss;
  EXPECT_LT(last, 0.6 * first);
}

TEST_F(PredictorFixture, TrainStepRejectsOverlongSamples) {
  const std::vector<LatentSequence> data = {make_sequence(poses, 3)};
  const std::vector<TrainSample> batch = {{0, poses.size() - 1}};
  AdamW opt = make_predictor_optimizer(pred);
  EXPECT_THROW(predictor_train_step(pred, opt, data, batch, prior, skeleton), ShapeError);
}

TEST_F(PredictorFixture, CheckpointRoundTrip) {
  Checkpoint ck;
  pred.save(ck);
  const Predictor back = Predictor::load(Checkpoint::deserialize(ck.serialize()));
  EXPECT_EQ(back.token_count(), pred.token_count());
  EXPECT_EQ(back.group_params, pred.group_params);
  const Tensor prev = Tensor::full({kAnchors, kDim}, 0.3);
  EXPECT_LT(max_diff(predict(back, window(8), prev, prior), predict(pred, window(8), prev, prior)), 1e-6);
}

}  // namespace
}  // namespace gavatar
