#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gavatar/appearance.hpp"
#include "gavatar/error.hpp"
#include "gavatar/ops.hpp"
#include "gavatar/synthetic.hpp"
#include "gradcheck.hpp"

namespace gavatar {
namespace {

using namespace ops;

TEST(FuseTexel, OutlierOutsideMedianBandIsDropped) {
  const std::vector<Vec3> s{Vec3::Constant(1.0), Vec3::Constant(1.0), Vec3::Constant(5.0)};
  EXPECT_EQ(fuse_texel_samples(s), Vec3::Constant(1.0));
}

TEST(FuseTexel, KeepsSamplesInsideBandAndAverages) {
  const std::vector<Vec3> s{Vec3(1.0, 0.5, 0.2), Vec3(1.05, 0.5, 0.2), Vec3(0.95, 0.9, 0.21)};
  const Vec3 f = fuse_texel_samples(s);
  EXPECT_NEAR(f[0], 1.0, 1e-12);   // median 1.0, all three inside [0.8, 1.1]
  EXPECT_NEAR(f[1], 0.5, 1e-12);   // 0.9 > 1.1 * 0.5 is dropped
  EXPECT_NEAR(f[2], 0.61 / 3.0, 1e-12);
}

TEST(FuseTexel, SingleSampleIsIdempotent) {
  const std::vector<Vec3> s{Vec3(0.3, 0.7, 0.1)};
  const Vec3 once = fuse_texel_samples(s);
  const std::vector<Vec3> again{once};
  EXPECT_EQ(fuse_texel_samples(again), once);
}

struct ProjectionFixture : ::testing::Test {
  TemplateMesh mesh = make_body_mesh(Skeleton::canonical());
  UvAtlasMap map = build_uv_map(mesh, 64);
  Camera cam = Camera::look_at(Vec3(0.3, 1.0, 3.0), Vec3(0, 0.9, 0), Vec3(0, 1, 0), 101.0, 64, 64);
};

TEST_F(ProjectionFixture, ConstantImageGivesConstantTexels) {
  Image img = Image::zeros(64, 64, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = (i % 3 == 0) ? 0.3 : (i % 3 == 1 ? 0.6 : 0.9);
  Image mask = Image::zeros(64, 64, 1);
  for (auto& v : mask.data) v = 1.0;
  const std::vector<TextureView> views{{&cam, &img, &mask}};
  const auto tex = project_uv_texture(mesh, map, Pose::zero(mesh.skeleton), views);
  ASSERT_GT(tex.valid_count(), 100);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const auto i = static_cast<std::size_t>(y * 64 + x);
      if (!tex.valid[i]) continue;
      if (mesh.in_face_region(Vec2((x + 0.5) / 64, (y + 0.5) / 64))) {
        EXPECT_EQ(tex.rgb[3 * i], 0.0);
        continue;
      }
      EXPECT_DOUBLE_EQ(tex.rgb[3 * i], 0.3);
      EXPECT_DOUBLE_EQ(tex.rgb[3 * i + 1], 0.6);
      EXPECT_DOUBLE_EQ(tex.rgb[3 * i + 2], 0.9);
    }
  }
}

TEST_F(ProjectionFixture, PixelsOutsideMaskContributeNothing) {
  Image img = Image::zeros(64, 64, 3);
  Image mask = Image::zeros(64, 64, 1);
  const std::vector<TextureView> views{{&cam, &img, &mask}};
  EXPECT_THROW(project_uv_texture(mesh, map, Pose::zero(mesh.skeleton), views), NumericalError);
  // Left half masked in, right half bright but masked out.
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      mask.at(x, y, 0) = x < 32 ? 1.0 : 0.0;
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = x < 32 ? 0.25 : 1.0;
    }
  }
  const auto tex = project_uv_texture(mesh, map, Pose::zero(mesh.skeleton), views);
  for (std::size_t i = 0; i < tex.valid.size(); ++i) {
    if (tex.valid[i]) EXPECT_NE(tex.rgb[3 * i], 1.0);
  }
}

TEST_F(ProjectionFixture, HiddenSurfaceIsNotTextured) {
  Image img = Image::zeros(64, 64, 3);
  Image mask = Image::zeros(64, 64, 1);
  for (auto& v : img.data) v = 0.5;
  for (auto& v : mask.data) v = 1.0;
  const std::vector<TextureView> views{{&cam, &img, &mask}};
  const auto tex = project_uv_texture(mesh, map, Pose::zero(mesh.skeleton), views);
  // A single view sees well under the whole surface.
  std::int64_t mapped = 0;
  for (int t : map.triangle) mapped += t >= 0;
  EXPECT_LT(tex.valid_count(), mapped * 3 / 4);
}

TEST(Encoder, ZeroWeightsGiveBiasMaps) {
  EncoderConfig cfg;
  cfg.resolution = 64;
  cfg.output_side = 16;
  auto enc = Encoder::init(cfg, 1);
  for (const auto& p : enc.parameters()) {
    auto t = p;
    for (auto& v : t.mutable_values()) v = 0.0;
  }
  for (std::size_t c = 0; c < 16; ++c) enc.mu_bias.mutable_values()[c] = 0.1 * static_cast<double>(c);
  std::mt19937_64 rng(2);
  const auto [mu, lv] = encode(enc, Tensor::uniform({3, 64, 64}, rng, 0.0, 1.0));
  for (std::int64_t c = 0; c < 16; ++c) {
    for (std::int64_t i = 0; i < 16 * 16; ++i) EXPECT_EQ(mu.values()[static_cast<std::size_t>(c * 256 + i)], 0.1 * static_cast<double>(c));
  }
}

TEST(Encoder, OutputSideIs32AtFullResolution) {
  EncoderConfig cfg;
  cfg.resolution = 1024;
  const auto enc = Encoder::init(cfg, 3);
  EXPECT_EQ(enc.conv_weights.size(), 5u);
  EXPECT_EQ(enc.conv_weights.back().dim(0), 128);
  const auto [mu, lv] = encode(enc, Tensor::zeros({3, 1024, 1024}));
  EXPECT_EQ(mu.shape(), (Shape{16, 32, 32}));
  EXPECT_EQ(lv.shape(), (Shape{16, 32, 32}));
}

TEST(Encoder, DeskScaleUsesTwoLayers) {
  const auto enc = Encoder::init({}, 4);
  ASSERT_EQ(enc.conv_weights.size(), 2u);
  EXPECT_EQ(enc.conv_weights[0].shape(), (Shape{8, 3, 3, 3}));
  EXPECT_EQ(enc.conv_weights[1].shape(), (Shape{16, 8, 3, 3}));
  const auto [mu, lv] = encode(enc, Tensor::zeros({3, 128, 128}));
  EXPECT_EQ(mu.shape(), (Shape{16, 32, 32}));
}

TEST(Encoder, RejectsWrongResolution) {
  const auto enc = Encoder::init({}, 5);
  EXPECT_THROW(encode(enc, Tensor::zeros({3, 64, 64})), ShapeError);
}

TEST(Encoder, GradientOfMeanMuWrtFirstConv) {
  EncoderConfig cfg;
  cfg.resolution = 16;
  cfg.output_side = 4;
  cfg.init_std = 1.0;
  auto enc = Encoder::init(cfg, 6);
  std::mt19937_64 rng(7);
  const auto tex = Tensor::uniform({3, 16, 16}, rng, 0.0, 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    const auto r = testing::grad_check(
        [&](const std::vector<Tensor>& in) {
          Encoder e = enc;
          e.conv_weights[0] = in[0];
          return mean(encode(e, tex).first);
        },
        {Tensor::randn(enc.conv_weights[0].shape(), rng, 0.5, true)});
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(Encoder, ConstantTextureGivesSpatiallyConstantInterior) {
  EncoderConfig cfg;
  cfg.resolution = 64;
  cfg.output_side = 16;
  cfg.init_std = 1.0;
  const auto enc = Encoder::init(cfg, 8);
  // Group norm over a feature map that is constant except near the padded
  // border still keeps the interior constant up to a per-channel affine map.
  const auto [mu, lv] = encode(enc, Tensor::full({3, 64, 64}, 0.4));
  for (std::int64_t c = 0; c < 16; ++c) {
    const double ref = mu.at({c, 8, 8});
    for (std::int64_t y = 3; y < 13; ++y) {
      for (std::int64_t x = 3; x < 13; ++x) EXPECT_NEAR(mu.at({c, y, x}), ref, 1e-9);
    }
  }
}

TEST(Encoder, CheckpointRoundTrip) {
  const auto enc = Encoder::init({}, 9);
  Checkpoint ck;
  enc.save(ck);
  const auto back = Encoder::load(Checkpoint::deserialize(ck.serialize()));
  std::mt19937_64 rng(10);
  const auto tex = Tensor::uniform({3, 128, 128}, rng, 0.0, 1.0);
  const auto a = encode(enc, tex).first;
  const auto b = encode(back, tex).first;
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.values()[static_cast<std::size_t>(i)], b.values()[static_cast<std::size_t>(i)]);
}

TEST(SampleLatent, NoiseCases) {
  std::mt19937_64 rng(11);
  const auto mu = Tensor::randn({2, 3, 3}, rng);
  const auto lv = Tensor::randn({2, 3, 3}, rng);
  const auto z0 = sample_latent(mu, lv, Tensor::zeros({2, 3, 3}));
  const auto zu = sample_latent(mu, Tensor::zeros({2, 3, 3}), Tensor::full({2, 3, 3}, 0.7));
  for (std::size_t i = 0; i < 18; ++i) {
    EXPECT_EQ(z0.values()[i], mu.values()[i]);
    EXPECT_DOUBLE_EQ(zu.values()[i], mu.values()[i] + 0.7);
  }
  EXPECT_EQ(sample_latent(mu, lv, Tensor()).values()[0], mu.values()[0]);
}

TEST(SampleLatent, EmpiricalStddevMatchesSigma) {
  std::mt19937_64 rng(12);
  const double logvar = -0.6;
  const std::int64_t n = 100000;
  const auto noise = Tensor::randn({n}, rng);
  const auto z = sample_latent(Tensor::full({n}, 0.3), Tensor::full({n}, logvar), noise);
  double m = 0.0, s = 0.0;
  for (double v : z.values()) m += v;
  m /= static_cast<double>(n);
  for (double v : z.values()) s += (v - m) * (v - m);
  const double sd = std::sqrt(s / static_cast<double>(n - 1));
  EXPECT_NEAR(sd / std::exp(logvar / 2.0), 1.0, 0.02);
}

TEST(AnchorLatents, TexelCenterMidpointAndConstant) {
  std::mt19937_64 rng(13);
  const auto z = Tensor::randn({16, 32, 32}, rng);
  const std::vector<Vec2> uvs{Vec2(5.5 / 32, 7.5 / 32), Vec2(6.0 / 32, 7.5 / 32)};
  const auto l = anchor_latents(z, uvs);
  for (std::int64_t c = 0; c < 16; ++c) {
    EXPECT_NEAR(l.at({0, c}), z.at({c, 7, 5}), 1e-12);
    EXPECT_NEAR(l.at({1, c}), 0.5 * (z.at({c, 7, 5}) + z.at({c, 7, 6})), 1e-12);
  }
  const auto zc = Tensor::full({16, 32, 32}, 0.25);
  std::vector<Vec2> many;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < 20; ++i) many.emplace_back(unit(rng), unit(rng));
  const auto lc = anchor_latents(zc, many);
  for (double v : lc.values()) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(AnchorLatents, LipschitzInUv) {
  std::mt19937_64 rng(14);
  const auto z = Tensor::randn({4, 32, 32}, rng);
  double max_adjacent = 0.0;
  for (std::int64_t c = 0; c < 4; ++c) {
    for (std::int64_t y = 0; y < 32; ++y) {
      for (std::int64_t x = 0; x < 32; ++x) {
        if (x + 1 < 32) max_adjacent = std::max(max_adjacent, std::abs(z.at({c, y, x + 1}) - z.at({c, y, x})));
        if (y + 1 < 32) max_adjacent = std::max(max_adjacent, std::abs(z.at({c, y + 1, x}) - z.at({c, y, x})));
      }
    }
  }
  // Per channel the bilinear sampler is Lipschitz with constant 32 * (max adjacent difference) per UV axis.
  const double lip = 2.0 * 32.0 * max_adjacent;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const Vec2 a(unit(rng), unit(rng));
    const Vec2 d(1e-3 * (unit(rng) - 0.5), 1e-3 * (unit(rng) - 0.5));
    const Vec2 b = (a + d).cwiseMax(0.0).cwiseMin(1.0);
    const std::vector<Vec2> q{a, b};
    const auto l = anchor_latents(z, q);
    for (std::int64_t c = 0; c < 4; ++c) EXPECT_LE(std::abs(l.at({0, c}) - l.at({1, c})), lip * (b - a).norm() + 1e-12);
  }
}

TEST(KlLoss, ClosedFormCases) {
  EXPECT_EQ(kl_loss(Tensor::zeros({2, 2}), Tensor::zeros({2, 2})).item(), 0.0);
  EXPECT_DOUBLE_EQ(kl_loss(Tensor::ones({2, 2}), Tensor::zeros({2, 2})).item(), 0.5);
  std::mt19937_64 rng(15);
  for (int i = 0; i < 20; ++i) EXPECT_GE(kl_loss(Tensor::randn({8}, rng, 2.0), Tensor::randn({8}, rng, 2.0)).item(), 0.0);
}

}  // namespace
}  // namespace gavatar
