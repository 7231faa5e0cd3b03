#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "fixtures.hpp"
#include "gavatar/mesh.hpp"
#include "gavatar/pose_io.hpp"
#include "gavatar/skeleton.hpp"

namespace gavatar {
namespace {

Skeleton two_joint_chain() {
  std::vector<Joint> joints{{"root", -1, {}}, {"child", 0, {}}};
  joints[1].rest.translation = Vec3(1, 0, 0);
  return Skeleton(joints, {{"all", {0, 1}}});
}

TEST(Skeleton, CanonicalGroups) {
  const auto sk = Skeleton::canonical();
  EXPECT_EQ(sk.joint_count(), 36);
  EXPECT_EQ(sk.param_count(), 108);
  const std::vector<std::size_t> expected{12, 9, 9, 12, 12, 27, 27};
  ASSERT_EQ(sk.groups().size(), expected.size());
  std::vector<int> seen(108, 0);
  for (std::size_t g = 0; g < expected.size(); ++g) {
    const auto params = sk.group_params(g);
    EXPECT_EQ(params.size(), expected[g]) << sk.groups()[g].name;
    for (int p : params) ++seen[static_cast<std::size_t>(p)];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(Skeleton, RejectsBadTopology) {
  std::vector<Joint> joints{{"a", -1, {}}, {"b", 2, {}}, {"c", 0, {}}};
  EXPECT_THROW(Skeleton(joints, {}), ConfigError);
  std::vector<Joint> two_roots{{"a", -1, {}}, {"b", -1, {}}};
  EXPECT_THROW(Skeleton(two_roots, {}), ConfigError);
}

TEST(ForwardKinematics, IdentityPoseGivesRestTransforms) {
  const auto sk = Skeleton::canonical();
  const auto world = forward_kinematics(sk, Pose::zero(sk));
  const auto rest = sk.rest_world();
  for (int j = 0; j < sk.joint_count(); ++j) {
    EXPECT_TRUE(world[static_cast<std::size_t>(j)].rotation.isApprox(rest[static_cast<std::size_t>(j)].rotation, 1e-14));
    EXPECT_TRUE(world[static_cast<std::size_t>(j)].translation.isApprox(rest[static_cast<std::size_t>(j)].translation, 1e-14));
  }
}

TEST(ForwardKinematics, RotatedChain) {
  const auto sk = two_joint_chain();
  Pose pose = Pose::zero(sk);
  pose.theta[2] = std::numbers::pi / 2;  // root about z
  const auto world = forward_kinematics(sk, pose);
  EXPECT_NEAR(world[1].translation.x(), 0.0, 1e-12);
  EXPECT_NEAR(world[1].translation.y(), 1.0, 1e-12);
}

TEST(ForwardKinematics, GlobalTranslationShiftsAll) {
  const auto sk = Skeleton::canonical();
  Pose pose = Pose::zero(sk);
  pose.global.translation = Vec3(0.5, -1.0, 2.0);
  const auto world = forward_kinematics(sk, pose);
  const auto rest = sk.rest_world();
  for (std::size_t j = 0; j < world.size(); ++j) {
    EXPECT_TRUE((world[j].translation - rest[j].translation - pose.global.translation).norm() < 1e-12);
  }
}

TEST(ForwardKinematics, RejectsParamMismatch) {
  const auto sk = Skeleton::canonical();
  Pose pose;
  pose.theta.assign(10, 0.0);
  EXPECT_THROW(forward_kinematics(sk, pose), ShapeError);
}

TEST(Lbs, IdentityPose) {
  const auto sk = Skeleton::canonical();
  std::mt19937_64 rng(1);
  std::vector<Vec3> pts;
  std::vector<SkinRow> rows;
  for (int i = 0; i < 50; ++i) {
    pts.push_back(Vec3::Random());
    rows.push_back(testing::random_skin_row(sk.joint_count(), rng));
  }
  const auto rest = sk.rest_world();
  const auto out = lbs(pts, rows, rest, forward_kinematics(sk, Pose::zero(sk)));
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_LT((out[i] - pts[i]).norm(), 1e-12);
}

TEST(Lbs, SingleRotation) {
  const std::vector<RigidTransform> rest{RigidTransform::identity()};
  RigidTransform rot;
  rot.rotation = axis_angle_to_matrix(Vec3(0, 0, std::numbers::pi / 2));
  const std::vector<RigidTransform> world{rot};
  const std::vector<Vec3> pts{Vec3(1, 0, 0)};
  const std::vector<SkinRow> rows{{{0, 1.0}}};
  const auto out = lbs(pts, rows, rest, world);
  EXPECT_LT((out[0] - Vec3(0, 1, 0)).norm(), 1e-12);
}

TEST(Lbs, HalfBlendOfTranslation) {
  const std::vector<RigidTransform> rest{RigidTransform::identity(), RigidTransform::identity()};
  RigidTransform moved;
  moved.translation = Vec3(2, 4, 6);
  const std::vector<RigidTransform> world{RigidTransform::identity(), moved};
  const std::vector<Vec3> pts{Vec3(0.3, 0.2, 0.1)};
  const std::vector<SkinRow> rows{{{0, 0.5}, {1, 0.5}}};
  const auto out = lbs(pts, rows, rest, world);
  EXPECT_LT((out[0] - pts[0] - Vec3(1, 2, 3)).norm(), 1e-12);
}

TEST(Lbs, RejectsUnnormalizedRows) {
  const std::vector<RigidTransform> rest{RigidTransform::identity()};
  const std::vector<Vec3> pts{Vec3::Zero()};
  const std::vector<SkinRow> rows{{{0, 0.9}}};
  EXPECT_THROW(lbs(pts, rows, rest, rest), ConfigError);
}

TEST(Lbs, RigidEquivariance) {
  const auto sk = Skeleton::canonical();
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 0.3);
  Pose pose = Pose::zero(sk);
  for (auto& t : pose.theta) t = g(rng);
  std::vector<Vec3> pts;
  std::vector<SkinRow> rows;
  for (int i = 0; i < 100; ++i) {
    pts.push_back(Vec3::Random());
    rows.push_back(testing::random_skin_row(sk.joint_count(), rng));
  }
  const auto rest = sk.rest_world();
  auto world = forward_kinematics(sk, pose);
  const auto base = lbs(pts, rows, rest, world);
  RigidTransform G;
  G.rotation = axis_angle_to_matrix(Vec3(0.3, -1.1, 0.4));
  G.translation = Vec3(1, 2, -3);
  for (auto& w : world) w = G * w;
  const auto moved = lbs(pts, rows, rest, world);
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_LT((moved[i] - G.apply(base[i])).norm(), 1e-10);
}

TEST(Lbs, FkDeterminism) {
  const auto sk = Skeleton::canonical();
  Pose pose = Pose::zero(sk);
  for (std::size_t i = 0; i < pose.theta.size(); ++i) pose.theta[i] = 0.01 * static_cast<double>(i);
  const auto a = forward_kinematics(sk, pose);
  const auto b = forward_kinematics(sk, pose);
  for (std::size_t j = 0; j < a.size(); ++j) {
    EXPECT_EQ(a[j].rotation, b[j].rotation);
    EXPECT_EQ(a[j].translation, b[j].translation);
  }
}

TemplateMesh single_triangle() {
  TemplateMesh mesh;
  mesh.skeleton = two_joint_chain();
  mesh.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  mesh.triangles = {{0, 1, 2}};
  mesh.uv = {Vec2(0, 0), Vec2(1, 0), Vec2(0, 1)};
  mesh.skinning = {{{0, 1.0}}, {{1, 1.0}}, {{0, 0.5}, {1, 0.5}}};
  return mesh;
}

TEST(Mesh, InterpolateAtCorner) {
  const auto mesh = single_triangle();
  Vec3 pos;
  Vec2 uv;
  SkinRow skin;
  interpolate_on_triangle(mesh, 0, Vec3(0, 1, 0), pos, uv, skin);
  EXPECT_EQ(pos, mesh.vertices[1]);
  EXPECT_EQ(uv, mesh.uv[1]);
  ASSERT_EQ(skin.size(), 1u);
  EXPECT_EQ(skin[0].joint, 1);
  EXPECT_DOUBLE_EQ(skin[0].weight, 1.0);
}

TEST(Mesh, SamplesAreNormalizedAndUniform) {
  const auto mesh = single_triangle();
  const auto s = sample_surface(mesh, 10000, 7);
  Vec3 centroid = Vec3::Zero();
  for (std::size_t i = 0; i < s.size(); ++i) {
    double total = 0.0;
    for (const auto& w : s.skinning[i]) total += w.weight;
    EXPECT_NEAR(total, 1.0, 1e-6);
    centroid += s.positions[i];
  }
  centroid /= static_cast<double>(s.size());
  const Vec3 expected(1.0 / 3, 1.0 / 3, 0.0);
  EXPECT_LT((centroid - expected).norm(), 0.02 * expected.norm());
}

TEST(Mesh, SamplingIsSeedDeterministic) {
  const auto mesh = single_triangle();
  const auto a = sample_surface(mesh, 100, 3);
  const auto b = sample_surface(mesh, 100, 3);
  EXPECT_EQ(a.positions, b.positions);
}

TEST(Mesh, RejectsDegenerateInput) {
  auto mesh = single_triangle();
  EXPECT_THROW(sample_surface(mesh, 0, 1), ConfigError);
  mesh.vertices[2] = Vec3(2, 0, 0);
  EXPECT_THROW(sample_surface(mesh, 10, 1), ConfigError);
}

TEST(Mesh, JsonRoundTrip) {
  auto mesh = single_triangle();
  mesh.face_uv_polygons = {{Vec2(0.1, 0.1), Vec2(0.3, 0.1), Vec2(0.2, 0.3)}};
  const auto back = TemplateMesh::from_json_string(mesh.to_json_string());
  EXPECT_EQ(back.vertices, mesh.vertices);
  EXPECT_EQ(back.triangles, mesh.triangles);
  EXPECT_EQ(back.skeleton.joint_count(), 2);
  EXPECT_TRUE(back.in_face_region(Vec2(0.2, 0.15)));
  EXPECT_FALSE(back.in_face_region(Vec2(0.8, 0.8)));
}

TEST(Mesh, ValidationCatchesBadIndices) {
  auto mesh = single_triangle();
  mesh.triangles[0][2] = 9;
  EXPECT_THROW(mesh.validate(), ConfigError);
}

TEST(PoseIo, RoundTripThroughFloat32) {
  const auto sk = Skeleton::canonical();
  PoseSequence seq;
  seq.param_count = static_cast<std::uint32_t>(sk.param_count());
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 0.5);
  for (int f = 0; f < 3; ++f) {
    Pose p = Pose::zero(sk);
    for (auto& t : p.theta) t = g(rng);
    p.global = RigidTransform::from(Quat(0.9, 0.1, -0.2, 0.3), Vec3(g(rng), g(rng), g(rng)));
    seq.frames.push_back(quantize_pose(p));
  }
  const auto path = std::filesystem::temp_directory_path() / "gavatar_poses.gpsq";
  seq.save(path);
  const auto back = PoseSequence::load(path);
  ASSERT_EQ(back.frames.size(), 3u);
  for (std::size_t f = 0; f < 3; ++f) {
    EXPECT_EQ(back.frames[f].theta, seq.frames[f].theta);
    EXPECT_LT((back.frames[f].global.rotation - seq.frames[f].global.rotation).norm(), 1e-6);
  }
  std::filesystem::remove(path);
}

TEST(PoseIo, VectorSequenceRoundTrip) {
  VectorSequence seq;
  seq.dim = 4;
  seq.frames = {quantize_vector({1, 2, 3, 4}), quantize_vector({0.1, 0.2, 0.3, 0.4})};
  const auto path = std::filesystem::temp_directory_path() / "gavatar_face.gfem";
  seq.save(path);
  const auto back = VectorSequence::load(path);
  EXPECT_EQ(back.frames, seq.frames);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace gavatar
