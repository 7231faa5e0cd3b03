#include <benchmark/benchmark.h>

#include <random>

#include "gavatar/decoder.hpp"
#include "gavatar/ops.hpp"
#include "gavatar/predictor.hpp"
#include "gavatar/render.hpp"
#include "gavatar/synthetic.hpp"

namespace {

using namespace gavatar;

struct Scene {
  TemplateMesh mesh = make_body_mesh(Skeleton::canonical());
  std::vector<Pose> poses = random_motion(mesh.skeleton, 12, 0.35, 1);
  AvatarRig rig;
  AvatarDecoder decoder;

  Scene() {
    std::vector<std::vector<double>> thetas;
    for (const auto& p : poses) thetas.push_back(p.theta);
    rig = build_rig(mesh, {32, 512, 4096}, thetas, 4, 1);
    decoder = AvatarDecoder::init(rig, {}, 1);
  }

  static const Scene& get() {
    static const Scene s;
    return s;
  }
};

Camera bench_camera(int size) {
  return Camera::look_at({0, 0.92, 3}, {0, 0.92, 0}, {0, 1, 0}, 101.0 * size / 64.0, size, size);
}

DecodedFrame decode(const Scene& s) {
  const std::vector<double> phi(4, 0.0);
  return pose_frame(s.rig, s.decoder, s.poses[3], phi, Tensor::zeros({32, kLatentDim}));
}

void BM_RenderFast(benchmark::State& state) {
  const Scene& s = Scene::get();
  NoGradGuard no_grad;
  const GaussianFrame frame = to_gaussian_frame(decode(s), 1);
  const Camera cam = bench_camera(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(render(frame, cam));
}
BENCHMARK(BM_RenderFast)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_RenderDifferentiableForwardBackward(benchmark::State& state) {
  const Scene& s = Scene::get();
  const Camera cam = bench_camera(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    const DecodedFrame f = decode(s);
    const Tensor rgb = sh_to_rgb(f.sh, f.means, cam.center(), 1);
    const Tensor img = render_differentiable(f.means, f.rotations, f.scales, f.opacities, rgb, cam);
    backward(ops::mean(img));
  }
}
BENCHMARK(BM_RenderDifferentiableForwardBackward)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_PoseFrame(benchmark::State& state) {
  const Scene& s = Scene::get();
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(decode(s));
}
BENCHMARK(BM_PoseFrame)->Unit(benchmark::kMillisecond);

void BM_Matmul(benchmark::State& state) {
  const auto n = state.range(0);
  std::mt19937_64 rng(1);
  const Tensor a = Tensor::randn({n, n}, rng);
  const Tensor b = Tensor::randn({n, n}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_PredictorStep(benchmark::State& state) {
  const Scene& s = Scene::get();
  std::mt19937_64 rng(2);
  std::vector<std::vector<double>> frames;
  for (int i = 0; i < 40; ++i) {
    std::vector<double> f(32 * kLatentDim);
    for (auto& v : f) v = std::normal_distribution<double>()(rng);
    frames.push_back(f);
  }
  const LatentPrior prior = LatentPrior::fit(frames, 32, kLatentDim);
  const Predictor pred = Predictor::init(s.mesh.skeleton, 32, kLatentDim, {}, 1);
  const auto window = normalize_window(history_window(s.poses, 11, pred.config.history, s.mesh.skeleton));
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(predict(pred, window, Tensor::zeros({32, kLatentDim}), prior));
}
BENCHMARK(BM_PredictorStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
