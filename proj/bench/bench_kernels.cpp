// Serial references against the OpenMP kernels. With OMP_NUM_THREADS=1 the
// pairs should run at about the same speed.
#include <benchmark/benchmark.h>

#include <random>

#include "icepilot/dataset.hpp"
#include "icepilot/ssm.hpp"
#include "icepilot/train.hpp"

using namespace icepilot;

namespace {

struct RenderFixture {
  SceneBundle bundle = make_bundle(canonical_scene(), CatheterModel{});
  FanGeometry fan = fan_from_transform(bundle.scene.world_to_home, FanParams{});
};

const RenderFixture& render_fixture() {
  static const RenderFixture f;
  return f;
}

void BM_RenderSerial(benchmark::State& st) {
  const auto& f = render_fixture();
  RenderParams p;
  p.width = p.height = static_cast<int>(st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(render_slice_reference(f.bundle.scene, f.fan, 7, p));
  st.SetItemsProcessed(st.iterations() * p.width * p.height);
}

void BM_RenderOpenMP(benchmark::State& st) {
  const auto& f = render_fixture();
  RenderParams p;
  p.width = p.height = static_cast<int>(st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(render_slice(f.bundle.scene, f.fan, 7, p));
  st.SetItemsProcessed(st.iterations() * p.width * p.height);
}

struct ScanFixture {
  int h, w, d = 32, n = 8;
  std::vector<float> x;
  std::array<std::vector<float>, 4> w_dt, b_dt, w_b, w_c, a_log, d_skip;
  std::array<ssm::DirectionParams<float>, 4> params;

  explicit ScanFixture(int side) : h(side), w(side) {
    std::mt19937_64 rng(3);
    std::normal_distribution<float> g(0.0f, 0.3f);
    auto fill = [&](std::vector<float>& v, std::size_t size) {
      v.resize(size);
      for (auto& e : v) e = g(rng);
    };
    fill(x, static_cast<std::size_t>(h) * w * d);
    for (int k = 0; k < 4; ++k) {
      fill(w_dt[k], d * d);
      fill(b_dt[k], d);
      fill(w_b[k], n * d);
      fill(w_c[k], n * d);
      fill(a_log[k], d * n);
      fill(d_skip[k], d);
      params[k] = {w_dt[k].data(), b_dt[k].data(), w_b[k].data(), w_c[k].data(), a_log[k].data(), d_skip[k].data()};
    }
  }
};

void BM_Ss2dSerial(benchmark::State& st) {
  ScanFixture f(static_cast<int>(st.range(0)));
  std::vector<float> out(f.x.size());
  for (auto _ : st) {
    ssm::ss2d_forward_reference(f.h, f.w, f.d, f.n, f.x.data(), f.params, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_Ss2dOpenMP(benchmark::State& st) {
  ScanFixture f(static_cast<int>(st.range(0)));
  std::vector<float> out(f.x.size());
  for (auto _ : st) {
    ssm::ss2d_forward(f.h, f.w, f.d, f.n, f.x.data(), f.params, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

struct BatchFixture {
  Network<float> net{ModelConfig::desk()};
  std::vector<std::vector<float>> images;
  std::vector<Sample> batch;

  BatchFixture() {
    net.initialize(1);
    const int side = net.config().input_size;
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int i = 0; i < 32; ++i) {
      images.emplace_back(static_cast<std::size_t>(side) * side);
      for (auto& p : images.back()) p = u(rng);
    }
    for (int i = 0; i < 32; ++i) batch.push_back({images[i].data(), i % kQueryClassCount, PoseLabel{{i * 1.0, 2.0, 30.0}, {0.1, 0.0, 0.2}}});
  }
};

const BatchFixture& batch_fixture() {
  static const BatchFixture f;
  return f;
}

void BM_BatchGradientSerial(benchmark::State& st) {
  const auto& f = batch_fixture();
  std::vector<float> grad;
  for (auto _ : st) benchmark::DoNotOptimize(batch_gradient(f.net, std::span<const Sample>(f.batch), grad, false));
}

void BM_BatchGradientOpenMP(benchmark::State& st) {
  const auto& f = batch_fixture();
  std::vector<float> grad;
  for (auto _ : st) benchmark::DoNotOptimize(batch_gradient(f.net, std::span<const Sample>(f.batch), grad, true));
}

}  // namespace

BENCHMARK(BM_RenderSerial)->Arg(64)->Arg(224)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RenderOpenMP)->Arg(64)->Arg(224)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Ss2dSerial)->Arg(8)->Arg(16)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Ss2dOpenMP)->Arg(8)->Arg(16)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BatchGradientSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchGradientOpenMP)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
