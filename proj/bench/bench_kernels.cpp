// Scalar reference kernels against the vectorized ones, and the batch
// gradient at different OpenMP thread counts.
#include <benchmark/benchmark.h>
#include <omp.h>

#include <numeric>

#include "needlebench/nn/reference.hpp"
#include "needlebench/nn/train.hpp"
#include "needlebench/sensor.hpp"

using namespace needlebench;
using namespace needlebench::nn;
namespace ref = needlebench::nn::reference;

namespace {

const sensor::Dataset& data() {
  static const sensor::Dataset ds = sensor::calibrate({}, 4000, 3);
  return ds;
}

std::vector<double> window_d(const sensor::Dataset& ds, std::size_t start, int frames) {
  const float* p = ds.frame(start).data();
  return std::vector<double>(p, p + std::size_t(frames) * ds.frame(start).size());
}

CgruConfig cgru_cfg(int channels) {
  CgruConfig c;
  c.channels = channels;
  return c;
}

void BM_ConvRef(benchmark::State& st) {
  const int cin = 4, cout = 4, h = 512, k = 7;
  Rng rng(1);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<double> in(cin * h), w(cout * cin * k), b(cout);
  for (auto* v : {&in, &w, &b})
    for (auto& x : *v) x = u(rng);
  for (auto _ : st) benchmark::DoNotOptimize(ref::conv1d(in, cin, h, w, b, cout, k, 1));
}
BENCHMARK(BM_ConvRef);

template <class T>
void BM_Conv(benchmark::State& st) {
  ConvShape s;
  s.cin = 4;
  s.cout = 4;
  s.h = 512;
  s.w = 1;
  s.kh = 7;
  s.kw = 1;
  Rng rng(1);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<T> in(s.in_size()), w(s.weight_size()), b(s.cout), out(s.out_size());
  for (auto* v : {&in, &w, &b})
    for (auto& x : *v) x = T(u(rng));
  for (auto _ : st) {
    conv_forward(s, in.data(), w.data(), b.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_Conv<double>);
BENCHMARK(BM_Conv<float>);

void BM_CgruForwardRef(benchmark::State& st) {
  const auto cfg = cgru_cfg(int(st.range(0)));
  CgruCnn<double> net(cfg);
  Rng rng(2);
  net.init(rng);
  const ref::NamedParams p{&net.layout(), net.params()};
  const auto seq = window_d(data(), 100, cfg.seq_len);
  for (auto _ : st) benchmark::DoNotOptimize(ref::cgru_forward(p, cfg, seq, cfg.seq_len));
}
BENCHMARK(BM_CgruForwardRef)->Arg(4)->Unit(benchmark::kMillisecond);

template <class T>
void BM_CgruForward(benchmark::State& st) {
  const auto cfg = cgru_cfg(int(st.range(0)));
  CgruCnn<T> net(cfg);
  Rng rng(2);
  net.init(rng);
  const auto seqd = window_d(data(), 100, cfg.seq_len);
  const std::vector<T> seq(seqd.begin(), seqd.end());
  auto ws = net.make_workspace(cfg.seq_len);
  for (auto _ : st) benchmark::DoNotOptimize(net.forward(seq.data(), ws));
}
BENCHMARK(BM_CgruForward<double>)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CgruForward<float>)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_ResNetForwardRef(benchmark::State& st) {
  ResNetConfig cfg;
  ResNet<double> net(cfg);
  Rng rng(3);
  net.init(rng);
  const ref::NamedParams p{&net.layout(), net.params()};
  const auto buf = window_d(data(), 100, cfg.width);
  for (auto _ : st) benchmark::DoNotOptimize(ref::resnet_forward(p, cfg, buf));
}
BENCHMARK(BM_ResNetForwardRef)->Unit(benchmark::kMillisecond);

void BM_ResNetForward(benchmark::State& st) {
  ResNetConfig cfg;
  ResNet<float> net(cfg);
  Rng rng(3);
  net.init(rng);
  const auto bufd = window_d(data(), 100, cfg.width);
  const std::vector<float> buf(bufd.begin(), bufd.end());
  auto ws = net.make_workspace();
  for (auto _ : st) benchmark::DoNotOptimize(net.forward(buf.data(), ws));
}
BENCHMARK(BM_ResNetForward)->Unit(benchmark::kMillisecond);

// Streaming step of the deployed model, the per-tick cost in closed loop.
void BM_StreamPush(benchmark::State& st) {
  auto model = st.range(0) == 0 ? ForceModel::cgru(cgru_cfg(4)) : ForceModel::resnet(ResNetConfig{});
  Rng rng(4);
  model.init(rng);
  auto s = model.stream();
  std::size_t k = 0;
  for (auto _ : st) {
    benchmark::DoNotOptimize(s->push(data().frame(k).data()));
    k = (k + 1) % data().size();
  }
}
BENCHMARK(BM_StreamPush)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

// Batch of 128 windows; arg is the thread count (1 is the serial path).
void BM_BatchGradient(benchmark::State& st) {
  auto model = ForceModel::cgru(cgru_cfg(4));
  Rng rng(5);
  model.init(rng);
  std::vector<std::size_t> starts(128);
  std::iota(starts.begin(), starts.end(), std::size_t{0});
  for (auto& s : starts) s *= 17;
  std::vector<float> grad(model.params().size());
  const int keep = omp_get_max_threads();
  omp_set_num_threads(int(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(batch_gradient(model, data(), starts, grad));
  omp_set_num_threads(keep);
  st.counters["windows/s"] = benchmark::Counter(double(starts.size()), benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_BatchGradient)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();

}  // namespace

BENCHMARK_MAIN();
