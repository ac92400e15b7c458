#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <omp.h>

#include "needlebench/nn/reference.hpp"
#include "needlebench/nn/train.hpp"
#include "needlebench/sensor.hpp"

using namespace needlebench;
using namespace needlebench::nn;
namespace ref = needlebench::nn::reference;

namespace {

double max_abs_diff(const std::vector<double>& a, const double* b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<double> uniform_vec(std::size_t n, Rng& rng, double lo = -0.5, double hi = 0.5) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <class Net>
void randomize(Net& net, Rng& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : net.params()) p = u(rng);
}

int pick(Rng& rng, std::initializer_list<int> options) {
  std::uniform_int_distribution<std::size_t> d(0, options.size() - 1);
  return *(options.begin() + d(rng));
}

int irange(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

CgruConfig random_cgru(Rng& rng) {
  CgruConfig c;
  c.height = irange(rng, 8, 40);
  c.in_channels = pick(rng, {1, 2});
  c.channels = pick(rng, {1, 2, 3});
  c.kernel = pick(rng, {3, 5, 7});
  c.head_kernel = pick(rng, {3, 5});
  c.head_blocks = pick(rng, {1, 2});
  c.fc_hidden = pick(rng, {4, 8});
  c.seq_len = irange(rng, 1, 6);
  return c;
}

ResNetConfig random_resnet(Rng& rng) {
  ResNetConfig c;
  c.height = irange(rng, 16, 64);
  c.width = irange(rng, 5, 16);
  c.channels = pick(rng, {1, 2, 3});
  c.stem_kh = pick(rng, {3, 5, 7});
  c.stem_kw = pick(rng, {1, 3});
  c.stem_sh = pick(rng, {1, 2, 4});
  c.stem_sw = pick(rng, {1, 2});
  c.block_strides.clear();
  const int n = irange(rng, 1, 3);
  for (int i = 0; i < n; ++i) c.block_strides.push_back(pick(rng, {1, 2}));
  return c;
}

ref::NamedParams named(const ParamLayout& layout, std::span<const double> values) { return {&layout, values}; }

// Frames from the simulated sensor, as the networks see them in practice.
const sensor::Dataset& frames() {
  static const sensor::Dataset ds = sensor::calibrate({}, 1200, 77);
  return ds;
}

}  // namespace

TEST_CASE("zero parameters: the cell halves the hidden state") {
  CgruConfig cfg;
  cfg.height = 32;
  cfg.channels = 3;
  CgruCnn<double> net(cfg);
  std::fill(net.params().begin(), net.params().end(), 0.0);
  Rng rng(1);
  const auto x = uniform_vec(cfg.height, rng, 0.0, 1.0);
  const auto h0 = uniform_vec(net.hidden_size(), rng, -2.0, 2.0);
  auto ws = net.make_workspace(1);
  std::vector<double> h(net.hidden_size()), z(h.size()), r(h.size()), hhat(h.size());
  net.cell(x.data(), h0.data(), h.data(), z.data(), r.data(), hhat.data(), ws);
  for (std::size_t i = 0; i < h.size(); ++i) {
    CHECK(z[i] == 0.5);
    CHECK(r[i] == 0.5);
    CHECK(hhat[i] == 0.0);
    CHECK(h[i] == 0.5 * h0[i]);
  }
}

TEST_CASE("saturated update gate from a zero state returns the candidate") {
  Rng rng(2);
  CgruConfig cfg;
  cfg.height = 24;
  cfg.channels = 2;
  CgruCnn<double> net(cfg);
  randomize(net, rng);
  const auto& bz = net.layout().slot("gru.b_z");
  for (std::size_t i = 0; i < bz.count; ++i) net.params()[bz.offset + i] = 1e3;
  const auto x = uniform_vec(cfg.height, rng, 0.0, 1.0);
  std::vector<double> h0(net.hidden_size(), 0.0), h(h0.size()), z(h0.size()), r(h0.size()), hhat(h0.size());
  auto ws = net.make_workspace(1);
  net.cell(x.data(), h0.data(), h.data(), z.data(), r.data(), hhat.data(), ws);
  for (std::size_t i = 0; i < h.size(); ++i) {
    CHECK(z[i] == 1.0);
    CHECK(h[i] == hhat[i]);
  }
}

TEST_CASE("zero networks output their head bias") {
  CgruCnn<double> c(CgruConfig{});
  std::fill(c.params().begin(), c.params().end(), 0.0);
  c.params()[c.offsets().fc2_b] = 0.7;
  Rng rng(3);
  const auto seq = uniform_vec(std::size_t(c.config().seq_len) * c.config().height, rng, 0.0, 1.0);
  auto ws = c.make_workspace(c.config().seq_len);
  CHECK(c.forward(seq.data(), ws) == 0.7);

  ResNet<double> r(ResNetConfig{});
  std::fill(r.params().begin(), r.params().end(), 0.0);
  r.params()[r.offsets().fc_b] = -0.3;
  std::vector<double> zero(std::size_t(r.config().width) * r.config().height, 0.0);
  auto rws = r.make_workspace();
  CHECK(r.forward(zero.data(), rws) == -0.3);
}

TEST_CASE("convolution kernels match the scalar oracle") {
  Rng rng(4);
  for (int n = 0; n < 100; ++n) {
    ConvShape s;
    s.cin = irange(rng, 1, 3);
    s.cout = irange(rng, 1, 3);
    s.h = irange(rng, 1, 70);
    s.w = irange(rng, 1, 9);
    s.kh = pick(rng, {1, 3, 5, 7});
    s.kw = pick(rng, {1, 3});
    s.sh = pick(rng, {1, 1, 2, 4});
    s.sw = pick(rng, {1, 1, 2});
    const auto in = uniform_vec(s.in_size(), rng, -1, 1);
    const auto w = uniform_vec(s.weight_size(), rng);
    const auto b = uniform_vec(s.cout, rng);
    std::vector<double> out(s.out_size());
    conv_forward(s, in.data(), w.data(), b.data(), out.data());
    const auto expect = ref::conv2d(in, s.cin, s.h, s.w, w, b, s.cout, s.kh, s.kw, s.sh, s.sw);
    REQUIRE(expect.size() == out.size());
    CHECK(max_abs_diff(expect, out.data()) <= 1e-12);
    if (s.w == 1 && s.kw == 1 && s.sw == 1) {
      const auto e1 = ref::conv1d(in, s.cin, s.h, w, b, s.cout, s.kh, s.sh);
      CHECK(max_abs_diff(e1, out.data()) <= 1e-12);
    }
  }
}

TEST_CASE("cGRU cell, head and forward match the scalar oracle") {
  Rng rng(5);
  for (int n = 0; n < 100; ++n) {
    const auto cfg = random_cgru(rng);
    CgruCnn<double> net(cfg);
    randomize(net, rng);
    const auto p = named(net.layout(), net.params());
    const std::size_t frame = std::size_t(cfg.in_channels) * cfg.height;
    const auto seq = uniform_vec(frame * cfg.seq_len, rng, 0.0, 1.0);
    const auto h0 = uniform_vec(net.hidden_size(), rng, -1, 1);

    auto ws = net.make_workspace(cfg.seq_len);
    std::vector<double> h(h0.size()), z(h0.size()), r(h0.size()), hh(h0.size());
    net.cell(seq.data(), h0.data(), h.data(), z.data(), r.data(), hh.data(), ws);
    const auto expect_h = ref::cgru_cell(p, cfg, std::vector<double>(seq.begin(), seq.begin() + frame), h0);
    CHECK(max_abs_diff(expect_h, h.data()) <= 1e-12);

    CHECK(std::abs(net.head(h0.data(), ws) - ref::cgru_head(p, cfg, h0)) <= 1e-12);
    CHECK(std::abs(net.forward(seq.data(), ws) - ref::cgru_forward(p, cfg, seq, cfg.seq_len)) <= 1e-12);
  }
}

TEST_CASE("residual blocks match the scalar oracle") {
  Rng rng(6);
  for (int n = 0; n < 100; ++n) {
    const int cin = irange(rng, 1, 3), cout = pick(rng, {cin, 2, 3});
    const int h = irange(rng, 4, 40), w = irange(rng, 1, 8);
    const int kh = pick(rng, {3, 5}), kw = w == 1 ? 1 : pick(rng, {1, 3});
    const int sh = pick(rng, {1, 2}), sw = w == 1 ? 1 : pick(rng, {1, 2});
    ParamLayout layout;
    const auto block = ResBlock::make(layout, "b", cin, cout, h, w, kh, kw, sh, sw);
    const auto params = uniform_vec(layout.total(), rng);
    const auto in = uniform_vec(block.in_size(), rng, -1, 1);
    ResBlockCache<double> cache;
    cache.resize(block);
    res_block_forward(block, params.data(), in.data(), cache);
    const auto expect =
        ref::res_block(named(layout, params), "b", in, cin, cout, h, w, kh, kw, sh, sw, block.skip.has_value());
    REQUIRE(expect.size() == cache.out.size());
    CHECK(max_abs_diff(expect, cache.out.data()) <= 1e-12);
  }
}

TEST_CASE("ResNet forward matches the scalar oracle") {
  Rng rng(7);
  for (int n = 0; n < 100; ++n) {
    const auto cfg = random_resnet(rng);
    ResNet<double> net(cfg);
    randomize(net, rng, 0.3);
    const auto buffer = uniform_vec(std::size_t(cfg.width) * cfg.height, rng, 0.0, 1.0);
    auto ws = net.make_workspace();
    const double y = net.forward(buffer.data(), ws);
    CHECK(std::abs(y - ref::resnet_forward(named(net.layout(), net.params()), cfg, buffer)) <= 1e-12);
  }
}

namespace {

// Central differences of 0.5 (f - label)^2 against the analytic gradient.
template <class Net, class Forward, class Backward>
void gradient_check(Net& net, Forward fwd, Backward bwd, double label) {
  const std::size_t n = net.num_params();
  std::vector<double> grad(n, 0.0);
  const double y = fwd();
  bwd(y - label, grad.data());
  const double eps = 1e-6;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& slot : net.layout().slots()) {
    for (std::size_t i = slot.offset; i < slot.offset + slot.count; ++i) {
      const double keep = net.params()[i];
      net.params()[i] = keep + eps;
      const double lp = 0.5 * std::pow(fwd() - label, 2);
      net.params()[i] = keep - eps;
      const double lm = 0.5 * std::pow(fwd() - label, 2);
      net.params()[i] = keep;
      const double numeric = (lp - lm) / (2 * eps);
      const double scale = std::max(std::abs(numeric), std::abs(grad[i]));
      const double err = scale < 1e-9 ? std::abs(numeric - grad[i]) : std::abs(numeric - grad[i]) / scale;
      if (err > worst) worst = err, worst_name = slot.name;
    }
  }
  INFO("worst relative error " << worst << " in " << worst_name);
  CHECK(worst < 1e-4);
}

}  // namespace

TEST_CASE("cGRU gradient matches finite differences (H=16, C=2, T=5)") {
  CgruConfig cfg;
  cfg.height = 16;
  cfg.channels = 2;
  cfg.seq_len = 5;
  cfg.fc_hidden = 8;
  CgruCnn<double> net(cfg);
  Rng rng(8);
  net.init(rng);
  // Nonzero biases so their gradients are exercised away from the initial point.
  for (const auto& s : net.layout().slots())
    if (s.fan_in == 0)
      for (std::size_t i = 0; i < s.count; ++i) net.params()[s.offset + i] = std::uniform_real_distribution(-0.2, 0.2)(rng);
  const auto seq = uniform_vec(std::size_t(cfg.seq_len) * cfg.height, rng, 0.0, 1.0);
  auto ws = net.make_workspace(cfg.seq_len);
  gradient_check(
      net, [&] { return net.forward(seq.data(), ws); },
      [&](double dy, double* g) {
        net.forward(seq.data(), ws);
        net.backward(seq.data(), dy, g, ws);
      },
      1.3);
}

TEST_CASE("ResNet gradient matches finite differences") {
  ResNetConfig cfg;
  cfg.height = 32;
  cfg.width = 6;
  cfg.channels = 2;
  cfg.block_strides = {1, 2};
  ResNet<double> net(cfg);
  Rng rng(9);
  net.init(rng);
  for (const auto& s : net.layout().slots())
    if (s.fan_in == 0)
      for (std::size_t i = 0; i < s.count; ++i) net.params()[s.offset + i] = std::uniform_real_distribution(-0.2, 0.2)(rng);
  const auto buffer = uniform_vec(std::size_t(cfg.width) * cfg.height, rng, 0.0, 1.0);
  auto ws = net.make_workspace();
  gradient_check(
      net, [&] { return net.forward(buffer.data(), ws); },
      [&](double dy, double* g) {
        net.forward(buffer.data(), ws);
        net.backward(buffer.data(), dy, g, ws);
      },
      -0.4);
}

TEST_CASE("cGRU streaming equals the batch forward exactly") {
  CgruConfig cfg;
  cfg.channels = 4;
  CgruCnn<float> net(cfg);
  Rng rng(10);
  net.init(rng);
  const auto& ds = frames();
  const int T = cfg.seq_len;
  CgruStream<float> stream(net);
  auto ws = net.make_workspace(T);
  for (std::size_t start : {0UL, 333UL}) {
    stream.reset();
    float last = 0.0f;
    for (int t = 0; t < T; ++t) last = stream.push(ds.frame(start + t).data());
    CHECK(last == net.forward(ds.frame(start).data(), ws));
  }

  // A constant frame repeated T times.
  std::vector<float> seq;
  for (int t = 0; t < T; ++t) seq.insert(seq.end(), ds.frame(500).begin(), ds.frame(500).end());
  stream.reset();
  float last = 0.0f;
  for (int t = 0; t < T; ++t) last = stream.push(ds.frame(500).data());
  CHECK(last == net.forward(seq.data(), ws));

  // Frame order matters.
  std::vector<float> swapped(ds.frame(0).data(), ds.frame(0).data() + T * ds.frame(0).size());
  std::swap_ranges(swapped.begin(), swapped.begin() + 512, swapped.end() - 512);
  CHECK(net.forward(swapped.data(), ws) != net.forward(ds.frame(0).data(), ws));
}

TEST_CASE("ResNet streaming: zero-padded cyclic buffer") {
  ResNetConfig cfg;
  ResNet<float> net(cfg);
  Rng rng(11);
  net.init(rng);
  const auto& ds = frames();
  const std::size_t H = cfg.height, W = cfg.width;
  ResNetStream<float> stream(net);
  auto ws = net.make_workspace();
  for (std::size_t k = 1; k <= 2 * W + 7; ++k) {
    const float y = stream.push(ds.frame(k - 1).data());
    std::vector<float> expect(W * H, 0.0f);
    for (std::size_t slot = 0; slot < W; ++slot) {
      // slot W-1 holds the newest frame
      const long frame = long(k) - long(W) + long(slot);
      if (frame >= 0) std::copy_n(ds.frame(frame).data(), H, expect.begin() + slot * H);
    }
    REQUIRE(stream.linear() == expect);
    CHECK(y == net.forward(expect.data(), ws));
    CHECK(stream.warming_up() == (k < W));
  }
}

TEST_CASE("ForceModel windows agree with its streams") {
  Rng rng(12);
  CgruConfig cc;
  cc.channels = 2;
  for (auto model : {ForceModel::cgru(cc), ForceModel::resnet(ResNetConfig{})}) {
    model.init(rng);
    const auto& ds = frames();
    auto s = model.stream();
    float last = 0.0f;
    for (int t = 0; t < model.seq_len(); ++t) last = s->push(ds.frame(100 + t).data());
    CHECK(last == model.forward_window(ds.frame(100).data()));
  }
}

TEST_CASE("shape errors") {
  CgruConfig c;
  c.kernel = 4;
  CHECK_THROWS_AS(c.validate(), ShapeMismatch);
  ResNetConfig r;
  r.stem_kh = 2;
  CHECK_THROWS_AS(r.validate(), ShapeMismatch);
  CgruConfig small;
  small.height = 64;
  auto m = ForceModel::cgru(small);
  TrainConfig tc;
  CHECK_THROWS_AS(train(m, frames(), tc), ShapeMismatch);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "needlebench_ckpt_test";
  std::filesystem::create_directories(dir);
  Rng rng(13);
  CgruConfig cc;
  cc.channels = 3;
  for (auto model : {ForceModel::cgru(cc), ForceModel::resnet(ResNetConfig{})}) {
    model.init(rng);
    const auto path = (dir / (std::string(to_string(model.arch())) + ".ckpt")).string();
    save_checkpoint(path, model, {{"seed", 5}, {"config_hash", "abc"}});
    const auto back = load_checkpoint(path);
    CHECK(back.model.arch() == model.arch());
    CHECK(back.model.config_json() == model.config_json());
    CHECK(std::equal(back.model.params().begin(), back.model.params().end(), model.params().begin(),
                     model.params().end()));
    CHECK(back.manifest.at("extra").at("config_hash") == "abc");
    CHECK(back.model.forward_window(frames().frame(0).data()) == model.forward_window(frames().frame(0).data()));

    // Truncate the payload.
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 16);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  {
    std::ofstream junk(dir / "junk.ckpt");
    junk << "hello";
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "junk.ckpt").string()), FormatError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("contiguous train/validation split") {
  const auto s = split_windows(1000, 50, 0.1);
  REQUIRE_FALSE(s.train.empty());
  REQUIRE_FALSE(s.val.empty());
  CHECK(s.train.front() == 0);
  CHECK(s.train.back() + 50 <= 900);
  CHECK(s.val.front() == 900);
  CHECK(s.val.back() == 950);
  for (std::size_t i = 1; i < s.train.size(); ++i) CHECK(s.train[i] == s.train[i - 1] + 1);
}

TEST_CASE("training is deterministic") {
  CgruConfig cc;
  cc.channels = 2;
  TrainConfig tc;
  tc.epochs = 2;
  tc.windows_per_epoch = 256;
  tc.max_val_windows = 64;
  tc.seed = 21;
  std::vector<TrainResult> results;
  std::vector<std::vector<float>> params;
  for (int run = 0; run < 2; ++run) {
    auto m = ForceModel::cgru(cc);
    Rng rng(make_rng(tc.seed, 1));
    m.init(rng);
    results.push_back(train(m, frames(), tc));
    params.emplace_back(m.params().begin(), m.params().end());
  }
  REQUIRE(results[0].history.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(std::abs(results[0].history[e].train_mse - results[1].history[e].train_mse) <= 1e-10);
    CHECK(std::abs(results[0].history[e].val_mse - results[1].history[e].val_mse) <= 1e-10);
  }
  CHECK(params[0] == params[1]);
}

TEST_CASE("constant labels are learned") {
  auto ds = frames();
  std::fill(ds.forces.begin(), ds.forces.end(), 2.0f);
  CgruConfig cc;
  cc.channels = 2;
  auto m = ForceModel::cgru(cc);
  Rng rng(make_rng(3, 1));
  m.init(rng);
  TrainConfig tc;
  tc.epochs = 6;
  tc.lr = 5e-3;
  tc.batch = 32;
  tc.windows_per_epoch = 512;
  tc.seed = 3;
  const auto r = train(m, ds, tc);
  CHECK(r.best_val_mae < 0.01);
}

TEST_CASE("non-finite labels abort training") {
  auto ds = frames();
  ds.forces[400] = std::numeric_limits<float>::quiet_NaN();
  CgruConfig cc;
  cc.channels = 1;
  auto m = ForceModel::cgru(cc);
  Rng rng(1);
  m.init(rng);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch = 8;
  CHECK_THROWS_AS(train(m, ds, tc), NonFiniteLoss);
}

TEST_CASE("metrics") {
  const std::vector<double> y{0.1, 0.5, 1.5, 2.0, 3.3, 4.9};
  CHECK(mean_absolute_error(y, y) == 0.0);
  CHECK(*pearson(y, y) == doctest::Approx(1.0));
  std::vector<double> sym{-2, -1, 0, 1, 2}, neg;
  for (double v : sym) neg.push_back(-v);
  CHECK(*pearson(neg, sym) == doctest::Approx(-1.0));
  const std::vector<double> flat(6, 1.0);
  CHECK_FALSE(pearson(y, flat).has_value());
  CHECK_FALSE(pearson(flat, y).has_value());
  const std::vector<double> shifted{0.2, 0.6, 1.6, 2.1, 3.4, 5.0};
  CHECK(mean_absolute_error(shifted, y) == doctest::Approx(0.1));
  CHECK_THROWS_AS(pearson(y, sym), ShapeMismatch);
}

TEST_CASE("evaluation skips warm-up frames and reports null pCC on constant labels") {
  auto ds = frames();
  std::fill(ds.forces.begin(), ds.forces.end(), 1.0f);
  CgruConfig cc;
  cc.channels = 1;
  auto m = ForceModel::cgru(cc);
  Rng rng(2);
  m.init(rng);
  const auto r = evaluate(m, ds, 4);
  CHECK(r.frames == ds.size());
  CHECK(r.warmup == std::size_t(m.seq_len() - 1));
  CHECK(r.predictions.size() == ds.size());
  CHECK_FALSE(r.pcc.has_value());
  CHECK(r.to_json()["pcc"].is_null());
  CHECK(r.it_ms > 0.0);
}

TEST_CASE("batch gradient does not depend on the thread count") {
  Rng rng(13);
  CgruConfig cc;
  cc.channels = 2;
  for (auto model : {ForceModel::cgru(cc), ForceModel::resnet(ResNetConfig{})}) {
    model.init(rng);
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s < 37; ++s) starts.push_back(s * 29);
    std::vector<float> serial(model.params().size()), parallel(serial.size());
    const int keep = omp_get_max_threads();
    omp_set_num_threads(1);
    const double l1 = batch_gradient(model, frames(), starts, serial);
    omp_set_num_threads(4);
    const double l4 = batch_gradient(model, frames(), starts, parallel);
    omp_set_num_threads(keep);
    CHECK(l1 == l4);
    CHECK(serial == parallel);
  }
}
