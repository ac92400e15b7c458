#include "needlebench/nn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <omp.h>

namespace needlebench::nn {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"lr", lr},
          {"batch", batch},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"seed", seed},
          {"val_fraction", val_fraction},
          {"windows_per_epoch", windows_per_epoch},
          {"max_val_windows", max_val_windows}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.seed = j.value("seed", c.seed);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.windows_per_epoch = j.value("windows_per_epoch", c.windows_per_epoch);
  c.max_val_windows = j.value("max_val_windows", c.max_val_windows);
  return c;
}

void TrainConfig::validate() const {
  if (epochs <= 0 || batch <= 0 || !(lr > 0.0) || !(eps > 0.0)) throw RangeError("training hyperparameters must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) throw RangeError("Adam betas must lie in (0, 1)");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw RangeError("val_fraction must lie in (0, 1)");
}

Adam::Adam(std::size_t n, double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<float> params, std::span<const float> grad) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, double(t_));
  const double c2 = 1.0 - std::pow(b2_, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    params[i] = static_cast<float>(params[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
  }
}

WindowSplit split_windows(std::size_t frames, int seq_len, double val_fraction) {
  WindowSplit split;
  const std::size_t T = static_cast<std::size_t>(seq_len);
  const auto train_frames = static_cast<std::size_t>(std::floor(double(frames) * (1.0 - val_fraction)));
  // Windows never straddle the boundary, so no frame is shared between the sets.
  for (std::size_t s = 0; s + T <= train_frames; ++s) split.train.push_back(s);
  for (std::size_t s = train_frames; s + T <= frames; ++s) split.val.push_back(s);
  return split;
}

namespace {

template <class Net>
auto make_ws(const Net& net) {
  if constexpr (std::is_same_v<Net, CgruCnn<float>>)
    return net.make_workspace(net.config().seq_len);
  else
    return net.make_workspace();
}

void check_dataset(const ForceModel& model, const sensor::Dataset& ds) {
  if (model.height() != int(sensor::kAScanPixels)) throw ShapeMismatch("model height must equal the A-scan length");
  if (ds.size() < std::size_t(model.seq_len())) throw ShapeMismatch("dataset shorter than one window");
}

template <class Net>
double batch_gradient_impl(const Net& net, int seq_len, const sensor::Dataset& ds, std::span<const std::size_t> starts,
                           std::span<float> grad, std::vector<float>& sample_grads) {
  using Ws = decltype(make_ws(net));
  const std::size_t B = starts.size();
  const std::size_t P = net.num_params();
  sample_grads.assign(B * P, 0.0f);
  std::vector<double> losses(B, 0.0);
  const float scale = 2.0f / static_cast<float>(B);

#pragma omp parallel
  {
    Ws ws = make_ws(net);
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(B); ++i) {
      const float* window = ds.intensities.data() + starts[i] * sensor::kAScanPixels;
      const float y = net.forward(window, ws);
      const float err = y - ds.forces[starts[i] + seq_len - 1];
      losses[i] = double(err) * err;
      net.backward(window, scale * err, sample_grads.data() + i * P, ws);
    }
  }
  std::fill(grad.begin(), grad.end(), 0.0f);
  for (std::size_t i = 0; i < B; ++i) {
    const float* g = sample_grads.data() + i * P;
    for (std::size_t p = 0; p < P; ++p) grad[p] += g[p];
  }
  return std::accumulate(losses.begin(), losses.end(), 0.0) / double(B);
}

std::vector<std::size_t> even_subset(const std::vector<std::size_t>& v, std::size_t max) {
  if (max == 0 || v.size() <= max) return v;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < max; ++i) out.push_back(v[i * v.size() / max]);
  return out;
}

void set_output_bias(ForceModel& model, float value) {
  const std::string name = model.arch() == Arch::Cgru ? "head.fc2.b" : "fc.b";
  model.params()[model.layout().slot(name).offset] = value;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<std::size_t>(std::ceil(q * double(v.size()))) - 1;
  return v[std::min(idx, v.size() - 1)];
}

}  // namespace

double batch_gradient(const ForceModel& model, const sensor::Dataset& ds, std::span<const std::size_t> starts,
                      std::span<float> grad) {
  check_dataset(model, ds);
  std::vector<float> scratch;
  return model.visit(
      [&](const auto& net) { return batch_gradient_impl(net, model.seq_len(), ds, starts, grad, scratch); });
}

WindowMetrics evaluate_windows(const ForceModel& model, const sensor::Dataset& ds, std::span<const std::size_t> starts) {
  check_dataset(model, ds);
  const int T = model.seq_len();
  std::vector<double> abs_err(starts.size()), sq_err(starts.size());
  model.visit([&](const auto& net) {
    using Ws = decltype(make_ws(net));
#pragma omp parallel
    {
      Ws ws = make_ws(net);
#pragma omp for schedule(static)
      for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(starts.size()); ++i) {
        const float* window = ds.intensities.data() + starts[i] * sensor::kAScanPixels;
        const double err = double(net.forward(window, ws)) - ds.forces[starts[i] + T - 1];
        abs_err[i] = std::abs(err);
        sq_err[i] = err * err;
      }
    }
  });
  WindowMetrics m;
  if (starts.empty()) return m;
  m.mae = std::accumulate(abs_err.begin(), abs_err.end(), 0.0) / double(starts.size());
  m.mse = std::accumulate(sq_err.begin(), sq_err.end(), 0.0) / double(starts.size());
  return m;
}

TrainResult train(ForceModel& model, const sensor::Dataset& ds, const TrainConfig& cfg, ProgressFn progress) {
  cfg.validate();
  check_dataset(model, ds);
  const int T = model.seq_len();
  const WindowSplit split = split_windows(ds.size(), T, cfg.val_fraction);
  if (split.train.empty() || split.val.empty()) throw ShapeMismatch("dataset too small for a train/validation split");
  const auto val = even_subset(split.val, cfg.max_val_windows);

  Rng init_rng = make_rng(cfg.seed, 0x1417);
  model.init(init_rng);
  double label_mean = 0.0;
  for (std::size_t s : split.train) label_mean += ds.forces[s + T - 1];
  set_output_bias(model, static_cast<float>(label_mean / double(split.train.size())));

  const std::size_t P = model.params().size();
  Adam adam(P, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  std::vector<float> grad(P), sample_grads;
  std::vector<float> best(model.params().begin(), model.params().end());

  TrainResult result;
  result.best_val_mae = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order = split.train;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    Rng rng = make_rng(cfg.seed, 0xE0C0 + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t count =
        cfg.windows_per_epoch ? std::min(cfg.windows_per_epoch, order.size()) : order.size();

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < count; b += cfg.batch) {
      const std::size_t e = std::min(count, b + cfg.batch);
      const std::span<const std::size_t> starts(order.data() + b, e - b);
      const double loss = model.visit(
          [&](const auto& net) { return batch_gradient_impl(net, T, ds, starts, grad, sample_grads); });
      if (!std::isfinite(loss) || !all_finite<float>(grad)) {
        double norm = 0.0;
        for (float p : model.params()) norm += double(p) * p;
        throw NonFiniteLoss("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches) + " (loss " + std::to_string(loss) + ", |params| " +
                            std::to_string(std::sqrt(norm)) + ")");
      }
      adam.step(model.params(), grad);
      loss_sum += loss;
      ++batches;
    }

    const WindowMetrics vm = evaluate_windows(model, ds, val);
    EpochStats st;
    st.epoch = epoch;
    st.train_mse = loss_sum / double(std::max<std::size_t>(1, batches));
    st.val_mse = vm.mse;
    st.val_mae = vm.mae;
    st.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    result.history.push_back(st);
    if (vm.mae < result.best_val_mae) {
      result.best_val_mae = vm.mae;
      result.best_epoch = epoch;
      std::copy(model.params().begin(), model.params().end(), best.begin());
    }
    if (progress) progress(st);
  }
  std::copy(best.begin(), best.end(), model.params().begin());
  return result;
}

double mean_absolute_error(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw ShapeMismatch("prediction/label length mismatch");
  if (pred.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - truth[i]);
  return acc / double(pred.size());
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeMismatch("pearson: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / double(n);
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / double(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

json EvalReport::to_json() const {
  return {{"mae", mae},         {"pcc", pcc ? json(*pcc) : json(nullptr)},
          {"it_ms", it_ms},     {"it_p99_ms", it_p99_ms},
          {"tt_ms", tt_ms},     {"frames", frames},
          {"warmup", warmup}};
}

EvalReport evaluate(const ForceModel& model, const sensor::Dataset& test, int timing_samples) {
  check_dataset(model, test);
  EvalReport rep;
  rep.frames = test.size();
  rep.warmup = static_cast<std::size_t>(model.seq_len() - 1);
  auto stream = model.stream();
  std::vector<double> times;
  times.reserve(test.size());
  rep.predictions.resize(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto t0 = Clock::now();
    rep.predictions[i] = stream->push(test.frame(i).data());
    times.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }
  rep.it_ms = median(times);
  rep.it_p99_ms = percentile(times, 0.99);

  std::vector<double> pred, truth;
  for (std::size_t i = rep.warmup; i < test.size(); ++i) {
    pred.push_back(rep.predictions[i]);
    truth.push_back(test.forces[i]);
  }
  rep.mae = mean_absolute_error(pred, truth);
  rep.pcc = pearson(pred, truth);

  // Forward + backward for single windows.
  const int T = model.seq_len();
  std::vector<double> tt;
  std::vector<float> grad(model.params().size());
  model.visit([&](const auto& net) {
    auto ws = make_ws(net);
    const std::size_t windows = test.window_count(T);
    for (int k = 0; k < timing_samples && windows > 0; ++k) {
      const std::size_t s = (std::size_t(k) * 7919) % windows;
      const float* window = test.intensities.data() + s * sensor::kAScanPixels;
      const auto t0 = Clock::now();
      const float y = net.forward(window, ws);
      net.backward(window, y - test.forces[s + T - 1], grad.data(), ws);
      tt.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
    }
  });
  rep.tt_ms = median(tt);
  return rep;
}

namespace {
constexpr char kCkptMagic[8] = {'N', 'B', 'C', 'K', 'P', 'T', '0', '1'};
}

void save_checkpoint(const std::string& path, const ForceModel& model, const json& extra) {
  json slots = json::array();
  for (const auto& s : model.layout().slots())
    slots.push_back({{"name", s.name}, {"shape", s.shape}, {"offset", s.offset}, {"count", s.count}});
  const json header = {{"format", 1},
                       {"version", kVersion},
                       {"arch", to_string(model.arch())},
                       {"config", model.config_json()},
                       {"param_count", model.params().size()},
                       {"slots", slots},
                       {"dtype", "float32-le"},
                       {"extra", extra}};
  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
  out.write(kCkptMagic, sizeof kCkptMagic);
  const auto len = static_cast<std::uint32_t>(h.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(h.data(), len);
  const auto params = model.params();
  out.write(reinterpret_cast<const char*>(params.data()), static_cast<std::streamsize>(params.size() * sizeof(float)));
  if (!out) throw FormatError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCkptMagic, sizeof magic) != 0) throw FormatError("'" + path + "' is not a checkpoint");
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string h(len, '\0');
  in.read(h.data(), len);
  if (!in) throw FormatError("truncated checkpoint header");
  json header = json::parse(h);
  ForceModel model = ForceModel::from_config(arch_from_string(header.at("arch").get<std::string>()), header.at("config"));
  if (header.at("param_count").get<std::size_t>() != model.params().size())
    throw ShapeMismatch("checkpoint parameter count does not match its architecture");
  const auto& slots = header.at("slots");
  const auto& expected = model.layout().slots();
  if (slots.size() != expected.size()) throw ShapeMismatch("checkpoint slot manifest mismatch");
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (slots[i].at("name") != expected[i].name || slots[i].at("count").get<std::size_t>() != expected[i].count)
      throw ShapeMismatch("checkpoint slot '" + expected[i].name + "' mismatch");
  auto params = model.params();
  in.read(reinterpret_cast<char*>(params.data()), static_cast<std::streamsize>(params.size() * sizeof(float)));
  if (!in) throw FormatError("truncated checkpoint payload");
  return {std::move(model), std::move(header)};
}

}  // namespace needlebench::nn
