#include "needlebench/sensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <omp.h>

namespace needlebench::sensor {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

json SensorConfig::to_json() const {
  return {{"rest_gap_mm", rest_gap_mm},       {"force_scale_n", force_scale_n},
          {"imaging_depth_mm", imaging_depth_mm}, {"peak_amplitude", peak_amplitude},
          {"peak_sigma_px", peak_sigma_px},   {"base_level", base_level},
          {"additive_sigma", additive_sigma}, {"noise", noise},
          {"hysteresis_n", hysteresis_n}};
}

SensorConfig SensorConfig::from_json(const json& j) {
  SensorConfig c;
  c.rest_gap_mm = j.value("rest_gap_mm", c.rest_gap_mm);
  c.force_scale_n = j.value("force_scale_n", c.force_scale_n);
  c.imaging_depth_mm = j.value("imaging_depth_mm", c.imaging_depth_mm);
  c.peak_amplitude = j.value("peak_amplitude", c.peak_amplitude);
  c.peak_sigma_px = j.value("peak_sigma_px", c.peak_sigma_px);
  c.base_level = j.value("base_level", c.base_level);
  c.additive_sigma = j.value("additive_sigma", c.additive_sigma);
  c.noise = j.value("noise", c.noise);
  c.hysteresis_n = j.value("hysteresis_n", c.hysteresis_n);
  return c;
}

double cavity_compression(double f_tip_n, const SensorConfig& cfg) {
  if (f_tip_n < 0.0 || std::isnan(f_tip_n)) throw NegativeForce("tip force must be >= 0");
  return cfg.rest_gap_mm * -std::expm1(-f_tip_n / cfg.force_scale_n);
}

CavityState cavity_for_force(double f_tip_n, const SensorConfig& cfg) {
  return {cfg.rest_gap_mm, cavity_compression(f_tip_n, cfg)};
}

double peak_pixel(double gap_mm, const SensorConfig& cfg) {
  return gap_mm / cfg.imaging_depth_mm * static_cast<double>(kAScanPixels);
}

AScanFrame render_ascan(const CavityState& cavity, Rng& rng, const SensorConfig& cfg) {
  AScanFrame frame;
  const double p = peak_pixel(std::max(0.0, cavity.effective_gap_mm()), cfg);
  const double inv2s2 = 1.0 / (2.0 * cfg.peak_sigma_px * cfg.peak_sigma_px);
  std::exponential_distribution<double> speckle(1.0);
  std::normal_distribution<double> additive(0.0, cfg.additive_sigma);
  for (std::size_t i = 0; i < kAScanPixels; ++i) {
    const double d = static_cast<double>(i) - p;
    double v = cfg.peak_amplitude * std::exp(-d * d * inv2s2);
    if (cfg.noise) {
      v += cfg.base_level * speckle(rng) + additive(rng);
    } else {
      v += cfg.base_level;
    }
    frame.intensities[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return frame;
}

AScanFrame sense(double f_tip_n, Rng& rng, const SensorConfig& cfg) {
  return render_ascan(cavity_for_force(f_tip_n, cfg), rng, cfg);
}

double locate_peak(const AScanFrame& frame, const SensorConfig& cfg) {
  const auto& v = frame.intensities;
  const auto it = std::max_element(v.begin(), v.end());
  const auto i = static_cast<std::size_t>(it - v.begin());
  if (i == 0 || i + 1 == kAScanPixels) return static_cast<double>(i);
  // Three-point Gaussian fit on the baseline-corrected log intensities.
  const auto lg = [&](std::size_t k) { return std::log(std::max(1e-6, double(v[k]) - cfg.base_level)); };
  const double l0 = lg(i - 1), l1 = lg(i), l2 = lg(i + 1);
  const double denom = l0 - 2.0 * l1 + l2;
  if (!(denom < 0.0)) return static_cast<double>(i);
  const double offset = 0.5 * (l0 - l2) / denom;
  return static_cast<double>(i) + std::clamp(offset, -1.0, 1.0);
}

double analytic_force(const AScanFrame& frame, const SensorConfig& cfg) {
  const double gap = locate_peak(frame, cfg) / static_cast<double>(kAScanPixels) * cfg.imaging_depth_mm;
  const double ratio = std::clamp(gap / cfg.rest_gap_mm, 1e-9, 1.0);
  return -cfg.force_scale_n * std::log(ratio);
}

SensorChannel::SensorChannel(SensorConfig cfg, std::uint64_t seed) : cfg_(cfg), rng_(make_rng(seed, 0x5E45)) {}

AScanFrame SensorChannel::sense(double f_tip_n, double t_s) {
  double f = std::max(0.0, f_tip_n);
  if (cfg_.hysteresis_n > 0.0) {
    const double half = 0.5 * cfg_.hysteresis_n;
    if (f > hysteresis_state_n_ + half) hysteresis_state_n_ = f - half;
    if (f < hysteresis_state_n_ - half) hysteresis_state_n_ = std::max(0.0, f + half);
    f = hysteresis_state_n_;
  }
  AScanFrame frame = needlebench::sensor::sense(f, rng_, cfg_);
  frame.t_s = t_s;
  return frame;
}

std::vector<double> cyclic_profile(std::size_t n, double rate_hz, double max_force_n, Rng& rng) {
  std::uniform_real_distribution<double> freq(0.2, 2.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  double f[3], ph[3];
  for (int k = 0; k < 3; ++k) {
    f[k] = freq(rng);
    ph[k] = phase(rng);
  }
  std::vector<double> out(n);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / rate_hz;
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += std::sin(2.0 * std::numbers::pi * f[k] * t + ph[k]);
    out[i] = std::abs(s);
    peak = std::max(peak, out[i]);
  }
  if (peak > 0.0)
    for (double& v : out) v = std::min(max_force_n, v / peak * max_force_n);
  return out;
}

Dataset calibrate(const SensorConfig& cfg, std::size_t n, std::uint64_t seed, double rate_hz, double max_force_n) {
  Dataset ds;
  ds.sensor = cfg;
  ds.seed = seed;
  Rng profile_rng = make_rng(seed, 0xCA11B);
  const auto profile = cyclic_profile(n, rate_hz, max_force_n, profile_rng);
  ds.forces.resize(n);
  ds.times.resize(n);
  ds.intensities.resize(n * kAScanPixels);
  // Each frame draws from its own stream, so the result does not depend on
  // the thread count.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    Rng rng = make_rng(seed, 0x100000 + static_cast<std::uint64_t>(i));
    const auto frame = sense(profile[i], rng, cfg);
    std::copy(frame.intensities.begin(), frame.intensities.end(), ds.intensities.begin() + i * kAScanPixels);
    ds.forces[i] = static_cast<float>(profile[i]);
    ds.times[i] = static_cast<double>(i) / rate_hz;
  }
  return ds;
}

namespace {

constexpr char kMagic[8] = {'N', 'B', 'C', 'A', 'L', 'D', 'S', '1'};

template <class T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("truncated dataset file");
  return v;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write dataset '" + path + "'");
  const std::string header =
      json{{"sensor", ds.sensor.to_json()}, {"seed", ds.seed}, {"profile", ds.profile}, {"version", kVersion},
           {"meta", ds.meta}}
          .dump();
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint64_t>(out, ds.size());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(kAScanPixels));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    put<double>(out, ds.times[i]);
    put<float>(out, ds.forces[i]);
    out.write(reinterpret_cast<const char*>(ds.intensities.data() + i * kAScanPixels),
              static_cast<std::streamsize>(kAScanPixels * sizeof(float)));
  }
  if (!out) throw FormatError("failed writing dataset '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset '" + path + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError("'" + path + "' is not a dataset file");
  const auto header_len = get<std::uint32_t>(in);
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (!in) throw FormatError("truncated dataset header");
  const json h = json::parse(header);
  Dataset ds;
  ds.sensor = SensorConfig::from_json(h.at("sensor"));
  ds.seed = h.at("seed").get<std::uint64_t>();
  ds.profile = h.value("profile", std::string("cyclic"));
  ds.meta = h.value("meta", json::object());
  const auto n = get<std::uint64_t>(in);
  const auto pixels = get<std::uint32_t>(in);
  if (pixels != kAScanPixels) throw FormatError("dataset frames must have 512 pixels");
  ds.times.resize(n);
  ds.forces.resize(n);
  ds.intensities.resize(n * kAScanPixels);
  for (std::size_t i = 0; i < n; ++i) {
    ds.times[i] = get<double>(in);
    ds.forces[i] = get<float>(in);
    in.read(reinterpret_cast<char*>(ds.intensities.data() + i * kAScanPixels),
            static_cast<std::streamsize>(kAScanPixels * sizeof(float)));
    if (!in) throw FormatError("truncated dataset record");
  }
  return ds;
}

}  // namespace needlebench::sensor
