#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "needlebench/common.hpp"

namespace needlebench::sensor {

inline constexpr std::size_t kAScanPixels = 512;

struct SensorConfig {
  double rest_gap_mm = 0.5;
  double force_scale_n = 2.0;  // F_c of the saturating cavity spring
  double imaging_depth_mm = 2.6;
  double peak_amplitude = 0.9;
  double peak_sigma_px = 2.5;
  double base_level = 0.03;
  double additive_sigma = 0.01;
  bool noise = true;            // speckle + additive noise
  double hysteresis_n = 0.0;    // backlash width of the cavity, 0 disables

  nlohmann::json to_json() const;
  static SensorConfig from_json(const nlohmann::json& j);
};

struct CavityState {
  double rest_gap_mm = 0.5;
  double compression_mm = 0.0;
  double effective_gap_mm() const { return rest_gap_mm - compression_mm; }
};

struct AScanFrame {
  std::array<float, kAScanPixels> intensities{};
  double t_s = 0.0;
};

/// Saturating exponential spring: rest_gap * (1 - exp(-f / F_c)).
double cavity_compression(double f_tip_n, const SensorConfig& cfg = {});
CavityState cavity_for_force(double f_tip_n, const SensorConfig& cfg = {});

/// Pixel at which a reflector `gap_mm` away from the fiber appears.
double peak_pixel(double gap_mm, const SensorConfig& cfg = {});

AScanFrame render_ascan(const CavityState& cavity, Rng& rng, const SensorConfig& cfg = {});
AScanFrame sense(double f_tip_n, Rng& rng, const SensorConfig& cfg = {});

/// Classical inverse: sub-pixel peak location followed by the closed-form
/// inverse of the cavity spring. Baseline for the learned regressors.
double locate_peak(const AScanFrame& frame, const SensorConfig& cfg = {});
double analytic_force(const AScanFrame& frame, const SensorConfig& cfg = {});

/// Stateful sensing channel for streams: owns its RNG and the cavity's
/// hysteresis memory.
class SensorChannel {
 public:
  SensorChannel(SensorConfig cfg, std::uint64_t seed);
  AScanFrame sense(double f_tip_n, double t_s);
  const SensorConfig& config() const { return cfg_; }

 private:
  SensorConfig cfg_;
  Rng rng_;
  double hysteresis_state_n_ = 0.0;
};

/// Synchronized frames and force labels, as recorded during calibration.
struct Dataset {
  SensorConfig sensor;
  std::uint64_t seed = 0;
  std::string profile = "cyclic";
  nlohmann::json meta = nlohmann::json::object();  // provenance stamp carried through files
  std::vector<float> intensities;  // n x kAScanPixels, row major
  std::vector<float> forces;
  std::vector<double> times;

  std::size_t size() const { return forces.size(); }
  std::span<const float> frame(std::size_t i) const {
    return {intensities.data() + i * kAScanPixels, kAScanPixels};
  }
  /// Number of length-`window` sequences with stride 1.
  std::size_t window_count(std::size_t window) const {
    return size() >= window ? size() - window + 1 : 0;
  }
};

/// Cyclic force profile: |sum of three sinusoids| scaled to [0, max_force].
std::vector<double> cyclic_profile(std::size_t n, double rate_hz, double max_force_n, Rng& rng);

Dataset calibrate(const SensorConfig& cfg, std::size_t n, std::uint64_t seed, double rate_hz = 200.0,
                  double max_force_n = 5.0);

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace needlebench::sensor
