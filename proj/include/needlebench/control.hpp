#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "needlebench/mechanics.hpp"
#include "needlebench/nn/model.hpp"
#include "needlebench/phantom.hpp"
#include "needlebench/sensor.hpp"

namespace needlebench::control {

struct ControllerConfig {
  double k_p = 0.5;   // mm/N
  double k_i = 2.0;   // mm/(N s)
  double alpha = 1.0;
  double rate_hz = 200.0;
  double v_max_mm_s = 20.0;
  double integrator_limit_mm = 500.0;  // bound on k_i * I
  double plant_tau_s = 0.0;            // first-order lag of the inner loop, 0 = ideal

  double dt() const { return 1.0 / rate_hz; }
  void validate() const;
  nlohmann::json to_json() const;
  static ControllerConfig from_json(const nlohmann::json& j);
};

struct PiState {
  double integral = 0.0;  // integral of e_F, N s
  double e_prev = 0.0;
  double x_d_mm = 0.0;
};

struct ControlOutput {
  double dx_mm = 0.0;
  double e_f_n = 0.0;
  double x_d_mm = 0.0;
};

/// Clamped force error feeding the PI law.
double force_error(double f_handle_n, double f_tip_est_n, double alpha);

/// One PI admittance tick. The commanded pose is x_d = k_i * int(e_F) + k_p * e_F;
/// the plant follows it forward only, at most v_max * dt per tick.
ControlOutput controller_step(double f_handle_n, double f_tip_est_n, const ControllerConfig& cfg, PiState& pi,
                              double x_mm);

struct ForceSample {
  double t_s = 0.0;
  double depth_mm = 0.0;
  double f_handle_n = 0.0;
  double f_tip_true_n = 0.0;
  double f_tip_est_n = 0.0;
  double f_friction_n = 0.0;
  double f_shaft_n = 0.0;
  double e_f_n = 0.0;
  bool trigger = false;
};

struct InsertionTrace {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ForceSample> samples;
  std::size_t overruns = 0;
};

inline constexpr const char* kTraceColumns =
    "t_s,depth_mm,f_handle_n,f_tip_true_n,f_tip_est_n,f_friction_n,f_shaft_n,e_f_n,trigger";

/// CSV with `#` metadata lines (one JSON object) ahead of the header row.
void write_trace(std::ostream& out, const InsertionTrace& trace);
void save_trace(const std::string& path, const InsertionTrace& trace);
InsertionTrace read_trace(std::istream& in);
InsertionTrace load_trace(const std::string& path);

/// Tip-force estimate from one A-scan.
class Estimator {
 public:
  virtual ~Estimator() = default;
  virtual double estimate(const sensor::AScanFrame& frame) = 0;
  virtual void reset() = 0;
  virtual std::string name() const = 0;
};

class NeuralEstimator final : public Estimator {
 public:
  /// The model must outlive the estimator.
  explicit NeuralEstimator(const nn::ForceModel& model);
  double estimate(const sensor::AScanFrame& frame) override;
  void reset() override { stream_->reset(); }
  std::string name() const override;

 private:
  const nn::ForceModel* model_;
  std::unique_ptr<nn::ForceStream> stream_;
};

class AnalyticEstimator final : public Estimator {
 public:
  explicit AnalyticEstimator(sensor::SensorConfig cfg) : cfg_(cfg) {}
  double estimate(const sensor::AScanFrame& frame) override { return sensor::analytic_force(frame, cfg_); }
  void reset() override {}
  std::string name() const override { return "analytic"; }

 private:
  sensor::SensorConfig cfg_;
};

/// Everything that turns a phantom into force signals.
struct SimConfig {
  mech::NeedleGeometry geometry;
  mech::MechConfig mech;
  sensor::SensorConfig sensor;
  double shaft_noise_n = 0.02;
  double rate_hz = 200.0;
  double max_duration_s = 120.0;  // collaborative runs stop here if the needle stalls
  /// Reuse the previous estimate when inference overruns the tick. Off for
  /// scripted runs so traces do not depend on machine load.
  bool enforce_tick_budget = false;

  nlohmann::json to_json() const;
  static SimConfig from_json(const nlohmann::json& j);
};

struct Observation {
  double t_s = 0.0;
  double depth_mm = 0.0;
  double felt_force_n = 0.0;  // alpha * F_T_est
  double dt_s = 0.0;
};

struct OperatorAction {
  double f_handle_n = 0.0;
  bool trigger = false;
  bool stop = false;
};

class Operator {
 public:
  virtual ~Operator() = default;
  virtual OperatorAction step(const Observation& obs) = 0;
  /// Called before every insertion.
  virtual void reset(std::uint64_t insertion_index) = 0;
  virtual std::string name() const = 0;
  /// Set when the operator has already picked a feedback gain (Remote).
  virtual std::optional<double> chosen_alpha() const { return std::nullopt; }
};

class ConstantForceOperator final : public Operator {
 public:
  explicit ConstantForceOperator(double f_handle_n) : f_(f_handle_n) {}
  OperatorAction step(const Observation&) override { return {f_, false, false}; }
  void reset(std::uint64_t) override {}
  std::string name() const override { return "constant"; }

 private:
  double f_;
};

/// Scripted participant. Pushes to hold a comfortable speed and triggers when
/// the felt force departs from what it has become used to.
struct ReactivePersona {
  std::string name = "reactive";
  double target_velocity_mm_s = 3.0;
  double push_gain = 1.5;          // N per (mm/s) per s
  double max_handle_n = 10.0;
  double tremor_n = 0.05;          // handle force jitter
  double threshold_n = 0.45;       // felt change that is noticed
  double adaptation_tau_s = 0.8;   // how fast the felt force becomes "normal"
  int debounce_ticks = 6;
  double reaction_delay_s = 0.25;
  double refractory_mm = 4.0;
  double ignore_depth_mm = 0.0;    // skin is expected, triggers suppressed above this depth
  double perception_noise_n = 0.05;
  double weber_fraction = 0.0;     // noticeable change grows with the force already felt
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ReactivePersona from_json(const nlohmann::json& j);
};

/// Five participants with different speed, sensitivity and reaction time.
std::vector<ReactivePersona> default_personas(std::uint64_t seed);

class ReactiveOperator final : public Operator {
 public:
  explicit ReactiveOperator(ReactivePersona p);
  OperatorAction step(const Observation& obs) override;
  void reset(std::uint64_t insertion_index) override;
  std::string name() const override { return persona_.name; }
  const ReactivePersona& persona() const { return persona_; }
  void set_ignore_depth(double mm) { persona_.ignore_depth_mm = mm; }

 private:
  ReactivePersona persona_;
  Rng rng_;
  double f_handle_ = 0.0;
  double baseline_ = 0.0;
  double last_depth_ = 0.0;
  double velocity_ = 0.0;
  bool primed_ = false;
  int above_ = 0;
  double last_trigger_depth_ = -1e9;
  std::vector<double> pending_;  // times at which noticed changes turn into triggers
};

/// Bridges asynchronous human input into the tick loop with latest-value
/// semantics. Input older than `deadman_after_s` ramps the handle force down.
class RemoteOperator final : public Operator {
 public:
  explicit RemoteOperator(double alpha, double deadman_after_s = 1.0, double deadman_ramp_s = 0.15);
  /// Thread safe. `t_s` is session time at reception.
  void post(double f_handle_n, bool trigger, std::uint64_t seq, double t_s);
  void request_stop();
  OperatorAction step(const Observation& obs) override;
  void reset(std::uint64_t insertion_index) override;
  std::string name() const override { return "remote"; }
  std::optional<double> chosen_alpha() const override { return alpha_; }
  std::uint64_t last_seq() const;

 private:
  double alpha_, deadman_after_s_, deadman_ramp_s_;
  mutable std::mutex mu_;
  double f_handle_ = 0.0;
  double t_input_ = 0.0;
  bool trigger_latched_ = false;
  bool stop_ = false;
  std::uint64_t seq_ = 0;
};

/// Deadman factor in [0, 1] for input that is `age_s` old.
double deadman_factor(double age_s, double after_s, double ramp_s);

/// Robot-only insertion at constant speed, bypassing the controller.
InsertionTrace run_constant_velocity(const phantom::PhantomSpec& spec, double v_mm_s, double depth_max_mm,
                                     Estimator& estimator, const SimConfig& sim, std::uint64_t seed,
                                     std::uint64_t insertion_index);

/// Incremental session used by both the batch runner and the live service.
class Session {
 public:
  Session(const phantom::PhantomSpec& spec, Estimator& estimator, const ControllerConfig& cfg, const SimConfig& sim,
          std::uint64_t seed, std::uint64_t insertion_index, double depth_max_mm);

  /// Advances one tick. Returns false once the session has ended.
  bool tick(Operator& op);
  /// Explicit retraction outside the controller; tip force reads zero meanwhile.
  void retract(double mm);
  bool finished() const { return finished_; }
  const InsertionTrace& trace() const { return trace_; }
  InsertionTrace take_trace() { return std::move(trace_); }
  double depth_mm() const { return mech_.depth_mm; }
  double velocity_mm_s() const { return mech_.velocity_mm_s; }
  double t_s() const { return t_; }
  double last_felt_n() const { return cfg_.alpha * last_estimate_; }
  const std::string& stop_reason() const { return stop_reason_; }

 private:
  const phantom::PhantomSpec* spec_;
  Estimator* estimator_;
  ControllerConfig cfg_;
  SimConfig sim_;
  double depth_max_;
  mech::MechState mech_;
  PiState pi_;
  sensor::SensorChannel channel_;
  Rng noise_rng_;
  InsertionTrace trace_;
  double t_ = 0.0;
  double last_estimate_ = 0.0;
  double retract_pending_mm_ = 0.0;
  bool finished_ = false;
  std::string stop_reason_;
};

InsertionTrace run_collaborative(const phantom::PhantomSpec& spec, Operator& op, Estimator& estimator,
                                 const ControllerConfig& cfg, const SimConfig& sim, std::uint64_t seed,
                                 std::uint64_t insertion_index, double depth_max_mm);

struct GainTrial {
  double alpha = 0.0;
  bool reached_depth = false;
  double contrast_n = 0.0;  // p95 - p5 of the felt force
  double snr = 0.0;
};

struct GainChoice {
  double alpha = 1.0;
  std::vector<GainTrial> trials;
};

/// Three practice insertions at alpha in {0.5, 1, 2}. Scripted operators keep
/// the gain with the best felt contrast among runs that did not stall.
GainChoice choose_gain(Operator& op, const phantom::PhantomSpec& practice, Estimator& estimator,
                       const ControllerConfig& base, const SimConfig& sim, std::uint64_t seed,
                       double perception_noise_n = 0.05);

}  // namespace needlebench::control
