#include "needlebench/control.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

namespace needlebench::control {

using nlohmann::json;

void ControllerConfig::validate() const {
  if (k_p < 0.0 || k_i < 0.0) throw RangeError("controller gains must be non-negative");
  if (!(alpha > 0.0)) throw RangeError("alpha must be positive");
  if (!(rate_hz > 0.0)) throw RangeError("rate_hz must be positive");
  if (!(v_max_mm_s > 0.0)) throw RangeError("v_max must be positive");
  if (!(integrator_limit_mm > 0.0)) throw RangeError("integrator_limit must be positive");
  if (plant_tau_s < 0.0) throw RangeError("plant_tau must be non-negative");
}

json ControllerConfig::to_json() const {
  return {{"k_p", k_p},
          {"k_i", k_i},
          {"alpha", alpha},
          {"rate_hz", rate_hz},
          {"v_max_mm_s", v_max_mm_s},
          {"integrator_limit_mm", integrator_limit_mm},
          {"plant_tau_s", plant_tau_s}};
}

ControllerConfig ControllerConfig::from_json(const json& j) {
  ControllerConfig c;
  c.k_p = j.value("k_p", c.k_p);
  c.k_i = j.value("k_i", c.k_i);
  c.alpha = j.value("alpha", c.alpha);
  c.rate_hz = j.value("rate_hz", c.rate_hz);
  c.v_max_mm_s = j.value("v_max_mm_s", c.v_max_mm_s);
  c.integrator_limit_mm = j.value("integrator_limit_mm", c.integrator_limit_mm);
  c.plant_tau_s = j.value("plant_tau_s", c.plant_tau_s);
  c.validate();
  return c;
}

double force_error(double f_handle_n, double f_tip_est_n, double alpha) {
  const double fh = std::max(0.0, f_handle_n);
  return std::clamp(fh - alpha * f_tip_est_n, 0.0, fh);
}

ControlOutput controller_step(double f_handle_n, double f_tip_est_n, const ControllerConfig& cfg, PiState& pi,
                              double x_mm) {
  const double dt = cfg.dt();
  const double e = force_error(f_handle_n, f_tip_est_n, cfg.alpha);
  pi.integral += 0.5 * (e + pi.e_prev) * dt;
  if (cfg.k_i > 0.0) pi.integral = std::clamp(pi.integral, -cfg.integrator_limit_mm / cfg.k_i, cfg.integrator_limit_mm / cfg.k_i);
  pi.e_prev = e;
  pi.x_d_mm = cfg.k_i * pi.integral + cfg.k_p * e;

  double gap = pi.x_d_mm - x_mm;
  if (cfg.plant_tau_s > 0.0) gap *= -std::expm1(-dt / cfg.plant_tau_s);
  // The plant never retracts on its own; a commanded pose behind the needle just waits.
  const double dx = std::clamp(gap, 0.0, cfg.v_max_mm_s * dt);
  return {dx, e, pi.x_d_mm};
}

// ---------------------------------------------------------------- traces

void write_trace(std::ostream& out, const InsertionTrace& trace) {
  out << "# " << trace.meta.dump() << "\n" << kTraceColumns << "\n";
  char line[256];
  for (const auto& s : trace.samples) {
    std::snprintf(line, sizeof line, "%.5f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%d\n", s.t_s, s.depth_mm, s.f_handle_n,
                  s.f_tip_true_n, s.f_tip_est_n, s.f_friction_n, s.f_shaft_n, s.e_f_n, s.trigger ? 1 : 0);
    out << line;
  }
}

void save_trace(const std::string& path, const InsertionTrace& trace) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write trace '" + path + "'");
  write_trace(out, trace);
}

InsertionTrace read_trace(std::istream& in) {
  InsertionTrace trace;
  std::string line;
  bool header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto brace = line.find('{');
      if (brace != std::string::npos) {
        trace.meta = json::parse(line.substr(brace));
      }
      continue;
    }
    if (!header) {
      if (line != kTraceColumns) throw FormatError("trace header must be '" + std::string(kTraceColumns) + "'");
      header = true;
      continue;
    }
    ForceSample s;
    int trig = 0;
    const int n = std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%d", &s.t_s, &s.depth_mm, &s.f_handle_n,
                              &s.f_tip_true_n, &s.f_tip_est_n, &s.f_friction_n, &s.f_shaft_n, &s.e_f_n, &trig);
    if (n != 9) throw FormatError("malformed trace row at line " + std::to_string(lineno));
    s.trigger = trig != 0;
    if (!trace.samples.empty() && !(s.t_s > trace.samples.back().t_s))
      throw FormatError("trace timestamps must increase (line " + std::to_string(lineno) + ")");
    trace.samples.push_back(s);
  }
  if (!header) throw FormatError("trace has no header row");
  return trace;
}

InsertionTrace load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open trace '" + path + "'");
  return read_trace(in);
}

// ---------------------------------------------------------------- estimators

NeuralEstimator::NeuralEstimator(const nn::ForceModel& model) : model_(&model), stream_(model.stream()) {}

double NeuralEstimator::estimate(const sensor::AScanFrame& frame) { return stream_->push(frame.intensities.data()); }

std::string NeuralEstimator::name() const { return std::string(nn::to_string(model_->arch())); }

json SimConfig::to_json() const {
  return {{"tip_protrusion_mm", geometry.tip_protrusion_mm},
          {"sheath_outer_diameter_mm", geometry.sheath_outer_diameter_mm},
          {"fiber_gap_rest_mm", geometry.fiber_gap_rest_mm},
          {"v_max_mm_s", mech.v_max_mm_s},
          {"relax_fraction", mech.relax_fraction},
          {"relax_tau_s", mech.relax_tau_s},
          {"sensor", sensor.to_json()},
          {"shaft_noise_n", shaft_noise_n},
          {"rate_hz", rate_hz},
          {"max_duration_s", max_duration_s},
          {"enforce_tick_budget", enforce_tick_budget}};
}

SimConfig SimConfig::from_json(const json& j) {
  SimConfig c;
  c.geometry.tip_protrusion_mm = j.value("tip_protrusion_mm", c.geometry.tip_protrusion_mm);
  c.geometry.sheath_outer_diameter_mm = j.value("sheath_outer_diameter_mm", c.geometry.sheath_outer_diameter_mm);
  c.geometry.fiber_gap_rest_mm = j.value("fiber_gap_rest_mm", c.geometry.fiber_gap_rest_mm);
  c.mech.v_max_mm_s = j.value("v_max_mm_s", c.mech.v_max_mm_s);
  c.mech.relax_fraction = j.value("relax_fraction", c.mech.relax_fraction);
  c.mech.relax_tau_s = j.value("relax_tau_s", c.mech.relax_tau_s);
  if (j.contains("sensor")) c.sensor = sensor::SensorConfig::from_json(j.at("sensor"));
  c.shaft_noise_n = j.value("shaft_noise_n", c.shaft_noise_n);
  c.rate_hz = j.value("rate_hz", c.rate_hz);
  c.max_duration_s = j.value("max_duration_s", c.max_duration_s);
  c.enforce_tick_budget = j.value("enforce_tick_budget", c.enforce_tick_budget);
  mech::validate(c.geometry);
  if (!(c.rate_hz > 0.0) || c.shaft_noise_n < 0.0 || !(c.max_duration_s > 0.0))
    throw RangeError("simulation rate, noise and duration must be positive");
  return c;
}

// ---------------------------------------------------------------- operators

json ReactivePersona::to_json() const {
  return {{"name", name},
          {"target_velocity_mm_s", target_velocity_mm_s},
          {"push_gain", push_gain},
          {"max_handle_n", max_handle_n},
          {"tremor_n", tremor_n},
          {"threshold_n", threshold_n},
          {"adaptation_tau_s", adaptation_tau_s},
          {"debounce_ticks", debounce_ticks},
          {"reaction_delay_s", reaction_delay_s},
          {"refractory_mm", refractory_mm},
          {"ignore_depth_mm", ignore_depth_mm},
          {"perception_noise_n", perception_noise_n},
          {"weber_fraction", weber_fraction},
          {"seed", seed}};
}

ReactivePersona ReactivePersona::from_json(const json& j) {
  ReactivePersona p;
  p.name = j.value("name", p.name);
  p.target_velocity_mm_s = j.value("target_velocity_mm_s", p.target_velocity_mm_s);
  p.push_gain = j.value("push_gain", p.push_gain);
  p.max_handle_n = j.value("max_handle_n", p.max_handle_n);
  p.tremor_n = j.value("tremor_n", p.tremor_n);
  p.threshold_n = j.value("threshold_n", p.threshold_n);
  p.adaptation_tau_s = j.value("adaptation_tau_s", p.adaptation_tau_s);
  p.debounce_ticks = j.value("debounce_ticks", p.debounce_ticks);
  p.reaction_delay_s = j.value("reaction_delay_s", p.reaction_delay_s);
  p.refractory_mm = j.value("refractory_mm", p.refractory_mm);
  p.ignore_depth_mm = j.value("ignore_depth_mm", p.ignore_depth_mm);
  p.perception_noise_n = j.value("perception_noise_n", p.perception_noise_n);
  p.weber_fraction = j.value("weber_fraction", p.weber_fraction);
  p.seed = j.value("seed", p.seed);
  return p;
}

std::vector<ReactivePersona> default_personas(std::uint64_t seed) {
  struct Base {
    double v, thr, tau, delay, weber;
    int debounce;
  };
  const Base bases[] = {
      {3.0, 0.40, 0.8, 0.30, 0.20, 5}, {2.5, 0.50, 1.0, 0.45, 0.25, 6}, {3.5, 0.45, 0.6, 0.38, 0.15, 6},
      {2.0, 0.55, 1.2, 0.52, 0.25, 8}, {4.0, 0.60, 0.7, 0.33, 0.20, 5},
  };
  std::vector<ReactivePersona> out;
  for (std::uint64_t i = 0; i < 5; ++i) {
    Rng rng = make_rng(seed, 0xBE50 + i);
    std::uniform_real_distribution<double> jitter(0.9, 1.1);
    ReactivePersona p;
    p.name = "participant-" + std::to_string(i + 1);
    p.target_velocity_mm_s = bases[i].v * jitter(rng);
    p.threshold_n = bases[i].thr * jitter(rng);
    p.adaptation_tau_s = bases[i].tau * jitter(rng);
    p.reaction_delay_s = bases[i].delay * jitter(rng);
    p.weber_fraction = bases[i].weber;
    p.debounce_ticks = bases[i].debounce;
    p.seed = mix_seed(seed, 0xBE60 + i);
    out.push_back(p);
  }
  return out;
}

ReactiveOperator::ReactiveOperator(ReactivePersona p) : persona_(std::move(p)), rng_(persona_.seed) {}

void ReactiveOperator::reset(std::uint64_t insertion_index) {
  rng_ = make_rng(persona_.seed, insertion_index);
  f_handle_ = 0.0;
  baseline_ = 0.0;
  last_depth_ = 0.0;
  velocity_ = 0.0;
  primed_ = false;
  above_ = 0;
  last_trigger_depth_ = -1e9;
  pending_.clear();
}

OperatorAction ReactiveOperator::step(const Observation& obs) {
  const double dt = obs.dt_s;
  std::normal_distribution<double> unit(0.0, 1.0);
  if (!primed_) {
    primed_ = true;
    last_depth_ = obs.depth_mm;
    baseline_ = obs.felt_force_n;
  }
  const double v_inst = (obs.depth_mm - last_depth_) / dt;
  last_depth_ = obs.depth_mm;
  velocity_ += (v_inst - velocity_) * dt / (0.1 + dt);
  f_handle_ = std::clamp(f_handle_ + persona_.push_gain * (persona_.target_velocity_mm_s - velocity_) * dt, 0.0,
                         persona_.max_handle_n);

  const double perceived = obs.felt_force_n + persona_.perception_noise_n * unit(rng_);
  const double deviation = perceived - baseline_;
  const double noticeable = persona_.threshold_n + persona_.weber_fraction * std::abs(baseline_);
  above_ = std::abs(deviation) > noticeable ? above_ + 1 : 0;
  baseline_ += (perceived - baseline_) * dt / (persona_.adaptation_tau_s + dt);
  if (above_ >= persona_.debounce_ticks && obs.depth_mm > persona_.ignore_depth_mm &&
      obs.depth_mm - last_trigger_depth_ >= persona_.refractory_mm) {
    pending_.push_back(obs.t_s + persona_.reaction_delay_s);
    last_trigger_depth_ = obs.depth_mm;
    above_ = 0;
  }

  OperatorAction act;
  act.f_handle_n = std::max(0.0, f_handle_ + persona_.tremor_n * unit(rng_));
  if (!pending_.empty() && pending_.front() <= obs.t_s + 1e-9) {
    pending_.erase(pending_.begin());
    act.trigger = true;
  }
  return act;
}

double deadman_factor(double age_s, double after_s, double ramp_s) {
  if (age_s <= after_s) return 1.0;
  if (ramp_s <= 0.0) return 0.0;
  return std::max(0.0, 1.0 - (age_s - after_s) / ramp_s);
}

RemoteOperator::RemoteOperator(double alpha, double deadman_after_s, double deadman_ramp_s)
    : alpha_(alpha), deadman_after_s_(deadman_after_s), deadman_ramp_s_(deadman_ramp_s) {}

void RemoteOperator::post(double f_handle_n, bool trigger, std::uint64_t seq, double t_s) {
  std::lock_guard lock(mu_);
  f_handle_ = std::max(0.0, f_handle_n);
  t_input_ = t_s;
  trigger_latched_ = trigger_latched_ || trigger;
  seq_ = seq;
}

void RemoteOperator::request_stop() {
  std::lock_guard lock(mu_);
  stop_ = true;
}

std::uint64_t RemoteOperator::last_seq() const {
  std::lock_guard lock(mu_);
  return seq_;
}

void RemoteOperator::reset(std::uint64_t) {
  std::lock_guard lock(mu_);
  f_handle_ = 0.0;
  t_input_ = 0.0;
  trigger_latched_ = false;
  stop_ = false;
}

OperatorAction RemoteOperator::step(const Observation& obs) {
  std::lock_guard lock(mu_);
  OperatorAction act;
  act.f_handle_n = f_handle_ * deadman_factor(obs.t_s - t_input_, deadman_after_s_, deadman_ramp_s_);
  act.trigger = trigger_latched_;
  act.stop = stop_;
  trigger_latched_ = false;
  return act;
}

// ---------------------------------------------------------------- runs

namespace {

json run_meta(const phantom::PhantomSpec& spec, const char* mode, std::uint64_t seed, std::uint64_t index,
              const std::string& estimator) {
  return {{"version", kVersion},      {"mode", mode},           {"phantom", spec.name},
          {"phantom_seed", spec.seed}, {"seed", seed},          {"insertion", index},
          {"estimator", estimator}};
}

}  // namespace

InsertionTrace run_constant_velocity(const phantom::PhantomSpec& spec, double v_mm_s, double depth_max_mm,
                                     Estimator& estimator, const SimConfig& sim, std::uint64_t seed,
                                     std::uint64_t insertion_index) {
  const double dt = 1.0 / sim.rate_hz;
  if (!(v_mm_s > 0.0) || v_mm_s > sim.mech.v_max_mm_s) throw RangeError("constant velocity must lie in (0, v_max]");
  if (!(depth_max_mm > 0.0)) throw RangeError("depth_max must be positive");

  InsertionTrace trace;
  trace.meta = run_meta(spec, "auto", seed, insertion_index, estimator.name());
  trace.meta["v_mm_s"] = v_mm_s;
  trace.meta["depth_max_mm"] = depth_max_mm;

  mech::MechState state = mech::begin_insertion(spec, insertion_index);
  sensor::SensorChannel channel(sim.sensor, mix_seed(seed, 0x5E450000 + insertion_index));
  Rng noise = make_rng(seed, 0x5AF70000 + insertion_index);
  std::normal_distribution<double> shaft_noise(0.0, sim.shaft_noise_n);
  estimator.reset();

  const double dx = v_mm_s * dt;
  const auto ticks = static_cast<std::size_t>(std::llround(depth_max_mm / dx));
  trace.samples.reserve(ticks);
  for (std::size_t k = 0; k < ticks; ++k) {
    const double t = double(k) * dt;
    ForceSample s;
    s.t_s = t;
    s.depth_mm = state.depth_mm;
    s.f_tip_true_n = mech::tip_force(state, spec, sim.geometry);
    s.f_tip_est_n = estimator.estimate(channel.sense(s.f_tip_true_n, t));
    s.f_friction_n = mech::friction_force(state, spec);
    s.f_shaft_n = mech::shaft_force(state, spec, sim.geometry) + (sim.shaft_noise_n > 0 ? shaft_noise(noise) : 0.0);
    trace.samples.push_back(s);
    state = mech::step(state, dx, dt, spec, sim.geometry, sim.mech);
  }
  return trace;
}

Session::Session(const phantom::PhantomSpec& spec, Estimator& estimator, const ControllerConfig& cfg,
                 const SimConfig& sim, std::uint64_t seed, std::uint64_t insertion_index, double depth_max_mm)
    : spec_(&spec),
      estimator_(&estimator),
      cfg_(cfg),
      sim_(sim),
      depth_max_(depth_max_mm),
      mech_(mech::begin_insertion(spec, insertion_index)),
      channel_(sim.sensor, mix_seed(seed, 0x5E450000 + insertion_index)),
      noise_rng_(make_rng(seed, 0x5AF70000 + insertion_index)) {
  cfg_.validate();
  cfg_.rate_hz = sim.rate_hz;
  cfg_.v_max_mm_s = std::min(cfg_.v_max_mm_s, sim.mech.v_max_mm_s);
  trace_.meta = run_meta(spec, "collab", seed, insertion_index, estimator.name());
  trace_.meta["controller"] = cfg_.to_json();
  trace_.meta["depth_max_mm"] = depth_max_mm;
  estimator_->reset();
}

void Session::retract(double mm) {
  if (mm < 0.0) throw RangeError("retraction distance must be non-negative");
  retract_pending_mm_ += mm;
}

bool Session::tick(Operator& op) {
  if (finished_) return false;
  const double dt = cfg_.dt();
  const std::size_t k = trace_.samples.size();
  t_ = double(k) * dt;

  const double f_true = mech::tip_force(mech_, *spec_, sim_.geometry);
  const auto frame = channel_.sense(f_true, t_);
  const auto t0 = std::chrono::steady_clock::now();
  double est = estimator_->estimate(frame);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (elapsed > dt) {
    ++trace_.overruns;
    if (sim_.enforce_tick_budget && k > 0) est = last_estimate_;
  }
  last_estimate_ = est;

  const OperatorAction act = op.step({t_, mech_.depth_mm, cfg_.alpha * est, dt});
  if (act.stop) {
    finished_ = true;
    stop_reason_ = "operator";
    return false;
  }

  ForceSample s;
  s.t_s = t_;
  s.depth_mm = mech_.depth_mm;
  s.f_handle_n = std::max(0.0, act.f_handle_n);
  s.f_tip_true_n = f_true;
  s.f_tip_est_n = est;
  s.f_friction_n = mech::friction_force(mech_, *spec_);
  std::normal_distribution<double> shaft_noise(0.0, sim_.shaft_noise_n);
  s.f_shaft_n = mech::shaft_force(mech_, *spec_, sim_.geometry) + (sim_.shaft_noise_n > 0 ? shaft_noise(noise_rng_) : 0.0);
  s.trigger = act.trigger;

  double dx = 0.0;
  if (retract_pending_mm_ > 0.0) {
    dx = -std::min({retract_pending_mm_, cfg_.v_max_mm_s * dt, mech_.depth_mm});
    retract_pending_mm_ = std::max(0.0, retract_pending_mm_ + dx);
    if (mech_.depth_mm + dx <= 0.0) retract_pending_mm_ = 0.0;
    // Re-anchor the commanded pose so the needle does not spring back.
    pi_ = PiState{};
    if (cfg_.k_i > 0.0) pi_.integral = (mech_.depth_mm + dx) / cfg_.k_i;
    pi_.x_d_mm = mech_.depth_mm + dx;
  } else {
    const auto out = controller_step(s.f_handle_n, est, cfg_, pi_, mech_.depth_mm);
    dx = out.dx_mm;
    s.e_f_n = out.e_f_n;
  }
  trace_.samples.push_back(s);
  mech_ = mech::step(mech_, dx, dt, *spec_, sim_.geometry, sim_.mech);

  if (mech_.depth_mm >= depth_max_ - 1e-9) {
    finished_ = true;
    stop_reason_ = "depth";
  } else if (double(trace_.samples.size()) * dt >= sim_.max_duration_s) {
    finished_ = true;
    stop_reason_ = "timeout";
  }
  if (finished_) trace_.meta["stop_reason"] = stop_reason_;
  return !finished_;
}

InsertionTrace run_collaborative(const phantom::PhantomSpec& spec, Operator& op, Estimator& estimator,
                                 const ControllerConfig& cfg, const SimConfig& sim, std::uint64_t seed,
                                 std::uint64_t insertion_index, double depth_max_mm) {
  op.reset(insertion_index);
  Session session(spec, estimator, cfg, sim, seed, insertion_index, depth_max_mm);
  while (session.tick(op)) {
  }
  InsertionTrace trace = session.take_trace();
  trace.meta["operator"] = op.name();
  trace.meta["stop_reason"] = session.stop_reason();
  return trace;
}

GainChoice choose_gain(Operator& op, const phantom::PhantomSpec& practice, Estimator& estimator,
                       const ControllerConfig& base, const SimConfig& sim, std::uint64_t seed,
                       double perception_noise_n) {
  GainChoice choice;
  if (auto picked = op.chosen_alpha()) {
    choice.alpha = *picked;
    return choice;
  }
  const double candidates[] = {0.5, 1.0, 2.0};
  const GainTrial* best = nullptr;
  for (std::size_t i = 0; i < 3; ++i) {
    ControllerConfig cfg = base;
    cfg.alpha = candidates[i];
    const auto trace = run_collaborative(practice, op, estimator, cfg, sim, seed, 0xA1FA + i, practice.total_depth_mm);
    std::vector<double> felt;
    felt.reserve(trace.samples.size());
    for (const auto& s : trace.samples) felt.push_back(cfg.alpha * s.f_tip_est_n);
    std::sort(felt.begin(), felt.end());
    GainTrial trial;
    trial.alpha = cfg.alpha;
    trial.reached_depth = trace.meta.value("stop_reason", std::string()) == "depth";
    if (!felt.empty()) {
      const auto at = [&](double q) { return felt[std::min(felt.size() - 1, std::size_t(q * double(felt.size())))]; };
      trial.contrast_n = at(0.95) - at(0.05);
    }
    trial.snr = trial.contrast_n / perception_noise_n;
    choice.trials.push_back(trial);
  }
  for (const auto& t : choice.trials)
    if (t.reached_depth && (!best || t.snr > best->snr)) best = &t;
  choice.alpha = best ? best->alpha : candidates[0];
  return choice;
}

}  // namespace needlebench::control
