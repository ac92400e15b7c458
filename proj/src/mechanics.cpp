#include "needlebench/mechanics.hpp"

#include <algorithm>
#include <cmath>

namespace needlebench::mech {

namespace {
constexpr double kEps = 1e-12;
}

void validate(const NeedleGeometry& g) {
  if (!(g.sheath_outer_diameter_mm > 0.0 && g.tip_protrusion_mm > 0.0 && g.fiber_gap_rest_mm > 0.0))
    throw RangeError("needle geometry values must be positive");
}

std::vector<double> MechState::punctured_depths(const phantom::PhantomSpec& spec) const {
  std::vector<double> out;
  for (std::size_t i = 1; i < punctured.size() && i < spec.layers.size(); ++i)
    if (punctured[i]) out.push_back(spec.layers[i].start_mm);
  return out;
}

MechState begin_insertion(const phantom::PhantomSpec& spec, std::uint64_t insertion_index) {
  MechState s;
  s.punctured.assign(spec.layers.size(), false);
  if (!s.punctured.empty()) s.punctured[0] = true;
  Rng rng = make_rng(spec.seed ^ insertion_index, 0xF51C7);
  for (const auto& l : spec.layers) {
    const auto [lo, hi] = l.friction_slope_n_per_mm;
    s.segment_slopes.push_back(lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng));
  }
  return s;
}

MechState step(const MechState& state, double dx, double dt, const phantom::PhantomSpec& spec,
               const NeedleGeometry& geometry, const MechConfig& cfg) {
  if (!(dt > 0.0)) throw RangeError("step: dt must be positive");
  if (std::abs(dx) > cfg.v_max_mm_s * dt * (1.0 + 1e-9) + kEps)
    throw RangeError("step: |dx| exceeds v_max * dt");
  if (state.depth_mm + dx < -kEps) throw RetractionBelowZero("retraction would move the tip above the surface");

  MechState s = state;
  s.t_s += dt;
  s.depth_mm = std::max(0.0, state.depth_mm + dx);
  s.velocity_mm_s = dx / dt;
  s.max_depth_mm = std::max(s.max_depth_mm, s.depth_mm);

  // Resolve boundaries in depth order. An unpunctured boundary into a stiffer
  // layer holds the tip back until the indentation reaches rupture.
  s.indenting_layer.reset();
  s.pending_deformation_mm = 0.0;
  for (std::size_t i = 1; i < spec.layers.size(); ++i) {
    const double b = spec.layers[i].start_mm;
    if (s.depth_mm < b) break;
    if (s.punctured[i]) continue;
    if (!needs_puncture(spec.layers[i - 1], spec.layers[i])) {
      s.punctured[i] = true;
      continue;
    }
    const double indentation = s.depth_mm - b;
    if (spec.layers[i].stiffness_n_per_mm * indentation >= spec.layers[i].rupture_force_n) {
      s.punctured[i] = true;
      continue;
    }
    s.indenting_layer = i;
    s.pending_deformation_mm = indentation;
    break;
  }

  if (dx == 0.0) {
    if (!s.relaxing) {
      s.relaxing = true;
      s.relax_anchor = s.friction_scale;
    }
    const double target = cfg.relax_fraction * s.relax_anchor;
    s.friction_scale = target + (s.friction_scale - target) * std::exp(-dt / cfg.relax_tau_s);
  } else {
    s.relaxing = false;
    s.friction_scale = 1.0 + (s.friction_scale - 1.0) * std::exp(-dt / cfg.relax_tau_s);
  }
  (void)geometry;
  return s;
}

double tip_force(const MechState& s, const phantom::PhantomSpec& spec, const NeedleGeometry& geometry) {
  if (s.depth_mm <= 0.0 || spec.layers.empty()) return 0.0;
  if (s.velocity_mm_s < 0.0) return 0.0;
  // Inside the channel cut by an earlier, deeper advance there is nothing to cut.
  if (s.depth_mm < s.max_depth_mm - 1e-9) return 0.0;

  if (s.indenting_layer) {
    const std::size_t i = *s.indenting_layer;
    const auto& prev = spec.layers[i - 1];
    const auto& next = spec.layers[i];
    const double ramp = next.stiffness_n_per_mm * s.pending_deformation_mm;
    return std::min(std::max(prev.cutting_force_n, ramp), next.rupture_force_n);
  }

  const std::size_t li = spec.layer_index(s.depth_mm);
  const auto& layer = spec.layers[li];
  if (li > 0) {
    const auto& prev = spec.layers[li - 1];
    const double past = s.depth_mm - layer.start_mm;
    // The protruding tip still carries part of the load of the harder layer
    // until it has fully left it.
    if (s.punctured[li] && prev.cutting_force_n > layer.cutting_force_n && past < geometry.tip_protrusion_mm) {
      const double frac = past / geometry.tip_protrusion_mm;
      return prev.cutting_force_n - frac * (prev.cutting_force_n - layer.cutting_force_n);
    }
  }
  return layer.cutting_force_n;
}

double friction_force(const MechState& s, const phantom::PhantomSpec& spec) {
  double f = 0.0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const double covered = std::clamp(s.depth_mm, l.start_mm, l.end_mm) - l.start_mm;
    if (covered <= 0.0) break;
    f += s.segment_slopes[i] * covered;
  }
  return f * s.friction_scale;
}

double shaft_force(const MechState& s, const phantom::PhantomSpec& spec, const NeedleGeometry& geometry) {
  return std::max(0.0, tip_force(s, spec, geometry) + friction_force(s, spec));
}

}  // namespace needlebench::mech
