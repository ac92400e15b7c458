#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "needlebench/phantom.hpp"

namespace needlebench::mech {

struct NeedleGeometry {
  double sheath_outer_diameter_mm = 2.05;
  double tip_protrusion_mm = 5.0;
  double fiber_gap_rest_mm = 0.5;
};

void validate(const NeedleGeometry& g);

struct MechConfig {
  double v_max_mm_s = 20.0;
  double relax_fraction = 0.7;  // friction settles to this fraction of its value at stop
  double relax_tau_s = 2.0;
};

/// Needle state along the insertion axis. Value type; `step` returns a new one.
struct MechState {
  double t_s = 0.0;
  double depth_mm = 0.0;
  double velocity_mm_s = 0.0;
  double max_depth_mm = 0.0;
  /// Indexed by layer: punctured[i] refers to the boundary at the start of layer i.
  /// The surface (i = 0) counts as punctured from the start.
  std::vector<bool> punctured;
  double pending_deformation_mm = 0.0;
  /// Layer whose leading boundary is currently being indented, if any.
  std::optional<std::size_t> indenting_layer;
  /// Friction per unit length drawn for each layer for this insertion.
  std::vector<double> segment_slopes;
  double friction_scale = 1.0;
  double relax_anchor = 1.0;
  bool relaxing = false;

  std::vector<double> punctured_depths(const phantom::PhantomSpec& spec) const;
};

/// Fresh state at the surface with friction slopes drawn from
/// `mix(spec.seed, insertion_index)`.
MechState begin_insertion(const phantom::PhantomSpec& spec, std::uint64_t insertion_index);

MechState step(const MechState& state, double dx_mm, double dt_s, const phantom::PhantomSpec& spec,
               const NeedleGeometry& geometry = {}, const MechConfig& cfg = {});

double tip_force(const MechState& state, const phantom::PhantomSpec& spec, const NeedleGeometry& geometry = {});
double friction_force(const MechState& state, const phantom::PhantomSpec& spec);
double shaft_force(const MechState& state, const phantom::PhantomSpec& spec, const NeedleGeometry& geometry = {});

/// Depth of indentation at which the boundary into `layer` ruptures.
inline double rupture_depth(const phantom::TissueLayer& layer) {
  return layer.rupture_force_n / layer.stiffness_n_per_mm;
}

/// True when entering `next` from `prev` requires indenting a membrane first.
inline bool needs_puncture(const phantom::TissueLayer& prev, const phantom::TissueLayer& next) {
  return next.rupture_force_n > prev.cutting_force_n;
}

}  // namespace needlebench::mech
