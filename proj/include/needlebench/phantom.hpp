#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "needlebench/common.hpp"

namespace needlebench::phantom {

enum class Material { SkinFoam, Silicone, Gelatin, ExVivoTissue };

std::string_view to_string(Material m);
Material material_from_string(std::string_view s);
inline bool is_skin(Material m) { return m == Material::SkinFoam || m == Material::Silicone; }

struct SlopeRange {
  double min = 0.0;  // N/mm
  double max = 0.0;
  bool operator==(const SlopeRange&) const = default;
};

struct TissueLayer {
  Material material = Material::Gelatin;
  double start_mm = 0.0;
  double end_mm = 0.0;
  double cutting_force_n = 0.0;      // post-puncture plateau
  double stiffness_n_per_mm = 0.0;   // pre-puncture ramp
  double rupture_force_n = 0.0;      // peak before puncture
  SlopeRange friction_slope_n_per_mm;

  double thickness() const { return end_mm - start_mm; }
  bool contains(double depth) const { return depth >= start_mm && depth < end_mm; }
  bool operator==(const TissueLayer&) const = default;
};

struct PhantomSpec {
  std::string name;
  std::vector<TissueLayer> layers;
  double total_depth_mm = 0.0;
  std::uint64_t seed = 0;

  /// Index of the layer containing `depth`; depths at or past the bottom map to the last layer.
  std::size_t layer_index(double depth) const;
  const TissueLayer& layer_at(double depth) const { return layers[layer_index(depth)]; }
  /// Interior boundary depths (excludes 0 and total depth).
  std::vector<double> boundaries() const;
  /// End of the contiguous skin block at the top, 0 when there is none.
  double skin_end_mm() const;
  bool operator==(const PhantomSpec&) const = default;
};

enum class InterfaceKind { Entry, Exit };
std::string_view to_string(InterfaceKind k);

struct InterfaceEvent {
  double depth_mm = 0.0;
  InterfaceKind kind = InterfaceKind::Entry;
  Material from = Material::Gelatin;
  Material to = Material::ExVivoTissue;
  bool operator==(const InterfaceEvent&) const = default;
};

/// Throws ContiguityError / RangeError / SchemaError on invariant violations.
void validate(const PhantomSpec& spec);

/// Material changes where either side is ex-vivo tissue, in depth order.
std::vector<InterfaceEvent> interfaces(const PhantomSpec& spec);

PhantomSpec load_phantom(std::string_view document);
PhantomSpec load_phantom_file(const std::string& path);
nlohmann::json to_json(const PhantomSpec& spec);
std::string serialize(const PhantomSpec& spec);
void save_phantom_file(const PhantomSpec& spec, const std::string& path);

nlohmann::json to_json(const InterfaceEvent& ev);
InterfaceEvent interface_from_json(const nlohmann::json& j);

/// Ranges from which default phantoms draw their per-layer parameters.
struct PhantomDefaults {
  double min_thickness_mm = 10.0;
  double max_thickness_mm = 35.0;
  // skin, tissue, gelatin
  double skin_cutting_n[2] = {0.55, 0.75};
  double tissue_cutting_n[2] = {1.5, 2.1};
  double gelatin_cutting_n[2] = {0.25, 0.45};
  double skin_stiffness = 0.6;
  double tissue_stiffness[2] = {0.45, 0.6};
  double gelatin_stiffness = 0.3;
  double tissue_rupture_extra_n[2] = {0.5, 1.0};  // rupture = cutting + extra
  SlopeRange skin_slope{0.31, 0.45};
  SlopeRange tissue_slope{0.18, 0.54};
  SlopeRange gelatin_slope{-0.35, 0.05};
};

/// Four phantoms with the S, G1, T1, G2, T2, G3 topology.
std::vector<PhantomSpec> default_phantoms(std::uint64_t seed,
                                          const PhantomDefaults& d = {});

/// Single-material phantom, mostly for tests and quick experiments.
PhantomSpec homogeneous(Material m, double depth_mm, double cutting_force_n,
                        SlopeRange slope, std::uint64_t seed = 0);

}  // namespace needlebench::phantom
