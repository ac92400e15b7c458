#include "needlebench/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace needlebench::phantom {

using nlohmann::json;

namespace {

constexpr double kDepthTol = 1e-9;

const json& require(const json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null())
    throw SchemaError("missing field '" + std::string(key) + "' in " + where);
  return *it;
}

double require_number(const json& j, const char* key, const std::string& where) {
  const json& v = require(j, key, where);
  if (!v.is_number()) throw SchemaError("field '" + std::string(key) + "' in " + where + " must be a number");
  return v.get<double>();
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

std::string_view to_string(Material m) {
  switch (m) {
    case Material::SkinFoam: return "SkinFoam";
    case Material::Silicone: return "Silicone";
    case Material::Gelatin: return "Gelatin";
    case Material::ExVivoTissue: return "ExVivoTissue";
  }
  return "?";
}

Material material_from_string(std::string_view s) {
  for (Material m : {Material::SkinFoam, Material::Silicone, Material::Gelatin, Material::ExVivoTissue})
    if (to_string(m) == s) return m;
  throw SchemaError("unknown material '" + std::string(s) + "'");
}

std::string_view to_string(InterfaceKind k) { return k == InterfaceKind::Entry ? "Entry" : "Exit"; }

std::size_t PhantomSpec::layer_index(double depth) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (depth < layers[i].end_mm) return i;
  return layers.empty() ? 0 : layers.size() - 1;
}

std::vector<double> PhantomSpec::boundaries() const {
  std::vector<double> out;
  for (std::size_t i = 1; i < layers.size(); ++i) out.push_back(layers[i].start_mm);
  return out;
}

double PhantomSpec::skin_end_mm() const {
  double end = 0.0;
  for (const auto& l : layers) {
    if (!is_skin(l.material)) break;
    end = l.end_mm;
  }
  return end;
}

void validate(const PhantomSpec& spec) {
  if (spec.layers.empty()) throw SchemaError("phantom '" + spec.name + "' has no layers");
  if (std::abs(spec.layers.front().start_mm) > kDepthTol)
    throw ContiguityError("first layer must start at 0 mm");
  bool has_gelatin = false;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::string where = "layer " + std::to_string(i);
    if (!(l.end_mm > l.start_mm)) throw ContiguityError(where + ": end_mm must exceed start_mm");
    if (i > 0 && std::abs(l.start_mm - spec.layers[i - 1].end_mm) > kDepthTol)
      throw ContiguityError(where + ": starts at " + std::to_string(l.start_mm) + " but previous ends at " +
                            std::to_string(spec.layers[i - 1].end_mm));
    if (!(l.cutting_force_n >= 0.0)) throw RangeError(where + ": cutting force must be >= 0");
    if (!(l.rupture_force_n >= l.cutting_force_n))
      throw RangeError(where + ": rupture force must be >= cutting force");
    if (!(l.stiffness_n_per_mm > 0.0)) throw RangeError(where + ": stiffness must be > 0");
    if (!(l.friction_slope_n_per_mm.min <= l.friction_slope_n_per_mm.max))
      throw RangeError(where + ": friction slope range min > max");
    has_gelatin |= l.material == Material::Gelatin;
  }
  if (std::abs(spec.layers.back().end_mm - spec.total_depth_mm) > kDepthTol)
    throw ContiguityError("last layer must end at total_depth");
  if (!has_gelatin) throw SchemaError("phantom must contain at least one gelatin layer");
  if (interfaces(spec).size() > 4) throw SchemaError("phantom has more than four tissue interfaces");
}

std::vector<InterfaceEvent> interfaces(const PhantomSpec& spec) {
  std::vector<InterfaceEvent> out;
  for (std::size_t i = 1; i < spec.layers.size(); ++i) {
    const Material from = spec.layers[i - 1].material;
    const Material to = spec.layers[i].material;
    if (from == to) continue;
    const bool into_tissue = to == Material::ExVivoTissue;
    const bool out_of_tissue = from == Material::ExVivoTissue;
    if (!into_tissue && !out_of_tissue) continue;
    out.push_back({spec.layers[i].start_mm, into_tissue ? InterfaceKind::Entry : InterfaceKind::Exit, from, to});
  }
  return out;
}

json to_json(const PhantomSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers) {
    layers.push_back({{"material", to_string(l.material)},
                      {"start_mm", l.start_mm},
                      {"end_mm", l.end_mm},
                      {"cutting_force_n", l.cutting_force_n},
                      {"stiffness_n_per_mm", l.stiffness_n_per_mm},
                      {"rupture_force_n", l.rupture_force_n},
                      {"friction_slope_n_per_mm", {l.friction_slope_n_per_mm.min, l.friction_slope_n_per_mm.max}}});
  }
  return {{"name", spec.name}, {"seed", spec.seed}, {"layers", std::move(layers)}};
}

std::string serialize(const PhantomSpec& spec) { return to_json(spec).dump(2) + "\n"; }

PhantomSpec load_phantom(std::string_view document) {
  json j;
  try {
    j = json::parse(document);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("phantom document is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("phantom document must be an object");

  PhantomSpec spec;
  const json& name = require(j, "name", "phantom");
  if (!name.is_string()) throw SchemaError("field 'name' must be a string");
  spec.name = name.get<std::string>();
  const json& seed = require(j, "seed", "phantom");
  if (!seed.is_number_integer()) throw SchemaError("field 'seed' must be an integer");
  spec.seed = seed.get<std::uint64_t>();
  const json& layers = require(j, "layers", "phantom");
  if (!layers.is_array()) throw SchemaError("field 'layers' must be an array");

  for (std::size_t i = 0; i < layers.size(); ++i) {
    const json& lj = layers[i];
    const std::string where = "layer " + std::to_string(i);
    if (!lj.is_object()) throw SchemaError(where + " must be an object");
    TissueLayer l;
    const json& mat = require(lj, "material", where);
    if (!mat.is_string()) throw SchemaError(where + ": material must be a string");
    l.material = material_from_string(mat.get<std::string>());
    l.start_mm = require_number(lj, "start_mm", where);
    l.end_mm = require_number(lj, "end_mm", where);
    l.cutting_force_n = require_number(lj, "cutting_force_n", where);
    l.stiffness_n_per_mm = require_number(lj, "stiffness_n_per_mm", where);
    l.rupture_force_n = require_number(lj, "rupture_force_n", where);
    const json& slope = require(lj, "friction_slope_n_per_mm", where);
    if (!slope.is_array() || slope.size() != 2 || !slope[0].is_number() || !slope[1].is_number())
      throw SchemaError(where + ": friction_slope_n_per_mm must be [min, max]");
    l.friction_slope_n_per_mm = {slope[0].get<double>(), slope[1].get<double>()};
    spec.layers.push_back(l);
  }
  if (!spec.layers.empty()) spec.total_depth_mm = spec.layers.back().end_mm;
  validate(spec);
  return spec;
}

PhantomSpec load_phantom_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open phantom file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return load_phantom(ss.str());
}

void save_phantom_file(const PhantomSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write phantom file '" + path + "'");
  out << serialize(spec);
}

json to_json(const InterfaceEvent& ev) {
  return {{"depth_mm", ev.depth_mm},
          {"kind", to_string(ev.kind)},
          {"from", to_string(ev.from)},
          {"to", to_string(ev.to)}};
}

InterfaceEvent interface_from_json(const json& j) {
  InterfaceEvent ev;
  ev.depth_mm = require_number(j, "depth_mm", "interface");
  const auto kind = require(j, "kind", "interface").get<std::string>();
  if (kind != "Entry" && kind != "Exit") throw SchemaError("interface kind must be Entry or Exit");
  ev.kind = kind == "Entry" ? InterfaceKind::Entry : InterfaceKind::Exit;
  ev.from = material_from_string(require(j, "from", "interface").get<std::string>());
  ev.to = material_from_string(require(j, "to", "interface").get<std::string>());
  return ev;
}

std::vector<PhantomSpec> default_phantoms(std::uint64_t seed, const PhantomDefaults& d) {
  std::vector<PhantomSpec> out;
  for (std::uint64_t p = 0; p < 4; ++p) {
    Rng rng = make_rng(seed, p);
    PhantomSpec spec;
    spec.name = "phantom-" + std::to_string(p + 1);
    spec.seed = mix_seed(seed, 100 + p);

    const Material topology[] = {Material::SkinFoam, Material::Gelatin, Material::ExVivoTissue,
                                 Material::Gelatin,  Material::ExVivoTissue, Material::Gelatin};
    double depth = 0.0;
    for (Material m : topology) {
      TissueLayer l;
      l.material = m;
      l.start_mm = depth;
      // Rounded to 0.1 mm so the generated files read cleanly.
      const double thickness = std::round(uniform(rng, d.min_thickness_mm, d.max_thickness_mm) * 10.0) / 10.0;
      l.end_mm = depth + thickness;
      switch (m) {
        case Material::SkinFoam:
        case Material::Silicone:
          l.cutting_force_n = uniform(rng, d.skin_cutting_n[0], d.skin_cutting_n[1]);
          l.stiffness_n_per_mm = d.skin_stiffness;
          l.rupture_force_n = l.cutting_force_n;
          l.friction_slope_n_per_mm = d.skin_slope;
          break;
        case Material::Gelatin:
          l.cutting_force_n = uniform(rng, d.gelatin_cutting_n[0], d.gelatin_cutting_n[1]);
          l.stiffness_n_per_mm = d.gelatin_stiffness;
          l.rupture_force_n = l.cutting_force_n;
          l.friction_slope_n_per_mm = d.gelatin_slope;
          break;
        case Material::ExVivoTissue:
          l.cutting_force_n = uniform(rng, d.tissue_cutting_n[0], d.tissue_cutting_n[1]);
          l.stiffness_n_per_mm = uniform(rng, d.tissue_stiffness[0], d.tissue_stiffness[1]);
          l.rupture_force_n = l.cutting_force_n + uniform(rng, d.tissue_rupture_extra_n[0], d.tissue_rupture_extra_n[1]);
          l.friction_slope_n_per_mm = d.tissue_slope;
          break;
      }
      spec.layers.push_back(l);
      depth = l.end_mm;
    }
    spec.total_depth_mm = depth;
    validate(spec);
    out.push_back(std::move(spec));
  }
  return out;
}

PhantomSpec homogeneous(Material m, double depth_mm, double cutting_force_n, SlopeRange slope,
                        std::uint64_t seed) {
  PhantomSpec spec;
  spec.name = std::string("homogeneous-") + std::string(to_string(m));
  spec.seed = seed;
  spec.total_depth_mm = depth_mm;
  spec.layers.push_back({m, 0.0, depth_mm, cutting_force_n, 0.5, cutting_force_n, slope});
  validate(spec);
  return spec;
}

}  // namespace needlebench::phantom
