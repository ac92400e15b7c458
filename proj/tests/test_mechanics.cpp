#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "needlebench/mechanics.hpp"

using namespace needlebench;
using namespace needlebench::mech;
using phantom::Material;
using phantom::PhantomSpec;
using phantom::SlopeRange;
using phantom::TissueLayer;

namespace {

TissueLayer layer(Material m, double start, double end, double cf, double stiffness, double rupture,
                  SlopeRange slope = {0.0, 0.0}) {
  return {m, start, end, cf, stiffness, rupture, slope};
}

PhantomSpec make(std::vector<TissueLayer> layers, std::uint64_t seed = 11) {
  PhantomSpec p;
  p.name = "m";
  p.seed = seed;
  p.total_depth_mm = layers.back().end_mm;
  p.layers = std::move(layers);
  phantom::validate(p);
  return p;
}

// Gelatin, tissue (rupture 2.5 N at 0.5 N/mm), gelatin.
PhantomSpec gtg() {
  return make({layer(Material::Gelatin, 0, 20, 0.4, 0.3, 0.4),
               layer(Material::ExVivoTissue, 20, 40, 1.8, 0.5, 2.5),
               layer(Material::Gelatin, 40, 80, 0.4, 0.3, 0.4)});
}

MechState advance(MechState s, const PhantomSpec& p, double to_depth, double dx = 0.01, double dt = 0.002) {
  while (s.depth_mm < to_depth - 1e-12) s = step(s, std::min(dx, to_depth - s.depth_mm), dt, p);
  return s;
}

double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sxy += (x[i] - mx) * (y[i] - my), sxx += (x[i] - mx) * (x[i] - mx);
  return sxy / sxx;
}

}  // namespace

TEST_CASE("step examples") {
  const auto gel = phantom::homogeneous(Material::Gelatin, 100, 0.4, {-0.1, 0.1});
  auto s0 = begin_insertion(gel, 0);
  auto s1 = step(s0, 5.0, 0.25, gel);
  CHECK(s1.depth_mm == 5.0);
  CHECK(s1.pending_deformation_mm == 0.0);
  CHECK_FALSE(s1.indenting_layer.has_value());
  CHECK(s1.velocity_mm_s == doctest::Approx(20.0));

  auto s2 = step(s1, 0.0, 0.1, gel);
  CHECK(s2.depth_mm == s1.depth_mm);
  CHECK(s2.punctured == s1.punctured);
  CHECK(s2.pending_deformation_mm == s1.pending_deformation_mm);
  CHECK(s2.velocity_mm_s == 0.0);
  CHECK(s2.t_s == doctest::Approx(s1.t_s + 0.1));

  CHECK_THROWS_AS(step(s1, -6.0, 1.0, gel), RetractionBelowZero);
  CHECK_THROWS_AS(step(s1, 1.0, 0.0, gel), RangeError);
  CHECK_THROWS_AS(step(s1, 3.0, 0.1, gel), RangeError);  // faster than v_max
}

TEST_CASE("boundary ruptures after rupture_force / stiffness of indentation") {
  const auto p = gtg();
  auto s = begin_insertion(p, 0);
  double punctured_at = -1.0, peak = 0.0;
  while (s.depth_mm < 30.0) {
    s = step(s, 0.01, 0.002, p);
    peak = std::max(peak, tip_force(s, p));
    if (punctured_at < 0 && s.punctured[1]) punctured_at = s.depth_mm;
  }
  CHECK(punctured_at - 20.0 == doctest::Approx(5.0).epsilon(0.005));
  CHECK(peak <= 2.5 + 1e-12);
  CHECK(peak > 2.45);
}

TEST_CASE("tip force examples") {
  const auto p = gtg();
  auto s = begin_insertion(p, 0);
  CHECK(tip_force(s, p) == 0.0);

  s = advance(s, p, 10.0);
  CHECK(tip_force(s, p) == doctest::Approx(0.4));
  s = advance(s, p, 32.0);  // mid tissue, well past rupture
  CHECK(tip_force(s, p) == doctest::Approx(1.8));
  s = advance(s, p, 42.5);  // 2.5 mm past the T->G boundary
  CHECK(tip_force(s, p) == doctest::Approx(1.8 - (2.5 / 5.0) * 1.4));
  CHECK(tip_force(s, p) == doctest::Approx(1.1));
  s = advance(s, p, 46.0);
  CHECK(tip_force(s, p) == doctest::Approx(0.4));
}

TEST_CASE("friction examples") {
  const auto p = make({layer(Material::SkinFoam, 0, 10, 0.6, 0.6, 0.6, {0.38, 0.38}),
                       layer(Material::Gelatin, 10, 30, 0.4, 0.3, 0.4, {-0.15, -0.15})});
  auto s = begin_insertion(p, 0);
  CHECK(friction_force(s, p) == 0.0);
  CHECK(shaft_force(s, p) == 0.0);
  s = advance(s, p, 10.0);
  CHECK(friction_force(s, p) == doctest::Approx(3.8));
  s = advance(s, p, 20.0);
  // 10 mm of gelatin at -0.15 N/mm on top of the skin's 3.8 N
  CHECK(friction_force(s, p) - 3.8 == doctest::Approx(-1.5));
}

TEST_CASE("shaft force is the floored sum") {
  const auto p = make({layer(Material::Gelatin, 0, 40, 0.4, 0.3, 0.4, {-0.1, -0.1})});
  auto s = advance(begin_insertion(p, 0), p, 10.0);
  CHECK(tip_force(s, p) == doctest::Approx(0.4));
  CHECK(friction_force(s, p) == doctest::Approx(-1.0));
  CHECK(shaft_force(s, p) == 0.0);

  const auto q = make({layer(Material::Gelatin, 0, 20, 0.4, 0.3, 0.4, {0.22, 0.22}),
                       layer(Material::ExVivoTissue, 20, 40, 1.8, 0.5, 2.5)});
  s = advance(begin_insertion(q, 0), q, 30.0);
  // tip 1.8 N + friction 20 mm * 0.22 N/mm - nothing from tissue
  CHECK(shaft_force(s, q) == doctest::Approx(1.8 + 4.4));

  for (const auto& spec : phantom::default_phantoms(4)) {
    auto t = begin_insertion(spec, 2);
    while (t.depth_mm < spec.total_depth_mm - 0.02) {
      t = step(t, 0.01, 0.002, spec);
      REQUIRE(shaft_force(t, spec) >= 0.0);
    }
  }
}

TEST_CASE("segment slopes are drawn per insertion inside each layer's range") {
  const auto spec = phantom::default_phantoms(3)[0];
  const auto a = begin_insertion(spec, 5);
  CHECK(a.segment_slopes == begin_insertion(spec, 5).segment_slopes);
  CHECK(a.segment_slopes != begin_insertion(spec, 6).segment_slopes);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    CHECK(a.segment_slopes[i] >= spec.layers[i].friction_slope_n_per_mm.min);
    CHECK(a.segment_slopes[i] <= spec.layers[i].friction_slope_n_per_mm.max);
  }
}

TEST_CASE("friction OLS slope per segment equals the drawn slope") {
  for (const auto& spec : phantom::default_phantoms(9)) {
    auto s = begin_insertion(spec, 1);
    std::vector<std::vector<double>> xs(spec.layers.size()), ys(spec.layers.size());
    while (s.depth_mm < spec.total_depth_mm - 0.05) {
      s = step(s, 0.01, 0.002, spec);
      const std::size_t li = spec.layer_index(s.depth_mm);
      const auto& l = spec.layers[li];
      if (s.depth_mm - l.start_mm > 0.05 && l.end_mm - s.depth_mm > 0.05) {
        xs[li].push_back(s.depth_mm);
        ys[li].push_back(friction_force(s, spec));
      }
    }
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      if (xs[i].size() < 10) continue;
      CHECK(std::abs(ols_slope(xs[i], ys[i]) - s.segment_slopes[i]) < 1e-9);
    }
  }
}

TEST_CASE("relaxation at rest settles toward a fraction of the friction") {
  const auto p = make({layer(Material::SkinFoam, 0, 10, 0.6, 0.6, 0.6, {0.4, 0.4}),
                       layer(Material::Gelatin, 10, 50, 0.4, 0.3, 0.4, {0.1, 0.1})});
  auto s = advance(begin_insertion(p, 0), p, 20.0);
  const double f0 = friction_force(s, p);
  auto r = step(s, 0.0, 2.0, p);  // one time constant
  CHECK(friction_force(r, p) == doctest::Approx(f0 * (0.7 + 0.3 * std::exp(-1.0))));
  for (int i = 0; i < 100; ++i) r = step(r, 0.0, 1.0, p);
  CHECK(friction_force(r, p) == doctest::Approx(0.7 * f0));
  CHECK(r.depth_mm == s.depth_mm);
}

TEST_CASE("punctures persist and a re-approach has no ramp") {
  const auto p = gtg();
  auto s = advance(begin_insertion(p, 0), p, 28.0);
  REQUIRE(s.punctured[1]);
  const auto punctured = s.punctured;
  for (int i = 0; i < 500; ++i) {
    s = step(s, -0.01, 0.002, p);
    CHECK(tip_force(s, p) == 0.0);
  }
  CHECK(s.depth_mm == doctest::Approx(23.0));
  while (s.depth_mm < 27.99) {
    s = step(s, 0.01, 0.002, p);
    CHECK(s.pending_deformation_mm == 0.0);
    for (std::size_t i = 0; i < punctured.size(); ++i)
      if (punctured[i]) CHECK(s.punctured[i]);
  }
  s = advance(s, p, 30.0);
  CHECK(tip_force(s, p) == doctest::Approx(1.8));
}

TEST_CASE("constant velocity: determinism, bounds and where the tip force exceeds 1 N") {
  const NeedleGeometry g;
  for (const auto& spec : phantom::default_phantoms(21)) {
    double max_rupture = 0.0;
    for (const auto& l : spec.layers) max_rupture = std::max(max_rupture, l.rupture_force_n);
    const auto ev = phantom::interfaces(spec);
    REQUIRE(ev.size() == 4);

    std::vector<double> run1, run2;
    for (auto* out : {&run1, &run2}) {
      auto s = begin_insertion(spec, 3);
      while (s.depth_mm < spec.total_depth_mm - 0.01) {
        s = step(s, 0.025, 0.005, spec);  // 5 mm/s at 200 Hz
        const double f = tip_force(s, spec);
        out->push_back(f);
        out->push_back(friction_force(s, spec));
        CHECK(f <= max_rupture + 1e-12);
        if (f > 1.0 && out == &run1) {
          bool inside = false;
          for (std::size_t k = 0; k + 1 < ev.size(); k += 2) {
            const double d_star = rupture_depth(spec.layer_at(ev[k].depth_mm + 1e-6));
            inside |= s.depth_mm >= ev[k].depth_mm && s.depth_mm <= ev[k + 1].depth_mm + g.tip_protrusion_mm + d_star;
          }
          CHECK(inside);
        }
      }
    }
    CHECK(run1 == run2);
  }
}
