#include "needlebench/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "needlebench/nn/train.hpp"

namespace needlebench::analysis {

using nlohmann::json;
using phantom::InterfaceKind;

std::string_view to_string(EventSource s) { return s == EventSource::Threshold ? "threshold" : "trigger"; }

json ThresholdConfig::to_json() const {
  return {{"threshold_n", threshold_n},
          {"hysteresis_n", hysteresis_n},
          {"debounce_ticks", debounce_ticks},
          {"use_true_force", use_true_force}};
}

std::vector<DetectionEvent> detect_threshold(const control::InsertionTrace& trace, const ThresholdConfig& cfg) {
  std::vector<DetectionEvent> events;
  const double rise = cfg.threshold_n + 0.5 * cfg.hysteresis_n;
  const double fall = cfg.threshold_n - 0.5 * cfg.hysteresis_n;
  bool above = false;
  int run = 0;
  for (const auto& s : trace.samples) {
    const double f = cfg.use_true_force ? s.f_tip_true_n : s.f_tip_est_n;
    const bool crossing = above ? f < fall : f > rise;
    run = crossing ? run + 1 : 0;
    if (run < std::max(1, cfg.debounce_ticks)) continue;
    above = !above;
    run = 0;
    if (s.depth_mm <= cfg.suppress_above_mm) continue;
    events.push_back({s.depth_mm, above ? InterfaceKind::Entry : InterfaceKind::Exit, EventSource::Threshold, s.t_s});
  }
  return events;
}

std::vector<DetectionEvent> user_triggers(const control::InsertionTrace& trace, double suppress_above_mm) {
  std::vector<DetectionEvent> events;
  bool prev = false;
  for (const auto& s : trace.samples) {
    if (s.trigger && !prev && s.depth_mm > suppress_above_mm)
      events.push_back({s.depth_mm, InterfaceKind::Entry, EventSource::UserTrigger, s.t_s});
    prev = s.trigger;
  }
  return events;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / double(v.size());
}

double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / double(v.size() - 1));
}

json KindStats::to_json() const {
  return {{"total", total}, {"detected", detected}, {"mean_mm", mean_mm}, {"sd_mm", sd_mm}};
}

namespace {

void finish_report(DetectionReport& r) {
  std::vector<double> entry, exit;
  r.entry = {};
  r.exit = {};
  r.distances_mm.clear();
  r.missed.clear();
  std::size_t detected = 0;
  for (const auto& m : r.matches) {
    KindStats& k = m.truth.kind == InterfaceKind::Entry ? r.entry : r.exit;
    ++k.total;
    if (!m.event) {
      r.missed.push_back(m.truth);
      continue;
    }
    ++k.detected;
    ++detected;
    r.distances_mm.push_back(m.distance_mm);
    (m.truth.kind == InterfaceKind::Entry ? entry : exit).push_back(m.distance_mm);
  }
  r.entry.mean_mm = mean(entry);
  r.entry.sd_mm = sample_sd(entry);
  r.exit.mean_mm = mean(exit);
  r.exit.sd_mm = sample_sd(exit);
  r.detection_rate = r.matches.empty() ? 0.0 : double(detected) / double(r.matches.size());
}

}  // namespace

DetectionReport match_events(const std::vector<DetectionEvent>& events,
                             const std::vector<phantom::InterfaceEvent>& truth, double max_match_mm, MatchRule rule,
                             double anticipation_mm) {
  DetectionReport r;
  std::vector<bool> used(events.size(), false);
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const auto& t = truth[k];
    InterfaceMatch m;
    m.ordinal = k;
    m.truth = t;
    double lo = t.depth_mm - max_match_mm, hi = t.depth_mm + max_match_mm;
    if (rule == MatchRule::Causal) {
      lo = t.depth_mm - anticipation_mm;
      if (k + 1 < truth.size()) hi = std::min(hi, truth[k + 1].depth_mm - anticipation_mm);
    }
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < events.size(); ++i) {
      if (used[i]) continue;
      if (events[i].source == EventSource::Threshold && events[i].kind != t.kind) continue;
      const double d = events[i].depth_mm;
      if (d < lo || d > hi) continue;
      if (rule == MatchRule::Causal && d >= hi && k + 1 < truth.size()) continue;
      const bool better = !best || (rule == MatchRule::Nearest
                                        ? std::abs(d - t.depth_mm) < std::abs(events[*best].depth_mm - t.depth_mm)
                                        : d < events[*best].depth_mm);
      if (better) best = i;
    }
    if (best) {
      used[*best] = true;
      m.event = events[*best];
      m.distance_mm = std::abs(events[*best].depth_mm - t.depth_mm);
      m.lag_mm = events[*best].depth_mm - t.depth_mm;
    }
    r.matches.push_back(m);
  }
  r.unmatched_events = static_cast<std::size_t>(std::count(used.begin(), used.end(), false));
  finish_report(r);
  return r;
}

DetectionReport pool_reports(const std::vector<DetectionReport>& reports) {
  DetectionReport pooled;
  for (const auto& r : reports) {
    pooled.matches.insert(pooled.matches.end(), r.matches.begin(), r.matches.end());
    pooled.unmatched_events += r.unmatched_events;
  }
  finish_report(pooled);
  return pooled;
}

json DetectionReport::to_json() const {
  json matches_j = json::array();
  for (const auto& m : matches) {
    json j = {{"ordinal", m.ordinal}, {"truth", phantom::to_json(m.truth)}, {"detected", m.event.has_value()}};
    if (m.event) {
      j["event_depth_mm"] = m.event->depth_mm;
      j["distance_mm"] = m.distance_mm;
      j["lag_mm"] = m.lag_mm;
    }
    matches_j.push_back(std::move(j));
  }
  json missed_j = json::array();
  for (const auto& e : missed) missed_j.push_back(phantom::to_json(e));
  return {{"detection_rate", detection_rate}, {"distances_mm", distances_mm},  {"missed", missed_j},
          {"unmatched_events", unmatched_events}, {"entry", entry.to_json()}, {"exit", exit.to_json()},
          {"matches", matches_j}};
}

json SegmentSlope::to_json() const {
  return {{"layer", layer},
          {"material", phantom::to_string(material)},
          {"start_mm", start_mm},
          {"end_mm", end_mm},
          {"slope_n_per_mm", slope ? json(*slope) : json(nullptr)},
          {"samples", samples},
          {"excluded", excluded}};
}

std::vector<SegmentSlope> friction_regression(const control::InsertionTrace& trace, const phantom::PhantomSpec& spec,
                                              const FrictionOptions& opts) {
  // A reading counts only inside a sustained run above the floor guard. Lone
  // noise spikes while the sensor sits on its floor would otherwise enter the
  // fit with large leverage, and readings next to a floored stretch are
  // biased by which noise draws happened to clear the guard.
  const auto& samples = trace.samples;
  std::vector<char> usable(samples.size(), 1);
  if (!opts.use_friction_column) {
    for (std::size_t i = 0; i < samples.size();) {
      if (samples[i].f_shaft_n <= opts.floor_guard_n) {
        usable[i++] = 0;
        continue;
      }
      std::size_t j = i;
      while (j < samples.size() && samples[j].f_shaft_n > opts.floor_guard_n) ++j;
      const std::size_t lo = i == 0 ? i : std::min(j, i + opts.floor_trim);
      const std::size_t hi = j == samples.size() ? j : (j - i > opts.floor_trim ? j - opts.floor_trim : i);
      for (std::size_t k = i; k < j; ++k) usable[k] = j - i >= opts.floor_min_run && k >= lo && k < hi;
      i = j;
    }
  }

  std::vector<SegmentSlope> out;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const auto& layer = spec.layers[li];
    SegmentSlope seg;
    seg.layer = li;
    seg.material = layer.material;
    seg.start_mm = layer.start_mm;
    seg.end_mm = layer.end_mm;
    // Centered sums keep the fit well conditioned at large depths.
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.depth_mm < layer.start_mm || s.depth_mm >= layer.end_mm || s.depth_mm <= 0.0) continue;
      double f;
      if (opts.use_friction_column) {
        f = s.f_friction_n;
      } else {
        if (!usable[i]) {
          ++seg.excluded;
          continue;
        }
        f = s.f_shaft_n - (opts.use_true_tip ? s.f_tip_true_n : s.f_tip_est_n);
      }
      pts.emplace_back(s.depth_mm, f);
    }
    seg.samples = pts.size();
    if (pts.size() < opts.min_samples) {
      if (!opts.skip_degenerate)
        throw DegenerateSegment("segment " + std::to_string(li) + " (" + std::string(phantom::to_string(layer.material)) +
                                ") has " + std::to_string(pts.size()) + " usable samples");
      out.push_back(seg);
      continue;
    }
    double mx = 0.0, my = 0.0;
    for (const auto& [x, y] : pts) {
      mx += x;
      my += y;
    }
    mx /= double(pts.size());
    my /= double(pts.size());
    double sxy = 0.0, sxx = 0.0;
    for (const auto& [x, y] : pts) {
      sxy += (x - mx) * (y - my);
      sxx += (x - mx) * (x - mx);
    }
    if (sxx <= 0.0) {
      if (!opts.skip_degenerate) throw DegenerateSegment("segment " + std::to_string(li) + " spans no depth");
    } else {
      seg.slope = sxy / sxx;
    }
    out.push_back(seg);
  }
  return out;
}

std::vector<MaterialStats> material_table(const std::vector<SegmentSlope>& slopes) {
  std::map<int, std::vector<double>> by;
  for (const auto& s : slopes)
    if (s.slope) by[static_cast<int>(s.material)].push_back(*s.slope);
  std::vector<MaterialStats> out;
  for (const auto& [m, v] : by) {
    MaterialStats st;
    st.material = static_cast<phantom::Material>(m);
    st.segments = v.size();
    st.mean = mean(v);
    st.sd = sample_sd(v);
    st.min = *std::min_element(v.begin(), v.end());
    st.max = *std::max_element(v.begin(), v.end());
    out.push_back(st);
  }
  return out;
}

json to_json(const std::vector<MaterialStats>& table) {
  json j = json::array();
  for (const auto& s : table)
    j.push_back({{"material", phantom::to_string(s.material)},
                 {"segments", s.segments},
                 {"mean", s.mean},
                 {"sd", s.sd},
                 {"min", s.min},
                 {"max", s.max}});
  return j;
}

std::string format_material_table(const std::vector<MaterialStats>& table) {
  std::string out;
  char buf[64];
  out += "Material";
  for (const auto& s : table) {
    std::snprintf(buf, sizeof buf, " | %16s", std::string(phantom::to_string(s.material)).c_str());
    out += buf;
  }
  out += "\nMean    ";
  for (const auto& s : table) {
    std::snprintf(buf, sizeof buf, "%.2f (%.2f)", s.mean, s.sd);
    std::string cell = buf;
    std::snprintf(buf, sizeof buf, " | %16s", cell.c_str());
    out += buf;
  }
  out += "\nMin     ";
  for (const auto& s : table) {
    std::snprintf(buf, sizeof buf, " | %16.2f", s.min);
    out += buf;
  }
  out += "\nMax     ";
  for (const auto& s : table) {
    std::snprintf(buf, sizeof buf, " | %16.2f", s.max);
    out += buf;
  }
  out += "\n";
  return out;
}

namespace {

std::string interface_label(const phantom::InterfaceEvent& e, std::size_t ordinal) {
  // Entry k goes into tissue layer k + 1; exits come back into gelatin.
  const std::size_t n = ordinal / 2 + 1;
  return e.kind == InterfaceKind::Entry ? "G" + std::to_string(n) + "->T" + std::to_string(n)
                                        : "T" + std::to_string(n) + "->G" + std::to_string(n + 1);
}

std::string mean_sd_cell(const std::vector<double>& v) {
  if (v.empty()) return "-";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.2f (%.2f)", mean(v), sample_sd(v));
  return buf;
}

}  // namespace

std::string format_detection_table(const std::vector<std::pair<std::string, DetectionReport>>& rows) {
  std::size_t columns = 0;
  std::vector<std::string> labels;
  for (const auto& [name, r] : rows)
    for (const auto& m : r.matches) {
      if (m.ordinal >= columns) {
        columns = m.ordinal + 1;
        labels.resize(columns);
      }
      labels[m.ordinal] = interface_label(m.truth, m.ordinal);
    }
  std::string out;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-16s %6s", "participant", "DR");
  out += buf;
  for (const auto& l : labels) {
    std::snprintf(buf, sizeof buf, " %14s", l.c_str());
    out += buf;
  }
  out += "           Mean\n";
  std::vector<std::vector<double>> column_all(columns);
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-16s %5.0f%%", name.c_str(), 100.0 * r.detection_rate);
    out += buf;
    std::vector<std::vector<double>> col(columns);
    for (const auto& m : r.matches)
      if (m.event) col[m.ordinal].push_back(m.distance_mm);
    for (std::size_t c = 0; c < columns; ++c) {
      std::snprintf(buf, sizeof buf, " %14s", mean_sd_cell(col[c]).c_str());
      out += buf;
      column_all[c].insert(column_all[c].end(), col[c].begin(), col[c].end());
    }
    std::snprintf(buf, sizeof buf, " %14s\n", mean_sd_cell(r.distances_mm).c_str());
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%-16s %6s", "Mean", "");
  out += buf;
  for (const auto& c : column_all) {
    std::snprintf(buf, sizeof buf, " %14s", mean_sd_cell(c).c_str());
    out += buf;
  }
  out += "\n";
  return out;
}

namespace {

const phantom::PhantomSpec& find_phantom(const TraceSet& set, const control::InsertionTrace& t) {
  const std::string name = t.meta.value("phantom", std::string());
  for (const auto& p : set.phantoms)
    if (p.name == name) return p;
  throw SchemaError("no phantom named '" + name + "' for trace");
}

json plot_series(const control::InsertionTrace& t, std::size_t stride) {
  json depth = json::array(), time = json::array(), tip = json::array(), est = json::array(), shaft = json::array(),
       friction = json::array(), trigger = json::array();
  for (std::size_t i = 0; i < t.samples.size(); i += std::max<std::size_t>(1, stride)) {
    const auto& s = t.samples[i];
    depth.push_back(s.depth_mm);
    time.push_back(s.t_s);
    tip.push_back(s.f_tip_true_n);
    est.push_back(s.f_tip_est_n);
    shaft.push_back(s.f_shaft_n);
    friction.push_back(s.f_friction_n);
  }
  for (const auto& s : t.samples)
    if (s.trigger) trigger.push_back({{"t_s", s.t_s}, {"depth_mm", s.depth_mm}});
  return {{"phantom", t.meta.value("phantom", std::string())},
          {"insertion", t.meta.value("insertion", 0)},
          {"depth_mm", depth},
          {"t_s", time},
          {"f_tip_true_n", tip},
          {"f_tip_est_n", est},
          {"f_shaft_n", shaft},
          {"f_friction_n", friction},
          {"triggers", trigger}};
}

json lag_block(const std::vector<DetectionReport>& reports) {
  std::vector<double> entry, exit;
  for (const auto& r : reports)
    for (const auto& m : r.matches)
      if (m.event) (m.truth.kind == InterfaceKind::Entry ? entry : exit).push_back(m.lag_mm);
  const DetectionReport pooled = pool_reports(reports);
  return {{"detection_rate", pooled.detection_rate},
          {"entry_lag_mm", {{"mean", mean(entry)}, {"sd", sample_sd(entry)}, {"n", entry.size()},
                            {"min", entry.empty() ? 0.0 : *std::min_element(entry.begin(), entry.end())},
                            {"max", entry.empty() ? 0.0 : *std::max_element(entry.begin(), entry.end())}}},
          {"exit_lag_mm", {{"mean", mean(exit)}, {"sd", sample_sd(exit)}, {"n", exit.size()},
                           {"min", exit.empty() ? 0.0 : *std::min_element(exit.begin(), exit.end())},
                           {"max", exit.empty() ? 0.0 : *std::max_element(exit.begin(), exit.end())}}},
          {"missed", pooled.missed.size()}};
}

}  // namespace

json summarize(const TraceSet& set, const SummaryOptions& opts) {
  json report = json::object();
  if (set.traces.empty()) return report;

  std::vector<DetectionReport> est_reports, true_reports;
  std::vector<SegmentSlope> slopes;
  json per_insertion = json::array();
  std::vector<double> pred, truth;
  const control::InsertionTrace* first_auto = nullptr;
  const control::InsertionTrace* first_collab = nullptr;

  std::vector<std::string> operator_order;
  std::map<std::string, std::vector<DetectionReport>> by_operator;

  for (const auto& t : set.traces) {
    const auto& spec = find_phantom(set, t);
    const auto truth_events = phantom::interfaces(spec);
    const double skin = spec.skin_end_mm();
    for (const auto& s : t.samples) {
      pred.push_back(s.f_tip_est_n);
      truth.push_back(s.f_tip_true_n);
    }
    const std::string mode = t.meta.value("mode", std::string("auto"));
    if (mode == "auto") {
      if (!first_auto) first_auto = &t;
      ThresholdConfig th = opts.threshold;
      th.suppress_above_mm = skin;
      th.use_true_force = false;
      est_reports.push_back(match_events(detect_threshold(t, th), truth_events, opts.max_match_mm));
      th.use_true_force = true;
      true_reports.push_back(match_events(detect_threshold(t, th), truth_events, opts.max_match_mm));
      FrictionOptions fo = opts.friction;
      fo.skip_degenerate = true;
      auto segs = friction_regression(t, spec, fo);
      json segs_j = json::array();
      for (const auto& s : segs) segs_j.push_back(s.to_json());
      per_insertion.push_back({{"phantom", spec.name},
                               {"insertion", t.meta.value("insertion", 0)},
                               {"segments", segs_j},
                               {"threshold_est", est_reports.back().to_json()}});
      slopes.insert(slopes.end(), segs.begin(), segs.end());
    } else {
      if (!first_collab) first_collab = &t;
      const std::string op = t.meta.value("operator", std::string("operator"));
      if (!by_operator.count(op)) operator_order.push_back(op);
      by_operator[op].push_back(match_events(user_triggers(t, skin), truth_events, opts.max_match_mm));
    }
  }

  json estimator = {{"frames", pred.size()}};
  if (!pred.empty()) {
    estimator["mae_n"] = nn::mean_absolute_error(pred, truth);
    const auto r = nn::pearson(pred, truth);
    estimator["pcc"] = r ? json(*r) : json(nullptr);
  }
  report["estimator_in_loop"] = estimator;

  if (first_auto) {
    const auto table = material_table(slopes);
    report["constant_velocity"] = {{"insertions", est_reports.size()},
                                   {"threshold", opts.threshold.to_json()},
                                   {"detection_true_force", lag_block(true_reports)},
                                   {"detection_estimated_force", lag_block(est_reports)},
                                   {"friction_table", to_json(table)},
                                   {"friction_table_text", format_material_table(table)},
                                   {"insertions_detail", per_insertion}};
  }
  if (first_collab) {
    std::vector<std::pair<std::string, DetectionReport>> rows;
    std::vector<DetectionReport> all;
    json ops = json::array();
    for (const auto& name : operator_order) {
      const auto& reps = by_operator[name];
      const DetectionReport pooled = pool_reports(reps);
      rows.emplace_back(name, pooled);
      all.insert(all.end(), reps.begin(), reps.end());
      json insertions = json::array();
      for (const auto& r : reps) insertions.push_back(r.to_json());
      ops.push_back({{"operator", name},
                     {"detection_rate", pooled.detection_rate},
                     {"entry", pooled.entry.to_json()},
                     {"exit", pooled.exit.to_json()},
                     {"insertions", insertions}});
    }
    const DetectionReport pooled = pool_reports(all);
    std::size_t missed_entry = 0, missed_exit = 0;
    for (const auto& m : pooled.missed) (m.kind == InterfaceKind::Entry ? missed_entry : missed_exit) += 1;
    report["collaborative"] = {{"insertions", all.size()},
                               {"detection_rate", pooled.detection_rate},
                               {"missed_entries", missed_entry},
                               {"missed_exits", missed_exit},
                               {"entry", pooled.entry.to_json()},
                               {"exit", pooled.exit.to_json()},
                               {"operators", ops},
                               {"table_text", format_detection_table(rows)}};
  }
  json plots = json::object();
  if (first_auto) plots["force_vs_depth"] = plot_series(*first_auto, opts.plot_stride);
  if (first_collab) plots["force_vs_time"] = plot_series(*first_collab, opts.plot_stride);
  report["plots"] = plots;
  return report;
}

}  // namespace needlebench::analysis
