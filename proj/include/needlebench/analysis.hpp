#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "needlebench/control.hpp"
#include "needlebench/phantom.hpp"

namespace needlebench::analysis {

enum class EventSource { Threshold, UserTrigger };
std::string_view to_string(EventSource s);

struct DetectionEvent {
  double depth_mm = 0.0;
  phantom::InterfaceKind kind = phantom::InterfaceKind::Entry;
  EventSource source = EventSource::Threshold;
  double t_s = 0.0;
};

struct ThresholdConfig {
  double threshold_n = 1.0;
  double hysteresis_n = 0.2;
  int debounce_ticks = 3;
  bool use_true_force = false;    // F_T_true instead of the estimate
  double suppress_above_mm = 0.0; // events shallower than this (the skin) are dropped

  nlohmann::json to_json() const;
};

/// Entry when the tip force rises through threshold + h/2, exit when it falls
/// through threshold - h/2, each held for `debounce_ticks` consecutive ticks.
std::vector<DetectionEvent> detect_threshold(const control::InsertionTrace& trace, const ThresholdConfig& cfg = {});

/// Rising edges of the trigger column. Triggers carry no kind of their own.
std::vector<DetectionEvent> user_triggers(const control::InsertionTrace& trace, double suppress_above_mm = 0.0);

struct InterfaceMatch {
  std::size_t ordinal = 0;  // position of the interface along the needle path
  phantom::InterfaceEvent truth;
  std::optional<DetectionEvent> event;
  double distance_mm = 0.0;  // |event - truth|
  double lag_mm = 0.0;       // event - truth
};

struct KindStats {
  std::size_t total = 0, detected = 0;
  double mean_mm = 0.0, sd_mm = 0.0;
  nlohmann::json to_json() const;
};

struct DetectionReport {
  std::vector<InterfaceMatch> matches;
  std::vector<double> distances_mm;  // matched interfaces, in depth order
  double detection_rate = 0.0;
  std::vector<phantom::InterfaceEvent> missed;
  std::size_t unmatched_events = 0;
  KindStats entry, exit;

  nlohmann::json to_json() const;
};

enum class MatchRule {
  /// Each interface, in depth order, takes the nearest unused event within
  /// the window.
  Nearest,
  /// An interface claims the first event between its own depth (less
  /// `anticipation_mm`) and the next interface, so a missed interface never
  /// takes its successor's event.
  Causal,
};

/// One event per interface, unmatched interfaces are missed. Threshold events
/// only match interfaces of their own kind; user triggers match either kind.
DetectionReport match_events(const std::vector<DetectionEvent>& events,
                             const std::vector<phantom::InterfaceEvent>& truth, double max_match_mm = 20.0,
                             MatchRule rule = MatchRule::Nearest, double anticipation_mm = 1.0);

/// Pools several reports: rates over all interfaces, distances per kind.
DetectionReport pool_reports(const std::vector<DetectionReport>& reports);

struct SegmentSlope {
  std::size_t layer = 0;
  phantom::Material material = phantom::Material::Gelatin;
  double start_mm = 0.0, end_mm = 0.0;
  std::optional<double> slope;  // N/mm, empty when the segment was degenerate
  std::size_t samples = 0;
  std::size_t excluded = 0;     // samples dropped because the shaft reading sat on its floor

  nlohmann::json to_json() const;
};

struct FrictionOptions {
  /// Friction is F_shaft - F_T; true tip force unless told otherwise.
  bool use_true_tip = true;
  /// Read the simulator's friction column directly.
  bool use_friction_column = false;
  /// Shaft readings at or below this are treated as floored and skipped.
  double floor_guard_n = 0.06;
  /// Runs above the guard shorter than this many samples are treated as floored.
  std::size_t floor_min_run = 20;
  /// Samples dropped at each end of a run that borders a floored stretch.
  std::size_t floor_trim = 10;
  std::size_t min_samples = 10;
  /// Report degenerate segments instead of throwing.
  bool skip_degenerate = false;
};

/// OLS slope of friction against depth for each layer of the phantom.
std::vector<SegmentSlope> friction_regression(const control::InsertionTrace& trace, const phantom::PhantomSpec& spec,
                                              const FrictionOptions& opts = {});

/// Mean (sd), min and max of slopes per material.
struct MaterialStats {
  phantom::Material material = phantom::Material::Gelatin;
  std::size_t segments = 0;
  double mean = 0.0, sd = 0.0, min = 0.0, max = 0.0;
};
std::vector<MaterialStats> material_table(const std::vector<SegmentSlope>& slopes);
nlohmann::json to_json(const std::vector<MaterialStats>& table);
/// Plain-text table with materials as columns and Mean/Min/Max rows.
std::string format_material_table(const std::vector<MaterialStats>& table);

/// Per-participant rows with per-interface mean (sd) distances.
std::string format_detection_table(const std::vector<std::pair<std::string, DetectionReport>>& rows);

double mean(const std::vector<double>& v);
double sample_sd(const std::vector<double>& v);

struct TraceSet {
  std::vector<control::InsertionTrace> traces;
  std::vector<phantom::PhantomSpec> phantoms;  // looked up by the trace's "phantom" name
};

struct SummaryOptions {
  ThresholdConfig threshold;
  double max_match_mm = 20.0;
  FrictionOptions friction;
  std::size_t plot_stride = 10;  // keep every n-th sample in the plot series
};

/// Aggregates everything a set of traces supports: constant-velocity runs
/// give detection lags and friction tables; collaborative runs give user
/// detection reports. Empty input gives an empty report.
nlohmann::json summarize(const TraceSet& set, const SummaryOptions& opts = {});

}  // namespace needlebench::analysis
