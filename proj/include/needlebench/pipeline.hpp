#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "needlebench/analysis.hpp"
#include "needlebench/control.hpp"
#include "needlebench/nn/train.hpp"
#include "needlebench/phantom.hpp"
#include "needlebench/sensor.hpp"

namespace needlebench::pipeline {

/// Typed view of a layered config document.
struct Experiment {
  nlohmann::json raw;
  std::uint64_t seed = 0;
  std::string config_hash;

  sensor::SensorConfig sensor;
  std::size_t calibration_samples = 60000, test_samples = 10000;
  double calibration_rate_hz = 200.0, calibration_max_force_n = 5.0;
  nn::CgruConfig cgru;
  nn::ResNetConfig resnet;
  nn::TrainConfig train;
  control::ControllerConfig controller;
  control::SimConfig sim;
  double auto_v_mm_s = 5.0;
  std::size_t auto_insertions = 25;
  std::size_t participants = 5, insertions_per_participant = 4;
  analysis::SummaryOptions summary;

  static Experiment from_config(const nlohmann::json& cfg);
  /// {version, seed, config_hash}
  nlohmann::json stamp() const;
};

std::vector<phantom::PhantomSpec> study_phantoms(const Experiment& ex);
/// Separate phantom used only for gain practice, so it never leaks into results.
phantom::PhantomSpec practice_phantom(const Experiment& ex);

sensor::Dataset calibration_set(const Experiment& ex);
sensor::Dataset test_set(const Experiment& ex);

using Log = std::function<void(const std::string&)>;

struct TrainedModel {
  nn::Arch arch = nn::Arch::Cgru;
  std::optional<nn::ForceModel> model;
  double best_val_mae = 0.0;
  int best_epoch = 0;
  nn::EvalReport eval;
  double train_seconds = 0.0;
};

TrainedModel train_model(const Experiment& ex, nn::Arch arch, const sensor::Dataset& calib,
                         const sensor::Dataset& test, const Log& log = {});
/// Lowest validation MAE wins; ties go to the first entry.
std::size_t select_model(const std::vector<TrainedModel>& models);

std::vector<control::InsertionTrace> run_auto(const Experiment& ex, const std::vector<phantom::PhantomSpec>& phantoms,
                                              control::Estimator& est);

struct CollabRun {
  std::vector<control::InsertionTrace> traces;
  nlohmann::json gains = nlohmann::json::array();  // per participant
};
/// Each participant picks a gain on the practice phantom unless `alpha` fixes it.
CollabRun run_collab(const Experiment& ex, const std::vector<phantom::PhantomSpec>& phantoms,
                     const phantom::PhantomSpec& practice, control::Estimator& est,
                     std::optional<double> alpha = std::nullopt);

/// Report for one collaborative insertion, as sent at the end of a live session.
nlohmann::json insertion_report(const control::InsertionTrace& trace, const phantom::PhantomSpec& spec,
                                double max_match_mm = 20.0);

/// Every trace must carry the same config hash (and match `expected` when
/// given); otherwise ConfigHashMismatch unless `force`.
std::string check_hashes(const std::vector<control::InsertionTrace>& traces,
                         const std::optional<std::string>& expected, bool force);

struct AnalyzeResult {
  nlohmann::json report;
  std::string text;
};
AnalyzeResult analyze(const Experiment& ex, const analysis::TraceSet& set, const nlohmann::json& estimator_table);

/// Loads phantoms/ and traces/ (recursively) from a run directory.
analysis::TraceSet load_run(const std::string& dir);

struct Options {
  nlohmann::json config;
  std::string out_dir = "out";
  bool skip_train = false;
  Log log;
};

struct Result {
  nlohmann::json report;
  nlohmann::json timing;
  std::string selected;
};

/// calibrate -> train -> select -> auto -> collab -> analyze, writing every
/// artefact under `out_dir`. Failures surface as StageError naming the stage.
Result run(const Options& opts);

}  // namespace needlebench::pipeline
