#include "needlebench/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "needlebench/config.hpp"

namespace needlebench::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(std::string("stage '") + name + "' failed: " + e.what());
  }
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string estimator_text(const json& table) {
  std::ostringstream os;
  os << "Force estimation (test stream)\n";
  os << "  arch     val MAE   test MAE   pCC      best epoch\n";
  for (const auto& row : table.at("models")) {
    const bool sel = row.at("arch") == table.at("selected");
    os << (sel ? "* " : "  ");
    std::string name = row.at("arch").get<std::string>();
    name.resize(9, ' ');
    os << name << fmt("%-10.4f", row.at("best_val_mae").get<double>())
       << fmt("%-11.4f", row.at("test_mae_n").get<double>())
       << (row.at("test_pcc").is_null() ? std::string("n/a      ") : fmt("%-9.5f", row.at("test_pcc").get<double>()))
       << row.at("best_epoch").get<int>() << "\n";
  }
  return os.str();
}

std::string lag_text(const char* title, const json& block) {
  std::ostringstream os;
  os << title << ": detection " << fmt("%.3f", block.at("detection_rate").get<double>());
  for (const char* k : {"entry_lag_mm", "exit_lag_mm"}) {
    const auto& b = block.at(k);
    os << ", " << k << " " << fmt("%.2f", b.at("mean").get<double>()) << " (" << fmt("%.2f", b.at("sd").get<double>())
       << ") [" << fmt("%.2f", b.at("min").get<double>()) << ", " << fmt("%.2f", b.at("max").get<double>()) << "]";
  }
  return os.str() + "\n";
}

}  // namespace

Experiment Experiment::from_config(const json& cfg) {
  Experiment ex;
  ex.raw = cfg;
  ex.config_hash = config::hash(cfg);
  try {
    ex.seed = cfg.at("seed").get<std::uint64_t>();
    ex.sensor = sensor::SensorConfig::from_json(cfg.at("sensor"));
    const auto& cal = cfg.at("calibration");
    ex.calibration_samples = cal.at("samples").get<std::size_t>();
    ex.test_samples = cal.at("test_samples").get<std::size_t>();
    ex.calibration_rate_hz = cal.at("rate_hz").get<double>();
    ex.calibration_max_force_n = cal.at("max_force_n").get<double>();
    ex.cgru = nn::CgruConfig::from_json(cfg.at("cgru"));
    ex.resnet = nn::ResNetConfig::from_json(cfg.at("resnet"));
    ex.train = nn::TrainConfig::from_json(cfg.at("train"));
    ex.controller = control::ControllerConfig::from_json(cfg.at("controller"));
    json sim = cfg.at("sim");
    sim["sensor"] = cfg.at("sensor");
    ex.sim = control::SimConfig::from_json(sim);
    ex.auto_v_mm_s = cfg.at("auto").at("v_mm_s").get<double>();
    ex.auto_insertions = cfg.at("auto").at("insertions").get<std::size_t>();
    ex.participants = cfg.at("collab").at("participants").get<std::size_t>();
    ex.insertions_per_participant = cfg.at("collab").at("insertions_per_participant").get<std::size_t>();
    const auto& an = cfg.at("analysis");
    ex.summary.threshold.threshold_n = an.at("threshold_n").get<double>();
    ex.summary.threshold.hysteresis_n = an.at("hysteresis_n").get<double>();
    ex.summary.threshold.debounce_ticks = an.at("debounce_ticks").get<int>();
    ex.summary.max_match_mm = an.at("max_match_mm").get<double>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("invalid config: ") + e.what());
  }
  if (ex.calibration_samples < 1000 || ex.test_samples < 100)
    throw RangeError("calibration needs at least 1000 samples and the test set at least 100");
  if (!(ex.auto_v_mm_s > 0.0)) throw RangeError("auto velocity must be positive");
  if (ex.participants == 0 || ex.participants > 5) throw RangeError("participants must be in [1, 5]");
  ex.cgru.validate();
  ex.resnet.validate();
  ex.train.validate();
  ex.controller.validate();
  return ex;
}

json Experiment::stamp() const { return {{"version", kVersion}, {"seed", seed}, {"config_hash", config_hash}}; }

std::vector<phantom::PhantomSpec> study_phantoms(const Experiment& ex) { return phantom::default_phantoms(ex.seed); }

phantom::PhantomSpec practice_phantom(const Experiment& ex) {
  auto p = phantom::default_phantoms(mix_seed(ex.seed, 0x9A4C))[0];
  p.name = "practice";
  return p;
}

sensor::Dataset calibration_set(const Experiment& ex) {
  auto ds = sensor::calibrate(ex.sensor, ex.calibration_samples, mix_seed(ex.seed, 0xCA11), ex.calibration_rate_hz,
                              ex.calibration_max_force_n);
  ds.meta = ex.stamp();
  ds.meta["role"] = "calibration";
  return ds;
}

sensor::Dataset test_set(const Experiment& ex) {
  auto ds = sensor::calibrate(ex.sensor, ex.test_samples, mix_seed(ex.seed, 0x7E57), ex.calibration_rate_hz,
                              ex.calibration_max_force_n);
  ds.meta = ex.stamp();
  ds.meta["role"] = "test";
  return ds;
}

TrainedModel train_model(const Experiment& ex, nn::Arch arch, const sensor::Dataset& calib,
                         const sensor::Dataset& test, const Log& log) {
  TrainedModel out;
  out.arch = arch;
  out.model = arch == nn::Arch::Cgru ? nn::ForceModel::cgru(ex.cgru) : nn::ForceModel::resnet(ex.resnet);
  nn::TrainConfig tc = ex.train;
  tc.seed = mix_seed(ex.seed, arch == nn::Arch::Cgru ? 0xC6 : 0x7E);
  const auto t0 = std::chrono::steady_clock::now();
  auto res = nn::train(*out.model, calib, tc, [&](const nn::EpochStats& s) {
    if (log)
      log(std::string(nn::to_string(arch)) + " epoch " + std::to_string(s.epoch) + " train_mse " +
          fmt("%.4f", s.train_mse) + " val_mae " + fmt("%.4f", s.val_mae) + " (" + fmt("%.1f", s.seconds) + " s)");
  });
  out.train_seconds = seconds_since(t0);
  out.best_val_mae = res.best_val_mae;
  out.best_epoch = res.best_epoch;
  out.eval = nn::evaluate(*out.model, test);
  return out;
}

std::size_t select_model(const std::vector<TrainedModel>& models) {
  if (models.empty()) throw StageError("no models to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < models.size(); ++i)
    if (models[i].best_val_mae < models[best].best_val_mae) best = i;
  return best;
}

std::vector<control::InsertionTrace> run_auto(const Experiment& ex, const std::vector<phantom::PhantomSpec>& phantoms,
                                              control::Estimator& est) {
  std::vector<control::InsertionTrace> out;
  for (std::size_t i = 0; i < ex.auto_insertions; ++i) {
    const auto& spec = phantoms[i % phantoms.size()];
    auto t = control::run_constant_velocity(spec, ex.auto_v_mm_s, spec.total_depth_mm, est, ex.sim, ex.seed, i);
    t.meta.update(ex.stamp());
    out.push_back(std::move(t));
  }
  return out;
}

CollabRun run_collab(const Experiment& ex, const std::vector<phantom::PhantomSpec>& phantoms,
                     const phantom::PhantomSpec& practice, control::Estimator& est, std::optional<double> alpha) {
  CollabRun run;
  const auto personas = control::default_personas(mix_seed(ex.seed, 0x9E75));
  const double tip = ex.sim.geometry.tip_protrusion_mm;
  for (std::size_t k = 0; k < ex.participants; ++k) {
    control::ReactiveOperator op(personas[k]);
    op.set_ignore_depth(practice.skin_end_mm() + tip);
    control::GainChoice choice;
    if (alpha)
      choice.alpha = *alpha;
    else
      choice = control::choose_gain(op, practice, est, ex.controller, ex.sim, ex.seed, personas[k].perception_noise_n);
    json trials = json::array();
    for (const auto& t : choice.trials)
      trials.push_back({{"alpha", t.alpha}, {"reached_depth", t.reached_depth}, {"contrast_n", t.contrast_n},
                        {"snr", t.snr}});
    run.gains.push_back({{"operator", op.name()}, {"alpha", choice.alpha}, {"trials", trials}});

    control::ControllerConfig cc = ex.controller;
    cc.alpha = choice.alpha;
    for (std::size_t j = 0; j < ex.insertions_per_participant; ++j) {
      const std::size_t idx = k * ex.insertions_per_participant + j;
      const auto& spec = phantoms[idx % phantoms.size()];
      op.set_ignore_depth(spec.skin_end_mm() + tip);
      auto t = control::run_collaborative(spec, op, est, cc, ex.sim, ex.seed, 100 + idx, spec.total_depth_mm);
      t.meta.update(ex.stamp());
      run.traces.push_back(std::move(t));
    }
  }
  return run;
}

json insertion_report(const control::InsertionTrace& trace, const phantom::PhantomSpec& spec, double max_match_mm) {
  const auto truth = phantom::interfaces(spec);
  const auto rep = analysis::match_events(analysis::user_triggers(trace, spec.skin_end_mm()), truth, max_match_mm);
  json gt = json::array();
  for (const auto& ev : truth) gt.push_back(phantom::to_json(ev));
  return {{"distances_mm", rep.distances_mm}, {"detection_rate", rep.detection_rate}, {"ground_truth", gt}};
}

std::string check_hashes(const std::vector<control::InsertionTrace>& traces, const std::optional<std::string>& expected,
                         bool force) {
  std::optional<std::string> seen = expected;
  for (const auto& t : traces) {
    const std::string h = t.meta.value("config_hash", std::string());
    if (!seen) {
      seen = h;
    } else if (h != *seen && !force) {
      throw ConfigHashMismatch("trace '" + t.meta.value("phantom", std::string()) + "' insertion " +
                               std::to_string(t.meta.value("insertion", 0)) + " has config hash '" + h +
                               "', expected '" + *seen + "' (use --force to analyze anyway)");
    }
  }
  return seen.value_or("");
}

AnalyzeResult analyze(const Experiment& ex, const analysis::TraceSet& set, const json& estimator_table) {
  AnalyzeResult res;
  res.report = ex.stamp();
  res.report["estimators"] = estimator_table;
  json s = analysis::summarize(set, ex.summary);
  for (auto& [k, v] : s.items()) res.report[k] = v;

  std::ostringstream os;
  if (estimator_table.is_object() && estimator_table.contains("models")) os << estimator_text(estimator_table) << "\n";
  if (s.contains("estimator_in_loop") && s["estimator_in_loop"].contains("mae_n")) {
    const auto& e = s["estimator_in_loop"];
    os << "In-loop tip force estimate: MAE " << fmt("%.4f", e["mae_n"].get<double>()) << " N, pCC "
       << (e["pcc"].is_null() ? std::string("n/a") : fmt("%.5f", e["pcc"].get<double>())) << "\n\n";
  }
  if (s.contains("constant_velocity")) {
    const auto& cv = s["constant_velocity"];
    os << "Constant velocity insertions: " << cv["insertions"].get<std::size_t>() << "\n";
    os << lag_text("  true tip force", cv["detection_true_force"]);
    os << lag_text("  estimated tip force", cv["detection_estimated_force"]);
    os << "\nFriction slope by material (N/mm)\n" << cv["friction_table_text"].get<std::string>() << "\n";
  }
  if (s.contains("collaborative")) {
    const auto& c = s["collaborative"];
    os << "Collaborative insertions: " << c["insertions"].get<std::size_t>() << ", detection rate "
       << fmt("%.3f", c["detection_rate"].get<double>()) << ", missed entries " << c["missed_entries"].get<std::size_t>()
       << ", missed exits " << c["missed_exits"].get<std::size_t>() << "\n"
       << c["table_text"].get<std::string>();
  }
  res.text = os.str();
  return res;
}

analysis::TraceSet load_run(const std::string& dir) {
  analysis::TraceSet set;
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw FormatError("'" + dir + "' is not a directory");
  std::vector<fs::path> phantom_files, trace_files;
  if (fs::is_directory(root / "phantoms"))
    for (const auto& e : fs::directory_iterator(root / "phantoms"))
      if (e.path().extension() == ".json") phantom_files.push_back(e.path());
  const fs::path traces = fs::is_directory(root / "traces") ? root / "traces" : root;
  for (const auto& e : fs::recursive_directory_iterator(traces))
    if (e.is_regular_file() && e.path().extension() == ".csv") trace_files.push_back(e.path());
  std::sort(phantom_files.begin(), phantom_files.end());
  std::sort(trace_files.begin(), trace_files.end());
  for (const auto& p : phantom_files) set.phantoms.push_back(phantom::load_phantom_file(p.string()));
  for (const auto& p : trace_files) set.traces.push_back(control::load_trace(p.string()));
  return set;
}

Result run(const Options& opts) {
  const auto log = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };
  const Experiment ex = stage("config", [&] { return Experiment::from_config(opts.config); });
  const fs::path out(opts.out_dir);
  json timing = ex.stamp();
  timing["stages_s"] = json::object();
  const auto t_all = std::chrono::steady_clock::now();
  auto timed = [&](const char* name, auto&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    log(std::string("stage ") + name);
    auto r = stage(name, f);
    timing["stages_s"][name] = seconds_since(t0);
    return r;
  };

  json manifest = ex.stamp();
  manifest["config"] = ex.raw;

  const auto phantoms = timed("phantoms", [&] {
    auto ps = study_phantoms(ex);
    ps.push_back(practice_phantom(ex));
    for (const auto& p : ps) {
      json j = phantom::to_json(p);
      j["meta"] = ex.stamp();
      write_json(out / "phantoms" / (p.name + ".json"), j);
    }
    return ps;
  });
  std::vector<phantom::PhantomSpec> study(phantoms.begin(), phantoms.end() - 1);
  const phantom::PhantomSpec& practice = phantoms.back();

  const auto data = timed("calibrate", [&] {
    auto calib = calibration_set(ex);
    auto test = test_set(ex);
    fs::create_directories(out / "data");
    sensor::save_dataset(calib, (out / "data" / "calibration.bin").string());
    sensor::save_dataset(test, (out / "data" / "test.bin").string());
    return std::pair{std::move(calib), std::move(test)};
  });

  std::vector<TrainedModel> models = timed("train", [&] {
    std::vector<TrainedModel> ms;
    fs::create_directories(out / "models");
    for (nn::Arch arch : {nn::Arch::Cgru, nn::Arch::ResNet}) {
      const fs::path ckpt = out / "models" / (std::string(nn::to_string(arch)) + ".ckpt");
      if (opts.skip_train) {
        if (!fs::exists(ckpt))
          throw StageError("stage 'train' failed: --skip-train given but checkpoint '" + ckpt.string() +
                           "' does not exist");
        auto c = nn::load_checkpoint(ckpt.string());
        const json extra = c.manifest.value("extra", json::object());
        if (extra.value("config_hash", std::string()) != ex.config_hash)
          throw ConfigHashMismatch("checkpoint '" + ckpt.string() + "' was trained with a different config");
        TrainedModel m;
        m.arch = arch;
        m.model = std::move(c.model);
        m.best_val_mae = extra.at("best_val_mae").get<double>();
        m.best_epoch = extra.at("best_epoch").get<int>();
        m.eval = nn::evaluate(*m.model, data.second);
        ms.push_back(std::move(m));
        continue;
      }
      auto m = train_model(ex, arch, data.first, data.second, log);
      json extra = ex.stamp();
      extra["best_val_mae"] = m.best_val_mae;
      extra["best_epoch"] = m.best_epoch;
      nn::save_checkpoint(ckpt.string(), *m.model, extra);
      ms.push_back(std::move(m));
    }
    return ms;
  });

  const std::size_t sel = select_model(models);
  json table = {{"selected", nn::to_string(models[sel].arch)}, {"models", json::array()}};
  timing["models"] = json::array();
  for (const auto& m : models) {
    table["models"].push_back({{"arch", nn::to_string(m.arch)},
                               {"params", m.model->params().size()},
                               {"best_val_mae", m.best_val_mae},
                               {"best_epoch", m.best_epoch},
                               {"test_mae_n", m.eval.mae},
                               {"test_pcc", m.eval.pcc ? json(*m.eval.pcc) : json(nullptr)},
                               {"test_frames", m.eval.frames}});
    timing["models"].push_back({{"arch", nn::to_string(m.arch)},
                                {"it_ms", m.eval.it_ms},
                                {"it_p99_ms", m.eval.it_p99_ms},
                                {"tt_ms", m.eval.tt_ms},
                                {"train_s", m.train_seconds}});
  }
  manifest["estimators"] = table;
  log("selected " + table["selected"].get<std::string>());

  control::NeuralEstimator est(*models[sel].model);
  std::size_t overruns = 0;
  timed("auto", [&] {
    auto traces = run_auto(ex, study, est);
    fs::create_directories(out / "traces" / "auto");
    for (auto& t : traces) {
      overruns += t.overruns;
      char name[32];
      std::snprintf(name, sizeof name, "auto_%02d.csv", t.meta.value("insertion", 0));
      control::save_trace((out / "traces" / "auto" / name).string(), t);
    }
    return 0;
  });
  timed("collab", [&] {
    auto run = run_collab(ex, study, practice, est);
    manifest["gains"] = run.gains;
    fs::create_directories(out / "traces" / "collab");
    for (auto& t : run.traces) {
      overruns += t.overruns;
      char name[64];
      std::snprintf(name, sizeof name, "%s_%03d.csv", t.meta.value("operator", std::string("op")).c_str(),
                    t.meta.value("insertion", 0));
      control::save_trace((out / "traces" / "collab" / name).string(), t);
    }
    return 0;
  });
  timing["overruns"] = overruns;

  Result result;
  result.selected = table["selected"].get<std::string>();
  timed("analyze", [&] {
    // Analyze what is on disk so the report matches an offline `analyze` of this directory.
    auto set = load_run(out.string());
    std::erase_if(set.phantoms, [](const auto& p) { return p.name == "practice"; });
    check_hashes(set.traces, ex.config_hash, false);
    auto a = analyze(ex, set, table);
    result.report = a.report;
    write_json(out / "report.json", a.report);
    write_text(out / "report.txt", a.text);
    return 0;
  });
  write_json(out / "manifest.json", manifest);
  timing["total_s"] = seconds_since(t_all);
  write_json(out / "timing.json", timing);
  result.timing = timing;
  return result;
}

}  // namespace needlebench::pipeline
