// needlebench command-line front end.
#include <csignal>
#include <pthread.h>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "needlebench/config.hpp"
#include "needlebench/pipeline.hpp"
#include "needlebench/serve.hpp"

using namespace needlebench;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config_file;
  std::string out = "out";
  std::vector<std::string> sets;
  bool quick = false;
};

// "a.b.c=value"; the value is read as JSON when it parses, else as a string.
void apply_set(json& flags, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw SchemaError("--set expects key.path=value, got '" + kv + "'");
  json value;
  try {
    value = json::parse(kv.substr(eq + 1));
  } catch (const json::parse_error&) {
    value = kv.substr(eq + 1);
  }
  json* node = &flags;
  std::string path = kv.substr(0, eq);
  std::size_t pos = 0;
  while (true) {
    const auto dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot - pos);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    pos = dot + 1;
  }
}

json layered_config(const Globals& g) {
  json file = g.config_file.empty() ? json() : config::load_file(g.config_file);
  json flags = json::object();
  if (g.quick) flags.merge_patch(config::quick_overrides());
  for (const auto& s : g.sets) apply_set(flags, s);
  if (g.seed) flags["seed"] = *g.seed;
  return config::layered(file, flags);
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + p.string() + "'");
  out << text;
}

std::vector<phantom::PhantomSpec> load_phantoms(const std::vector<std::string>& files, const pipeline::Experiment& ex) {
  if (files.empty()) return pipeline::study_phantoms(ex);
  std::vector<phantom::PhantomSpec> out;
  for (const auto& f : files) out.push_back(phantom::load_phantom_file(f));
  return out;
}

std::unique_ptr<control::Estimator> make_estimator(const std::string& model, const pipeline::Experiment& ex,
                                                   std::optional<nn::Checkpoint>& holder) {
  if (model.empty() || model == "analytic") return std::make_unique<control::AnalyticEstimator>(ex.sensor);
  holder = nn::load_checkpoint(model);
  return std::make_unique<control::NeuralEstimator>(holder->model);
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Needle insertion benchmark: phantoms, OCT force sensing, neural estimation and shared control"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--config", g.config_file, "JSON config layered over the defaults");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--set", g.sets, "Override one config value, e.g. train.epochs=3");

  std::function<void()> action;

  // phantom
  auto* ph = app.add_subcommand("phantom", "Generate or validate phantom descriptions");
  ph->require_subcommand(1);
  auto* ph_gen = ph->add_subcommand("gen", "Write generated phantoms");
  std::optional<std::uint64_t> gen_seed;
  std::string gen_out;
  std::size_t gen_index = 0;
  ph_gen->add_option("--seed", gen_seed, "Seed for the phantom set (default: the master seed)");
  ph_gen->add_option("--out", gen_out, "Write one phantom to this file instead of the whole set to <out>/phantoms");
  ph_gen->add_option("--index", gen_index, "Which phantom of the set --out receives")->capture_default_str();
  ph_gen->callback([&] {
    action = [&] {
      if (gen_seed) g.seed = gen_seed;
      const auto ex = pipeline::Experiment::from_config(layered_config(g));
      const auto set = pipeline::study_phantoms(ex);
      auto dump = [&](const phantom::PhantomSpec& p, const fs::path& path) {
        json j = phantom::to_json(p);
        j["meta"] = ex.stamp();
        write_file(path, j.dump(2) + "\n");
        std::cout << path.string() << "\n";
      };
      if (!gen_out.empty()) {
        if (gen_index >= set.size())
          throw RangeError("--index " + std::to_string(gen_index) + " out of range, the set has " +
                           std::to_string(set.size()) + " phantoms");
        dump(set[gen_index], gen_out);
        return;
      }
      for (const auto& p : set) dump(p, fs::path(g.out) / "phantoms" / (p.name + ".json"));
    };
  });
  std::vector<std::string> validate_files;
  auto* ph_val = ph->add_subcommand("validate", "Check phantom files against the schema");
  ph_val->add_option("files", validate_files)->required();
  ph_val->callback([&] {
    action = [&] {
      for (const auto& f : validate_files) {
        const auto spec = phantom::load_phantom_file(f);
        std::cout << f << ": ok (" << spec.layers.size() << " layers, " << phantom::interfaces(spec).size()
                  << " interfaces)\n";
      }
    };
  });

  // sensor
  auto* se = app.add_subcommand("sensor", "Sensor simulation");
  se->require_subcommand(1);
  auto* se_cal = se->add_subcommand("calibrate", "Generate A-scan datasets under a cyclic loading profile");
  std::optional<std::size_t> cal_n;
  std::string cal_profile = "cyclic", cal_out;
  se_cal->add_option("--n", cal_n, "Number of samples (default: calibration.samples)");
  se_cal->add_option("--profile", cal_profile, "Loading profile")->capture_default_str();
  se_cal->add_option("--out", cal_out, "Write only the calibration set to this file");
  se_cal->callback([&] {
    action = [&] {
      if (cal_profile != "cyclic") throw SchemaError("unknown profile '" + cal_profile + "', only 'cyclic' exists");
      json cfg = layered_config(g);
      if (cal_n) cfg["calibration"]["samples"] = *cal_n;
      const auto ex = pipeline::Experiment::from_config(cfg);
      if (!cal_out.empty()) {
        if (fs::path(cal_out).has_parent_path()) fs::create_directories(fs::path(cal_out).parent_path());
        sensor::save_dataset(pipeline::calibration_set(ex), cal_out);
        std::cout << cal_out << "\n";
        return;
      }
      const fs::path dir = fs::path(g.out) / "data";
      fs::create_directories(dir);
      sensor::save_dataset(pipeline::calibration_set(ex), (dir / "calibration.bin").string());
      sensor::save_dataset(pipeline::test_set(ex), (dir / "test.bin").string());
      std::cout << (dir / "calibration.bin").string() << "\n" << (dir / "test.bin").string() << "\n";
    };
  });

  // neural
  auto* ne = app.add_subcommand("neural", "Train or evaluate force regressors");
  ne->require_subcommand(1);
  std::string arch = "cgru", data_path, test_path, ckpt_out, ckpt_path, report_path;
  auto* ne_train = ne->add_subcommand("train", "Train one architecture on a calibration dataset");
  ne_train->add_option("--arch", arch, "cgru or resnet")->capture_default_str();
  ne_train->add_option("--data", data_path, "Calibration dataset (default: generated from the config)");
  ne_train->add_option("--test", test_path, "Held-out test dataset (default: generated from the config)");
  ne_train->add_option("--out", ckpt_out, "Checkpoint file (default: <out>/models/<arch>.ckpt)");
  ne_train->callback([&] {
    action = [&] {
      const auto ex = pipeline::Experiment::from_config(layered_config(g));
      const auto a = nn::arch_from_string(arch);
      const auto calib = data_path.empty() ? pipeline::calibration_set(ex) : sensor::load_dataset(data_path);
      const auto test = test_path.empty() ? pipeline::test_set(ex) : sensor::load_dataset(test_path);
      auto m = pipeline::train_model(ex, a, calib, test, log_line);
      json extra = ex.stamp();
      extra["best_val_mae"] = m.best_val_mae;
      extra["best_epoch"] = m.best_epoch;
      const fs::path path =
          ckpt_out.empty() ? fs::path(g.out) / "models" / (std::string(nn::to_string(a)) + ".ckpt") : fs::path(ckpt_out);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      nn::save_checkpoint(path.string(), *m.model, extra);
      json r = m.eval.to_json();
      r.erase("predictions");
      r["best_val_mae"] = m.best_val_mae;
      r["best_epoch"] = m.best_epoch;
      r["checkpoint"] = path.string();
      std::cout << r.dump(2) << "\n";
    };
  });
  auto* ne_eval = ne->add_subcommand("eval", "Stream a dataset through a checkpoint");
  ne_eval->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  ne_eval->add_option("--data", test_path, "Dataset (default: the test set generated from the config)");
  ne_eval->add_option("--report", report_path, "Also write the metrics, with predictions, to this JSON file");
  ne_eval->callback([&] {
    action = [&] {
      const auto ex = pipeline::Experiment::from_config(layered_config(g));
      const auto ck = nn::load_checkpoint(ckpt_path);
      const auto test = test_path.empty() ? pipeline::test_set(ex) : sensor::load_dataset(test_path);
      json r = nn::evaluate(ck.model, test).to_json();
      if (!report_path.empty()) write_file(report_path, r.dump(2) + "\n");
      r.erase("predictions");
      std::cout << r.dump(2) << "\n";
    };
  });

  // run
  auto* ru = app.add_subcommand("run", "Simulated insertions");
  ru->require_subcommand(1);
  std::vector<std::string> phantom_files;
  std::string run_model, operator_kind = "reactive";
  std::optional<double> run_v, run_alpha;
  std::optional<std::size_t> run_n;
  for (const char* mode : {"auto", "collab"}) {
    const bool auto_mode = std::string(mode) == "auto";
    auto* sub = ru->add_subcommand(mode, auto_mode ? "Robot-only constant-velocity insertions"
                                                   : "Scripted participants with shared control");
    sub->add_option("--phantom", phantom_files, "Phantom files (default: the generated set)");
    sub->add_option("--model", run_model, "Checkpoint for the tip-force estimate, or 'analytic'");
    if (auto_mode) {
      sub->add_option("--v", run_v, "Insertion speed in mm/s (default: auto.v_mm_s)");
      sub->add_option("--n", run_n, "Number of insertions (default: auto.insertions)");
    } else {
      sub->add_option("--operator", operator_kind, "reactive (scripted) or remote (live, see serve)")
          ->capture_default_str();
      sub->add_option("--alpha", run_alpha, "Fixed feedback gain instead of the practice-phantom choice");
    }
    sub->callback([&, auto_mode] {
      action = [&, auto_mode] {
        json cfg = layered_config(g);
        if (run_v) cfg["auto"]["v_mm_s"] = *run_v;
        if (run_n) cfg["auto"]["insertions"] = *run_n;
        const auto ex = pipeline::Experiment::from_config(cfg);
        if (!auto_mode && operator_kind != "reactive") {
          if (operator_kind == "remote")
            throw SchemaError("the remote operator needs live input; start 'needlebench serve' and drive it over WebSocket");
          throw SchemaError("unknown operator '" + operator_kind + "', expected reactive or remote");
        }
        const auto phantoms = load_phantoms(phantom_files, ex);
        std::optional<nn::Checkpoint> holder;
        auto est = make_estimator(run_model, ex, holder);
        const fs::path dir = fs::path(g.out) / "traces" / (auto_mode ? "auto" : "collab");
        std::vector<control::InsertionTrace> traces;
        if (auto_mode) {
          traces = pipeline::run_auto(ex, phantoms, *est);
        } else {
          auto run = pipeline::run_collab(ex, phantoms, pipeline::practice_phantom(ex), *est, run_alpha);
          traces = std::move(run.traces);
          std::cout << run.gains.dump() << "\n";
        }
        const fs::path pdir = fs::path(g.out) / "phantoms";
        for (const auto& p : phantoms) {
          json j = phantom::to_json(p);
          j["meta"] = ex.stamp();
          write_file(pdir / (p.name + ".json"), j.dump(2) + "\n");
        }
        fs::create_directories(dir);
        for (const auto& t : traces) {
          char name[64];
          if (auto_mode)
            std::snprintf(name, sizeof name, "auto_%02d.csv", t.meta.value("insertion", 0));
          else
            std::snprintf(name, sizeof name, "%s_%03d.csv", t.meta.value("operator", std::string("op")).c_str(),
                          t.meta.value("insertion", 0));
          control::save_trace((dir / name).string(), t);
          std::cout << (dir / name).string() << "\n";
        }
      };
    });
  }

  // analyze
  auto* an = app.add_subcommand("analyze", "Detection and friction analysis of recorded traces");
  std::string run_dir, an_report;
  std::vector<std::string> truth_files;
  bool force = false;
  an->add_option("--traces,dir", run_dir, "Run directory (phantoms/ and traces/) or a directory of traces")
      ->required();
  an->add_option("--ground-truth", truth_files, "Phantom files (default: <traces>/phantoms/*.json)");
  an->add_option("--report", an_report, "Report file (default: <traces>/report.json, text beside it)");
  an->add_flag("--force", force, "Analyze even when config hashes disagree");
  an->callback([&] {
    action = [&] {
      const fs::path dir(run_dir);
      json cfg = layered_config(g);
      json table = json::object();
      std::optional<std::string> expected;
      if (fs::exists(dir / "manifest.json")) {
        std::ifstream in(dir / "manifest.json");
        const json manifest = json::parse(in);
        cfg = manifest.at("config");
        table = manifest.value("estimators", json::object());
        expected = manifest.value("config_hash", std::string());
      }
      const auto ex = pipeline::Experiment::from_config(cfg);
      auto set = pipeline::load_run(run_dir);
      if (!truth_files.empty()) {
        set.phantoms.clear();
        for (const auto& f : truth_files) set.phantoms.push_back(phantom::load_phantom_file(f));
      }
      std::erase_if(set.phantoms, [](const auto& p) { return p.name == "practice"; });
      pipeline::check_hashes(set.traces, expected, force);
      const auto res = pipeline::analyze(ex, set, table);
      fs::path report = an_report.empty() ? dir / "report.json" : fs::path(an_report);
      write_file(report, res.report.dump(2) + "\n");
      write_file(fs::path(report).replace_extension(".txt"), res.text);
      std::cout << res.text;
    };
  });

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "calibrate, train, select, insert and analyze in one go");
  bool skip_train = false;
  pl->add_flag("--quick", g.quick, "Small calibration set, few epochs and insertions");
  pl->add_flag("--skip-train", skip_train, "Reuse checkpoints already in the output directory");
  pl->callback([&] {
    action = [&] {
      pipeline::Options o;
      o.config = layered_config(g);
      o.out_dir = g.out;
      o.skip_train = skip_train;
      o.log = log_line;
      const auto r = pipeline::run(o);
      std::ifstream in(fs::path(g.out) / "report.txt");
      std::cout << in.rdbuf();
      std::cout << "selected: " << r.selected << ", total " << r.timing["total_s"].get<double>() << " s\n";
    };
  });

  // serve
  auto* sv = app.add_subcommand("serve", "WebSocket service for live collaborative sessions");
  std::string host = "127.0.0.1";
  std::uint16_t port = 8765;
  std::string serve_model;
  std::vector<std::string> serve_phantoms;
  sv->add_option("--host", host)->capture_default_str();
  sv->add_option("--port", port)->capture_default_str();
  sv->add_option("--model", serve_model, "Checkpoint for the tip-force estimate, or 'analytic'");
  sv->add_option("--phantom", serve_phantoms, "Phantom files (default: the generated set)");
  sv->callback([&] {
    action = [&] {
      const auto ex = pipeline::Experiment::from_config(layered_config(g));
      std::optional<nn::Checkpoint> holder;
      if (!serve_model.empty() && serve_model != "analytic") holder = nn::load_checkpoint(serve_model);
      serve::ServerOptions o;
      o.host = host;
      o.port = port;
      o.phantoms = load_phantoms(serve_phantoms, ex);
      if (holder) {
        const nn::ForceModel* m = &holder->model;
        o.make_estimator = [m] { return std::make_unique<control::NeuralEstimator>(*m); };
      }
      o.controller = ex.controller;
      o.sim = ex.sim;
      o.sim.enforce_tick_budget = true;
      o.seed = ex.seed;
      o.stamp = ex.stamp();
      o.trace_dir = (fs::path(g.out) / "traces" / "live").string();
      o.max_match_mm = ex.summary.max_match_mm;
      // Block the signals before the worker threads exist so only sigwait sees them.
      sigset_t sigs;
      sigemptyset(&sigs);
      sigaddset(&sigs, SIGINT);
      sigaddset(&sigs, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &sigs, nullptr);
      serve::Server server(std::move(o));
      server.start();
      std::cerr << "serving on ws://" << host << ":" << server.port() << std::endl;
      int sig = 0;
      sigwait(&sigs, &sig);
      server.stop();
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (action) action();
  } catch (const StageError& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
