#include "needlebench/config.hpp"

#include <cstdio>
#include <fstream>

#include "needlebench/analysis.hpp"
#include "needlebench/control.hpp"
#include "needlebench/nn/train.hpp"

namespace needlebench::config {

using nlohmann::json;

json defaults() {
  nn::CgruConfig cgru;
  cgru.channels = 4;
  nn::TrainConfig train;
  train.epochs = 12;
  train.windows_per_epoch = 4096;
  train.max_val_windows = 2000;
  json sim = control::SimConfig{}.to_json();
  sim.erase("sensor");
  return {{"seed", 42},
          {"sensor", sensor::SensorConfig{}.to_json()},
          {"calibration", {{"samples", 60000}, {"test_samples", 10000}, {"rate_hz", 200.0}, {"max_force_n", 5.0}}},
          {"cgru", cgru.to_json()},
          {"resnet", nn::ResNetConfig{}.to_json()},
          {"train", train.to_json()},
          {"controller", control::ControllerConfig{}.to_json()},
          {"sim", sim},
          {"auto", {{"v_mm_s", 5.0}, {"insertions", 25}}},
          {"collab", {{"participants", 5}, {"insertions_per_participant", 4}}},
          {"analysis",
           {{"threshold_n", 1.0}, {"hysteresis_n", 0.2}, {"debounce_ticks", 3}, {"max_match_mm", 20.0}}}};
}

json quick_overrides() {
  return {{"calibration", {{"samples", 5000}}},
          {"train", {{"epochs", 5}}},
          {"auto", {{"insertions", 5}}},
          {"collab", {{"insertions_per_participant", 1}}}};
}

json layered(const json& file, const json& flags) {
  json cfg = defaults();
  if (!file.is_null()) cfg.merge_patch(file);
  if (!flags.is_null()) cfg.merge_patch(flags);
  return cfg;
}

json load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

std::string hash(const json& cfg) {
  const std::string text = cfg.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json stamp(const json& cfg) {
  return {{"version", kVersion}, {"seed", cfg.value("seed", std::uint64_t{0})}, {"config_hash", hash(cfg)}};
}

}  // namespace needlebench::config
