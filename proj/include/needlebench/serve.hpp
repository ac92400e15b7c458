#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "needlebench/control.hpp"
#include "needlebench/phantom.hpp"

namespace needlebench::serve {

struct ServerOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks a free port
  std::vector<phantom::PhantomSpec> phantoms;
  /// Fresh estimator for every session.
  std::function<std::unique_ptr<control::Estimator>()> make_estimator;
  control::ControllerConfig controller;
  control::SimConfig sim;
  std::uint64_t seed = 0;
  nlohmann::json stamp = nlohmann::json::object();  // merged into every saved trace
  std::string trace_dir = "traces/live";
  std::size_t send_queue = 64;
  int telemetry_every = 4;  // ticks per telemetry frame (200 Hz / 4 = 50 Hz)
  double max_match_mm = 20.0;
};

/// WebSocket front end for one live collaborative session at a time. The tick
/// loop runs on its own thread at the controller rate and never waits on the
/// network: frames go through a bounded queue that drops the oldest entry.
class Server {
 public:
  explicit Server(ServerOptions opts);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and starts serving. Throws PortInUse.
  void start();
  void stop();
  std::uint16_t port() const;
  /// Blocks until stop() is called from another thread.
  void wait();
  /// Telemetry frames dropped because a client fell behind.
  std::size_t dropped_frames() const;

  struct Impl;

 private:
  std::shared_ptr<Impl> impl_;
};

}  // namespace needlebench::serve
