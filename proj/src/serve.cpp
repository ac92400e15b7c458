#include "needlebench/serve.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <mutex>
#include <optional>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include "needlebench/pipeline.hpp"

namespace needlebench::serve {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using nlohmann::json;

namespace {

json error_frame(const std::string& code, const std::string& msg) {
  return {{"type", "error"}, {"code", code}, {"msg", msg}};
}

class Connection;

}  // namespace

struct Server::Impl {
  ServerOptions opt;
  asio::io_context ioc;
  tcp::acceptor acceptor{ioc};
  std::thread net_thread, tick_thread;
  std::atomic<bool> running{false};
  std::atomic<std::size_t> dropped{0};
  std::mutex stop_mu;
  std::condition_variable stop_cv;

  struct Live {
    const phantom::PhantomSpec* spec = nullptr;
    std::unique_ptr<control::Estimator> estimator;
    std::unique_ptr<control::RemoteOperator> op;
    std::unique_ptr<control::Session> session;
    std::size_t overruns = 0;
    std::uint64_t ticks = 0;
    bool stopped_sent = false;
  };
  std::mutex mu;  // guards everything below
  std::shared_ptr<Connection> client;
  std::optional<Live> live;
  std::uint64_t next_index = 0;

  explicit Impl(ServerOptions o) : opt(std::move(o)) {}

  void accept();
  void attach(const std::shared_ptr<Connection>& c);
  void detach(const Connection* c);
  void handle(const std::shared_ptr<Connection>& c, const std::string& text);
  void tick_loop();
  json finish_session(Live& l);
};

namespace {

class Connection : public std::enable_shared_from_this<Connection> {
 public:
  Connection(tcp::socket socket, Server::Impl* srv) : ws_(std::move(socket)), srv_(srv) {}

  void run() {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->srv_->attach(self);
    });
  }

  void read() {
    ws_.async_read(buf_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->closed_ = true;
        self->srv_->detach(self.get());
        return;
      }
      const std::string text = beast::buffers_to_string(self->buf_.data());
      self->buf_.consume(self->buf_.size());
      self->srv_->handle(self, text);
      self->read();
    });
  }

  /// Thread safe, never blocks on the socket.
  void send(const json& frame, bool droppable = false) {
    {
      std::lock_guard lock(qmu_);
      if (queue_.size() >= srv_->opt.send_queue) {
        auto victim = queue_.begin();
        for (auto it = queue_.begin(); it != queue_.end(); ++it)
          if (it->second) {
            victim = it;
            break;
          }
        queue_.erase(victim);
        ++srv_->dropped;
      }
      queue_.emplace_back(frame.dump(), droppable);
    }
    asio::post(ws_.get_executor(), [self = shared_from_this()] { self->flush(); });
  }

  void close_after_flush() {
    asio::post(ws_.get_executor(), [self = shared_from_this()] {
      self->closing_ = true;
      self->flush();
    });
  }

 private:
  void flush() {
    if (writing_ || closed_) return;
    {
      std::lock_guard lock(qmu_);
      if (queue_.empty()) {
        if (closing_) {
          closed_ = true;
          ws_.async_close(websocket::close_code::normal, [self = shared_from_this()](beast::error_code) {});
        }
        return;
      }
      current_ = std::move(queue_.front().first);
      queue_.pop_front();
    }
    writing_ = true;
    ws_.text(true);
    ws_.async_write(asio::buffer(current_), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->writing_ = false;
      if (ec) {
        self->closed_ = true;
        return;
      }
      self->flush();
    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buf_;
  Server::Impl* srv_;  // outlives every connection
  std::mutex qmu_;
  std::deque<std::pair<std::string, bool>> queue_;
  std::string current_;
  bool writing_ = false, closing_ = false, closed_ = false;  // io thread only
};

}  // namespace

void Server::Impl::accept() {
  acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
    if (ec) return;
    std::make_shared<Connection>(std::move(socket), this)->run();
    accept();
  });
}

void Server::Impl::attach(const std::shared_ptr<Connection>& c) {
  {
    std::lock_guard lock(mu);
    if (!client) {
      client = c;
      c->read();
      return;
    }
  }
  c->send(error_frame("Busy", "another client is connected"));
  c->close_after_flush();
}

void Server::Impl::detach(const Connection* c) {
  std::lock_guard lock(mu);
  if (client.get() != c) return;
  client.reset();
  live.reset();  // a vanished client aborts its session
}

json Server::Impl::finish_session(Live& l) {
  auto trace = l.session->take_trace();
  trace.meta.update(opt.stamp);
  trace.meta["operator"] = "remote";
  trace.meta["stop_reason"] = l.session->stop_reason().empty() ? "finish" : l.session->stop_reason();
  std::filesystem::create_directories(opt.trace_dir);
  char name[32];
  std::snprintf(name, sizeof name, "live_%03llu.csv",
                static_cast<unsigned long long>(trace.meta.value("insertion", std::uint64_t{0})));
  const std::string path = (std::filesystem::path(opt.trace_dir) / name).string();
  control::save_trace(path, trace);
  // Score the file as written so the result matches an offline analysis of it.
  json report = pipeline::insertion_report(control::load_trace(path), *l.spec, opt.max_match_mm);
  report["type"] = "report";
  return report;
}

void Server::Impl::handle(const std::shared_ptr<Connection>& c, const std::string& text) {
  json msg;
  try {
    msg = json::parse(text);
  } catch (const json::parse_error&) {
    c->send(error_frame("BadFrame", "frame is not valid JSON"));
    return;
  }
  if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string()) {
    c->send(error_frame("BadFrame", "frame needs a string 'type'"));
    return;
  }
  const std::string type = msg["type"];
  std::lock_guard lock(mu);
  try {
    if (type == "start") {
      if (live) {
        c->send(error_frame("SessionActive", "a session is already running"));
        return;
      }
      if (!msg.contains("phantom") || !msg["phantom"].is_string()) {
        c->send(error_frame("BadFrame", "start needs a phantom name"));
        return;
      }
      const std::string name = msg["phantom"];
      const phantom::PhantomSpec* spec = nullptr;
      for (const auto& p : opt.phantoms)
        if (p.name == name) spec = &p;
      if (!spec) {
        c->send(error_frame("UnknownPhantom", "no phantom named '" + name + "'"));
        return;
      }
      control::ControllerConfig cc = opt.controller;
      if (msg.contains("alpha")) {
        if (!msg["alpha"].is_number() || !(msg["alpha"].get<double>() > 0.0)) {
          c->send(error_frame("BadFrame", "alpha must be a positive number"));
          return;
        }
        cc.alpha = msg["alpha"];
      }
      Live l;
      l.spec = spec;
      l.estimator = opt.make_estimator();
      l.op = std::make_unique<control::RemoteOperator>(cc.alpha);
      l.session = std::make_unique<control::Session>(*spec, *l.estimator, cc, opt.sim, opt.seed, next_index++,
                                                     spec->total_depth_mm);
      live = std::move(l);
    } else if (type == "input") {
      if (!live) {
        c->send(error_frame("NoSession", "input before start"));
        return;
      }
      if (!msg.contains("f_handle_n") || !msg["f_handle_n"].is_number()) {
        c->send(error_frame("BadFrame", "input needs a numeric f_handle_n"));
        return;
      }
      const double f = msg["f_handle_n"];
      if (!(f >= 0.0)) {
        c->send(error_frame("NegativeForce", "f_handle_n must be non-negative"));
        return;
      }
      const bool trigger = msg.value("trigger", false);
      const std::uint64_t seq = msg.value("seq", std::uint64_t{0});
      live->op->post(f, trigger, seq, live->session->t_s());
    } else if (type == "retract") {
      if (!live) {
        c->send(error_frame("NoSession", "retract before start"));
        return;
      }
      if (!msg.contains("mm") || !msg["mm"].is_number()) {
        c->send(error_frame("BadFrame", "retract needs a numeric mm"));
        return;
      }
      live->session->retract(msg["mm"]);
    } else if (type == "finish") {
      if (!live) {
        c->send(error_frame("NoSession", "finish before start"));
        return;
      }
      json report = finish_session(*live);
      live.reset();
      c->send(report);
    } else if (type == "abort") {
      if (!live) {
        c->send(error_frame("NoSession", "abort before start"));
        return;
      }
      live.reset();
      c->send({{"type", "event"}, {"kind", "stopped"}});
    } else {
      c->send(error_frame("BadFrame", "unknown frame type '" + type + "'"));
    }
  } catch (const Error& e) {
    c->send(error_frame(e.code(), e.what()));
  } catch (const std::exception& e) {
    c->send(error_frame("Internal", e.what()));
  }
}

void Server::Impl::tick_loop() {
  using clock = std::chrono::steady_clock;
  const auto period = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / opt.sim.rate_hz));
  auto next = clock::now();
  while (running) {
    next += period;
    std::vector<json> frames;
    std::shared_ptr<Connection> to;
    {
      std::lock_guard lock(mu);
      if (live && client && !live->session->finished()) {
        to = client;
        live->session->tick(*live->op);
        ++live->ticks;
        const auto& tr = live->session->trace();
        if (tr.overruns > live->overruns) {
          live->overruns = tr.overruns;
          frames.push_back({{"type", "event"}, {"kind", "overrun"}});
        }
        if (live->ticks % std::uint64_t(opt.telemetry_every) == 0)
          frames.push_back({{"type", "telemetry"},
                            {"t_s", live->session->t_s()},
                            {"depth_mm", live->session->depth_mm()},
                            {"f_felt_n", live->session->last_felt_n()},
                            {"v_mm_s", live->session->velocity_mm_s()}});
        if (live->session->finished() && !live->stopped_sent) {
          live->stopped_sent = true;
          frames.push_back({{"type", "event"}, {"kind", "stopped"}});
        }
      }
    }
    for (const auto& f : frames) to->send(f, f["type"] == "telemetry");
    const auto now = clock::now();
    if (now - next > std::chrono::milliseconds(100)) next = now;  // fell far behind: resync rather than burst
    std::this_thread::sleep_until(next);
  }
}

Server::Server(ServerOptions opts) : impl_(std::make_shared<Impl>(std::move(opts))) {
  if (!impl_->opt.make_estimator) {
    const auto cfg = impl_->opt.sim.sensor;
    impl_->opt.make_estimator = [cfg] { return std::make_unique<control::AnalyticEstimator>(cfg); };
  }
  if (impl_->opt.phantoms.empty()) throw SchemaError("serve needs at least one phantom");
  if (impl_->opt.send_queue == 0 || impl_->opt.telemetry_every <= 0)
    throw RangeError("send queue and telemetry decimation must be positive");
}

Server::~Server() { stop(); }

void Server::start() {
  if (impl_->running) return;
  beast::error_code ec;
  const tcp::endpoint ep(asio::ip::make_address(impl_->opt.host), impl_->opt.port);
  impl_->acceptor.open(ep.protocol(), ec);
  if (!ec) impl_->acceptor.set_option(asio::socket_base::reuse_address(true), ec);
  if (!ec) impl_->acceptor.bind(ep, ec);
  if (ec == asio::error::address_in_use || ec == asio::error::access_denied)
    throw PortInUse("cannot bind " + impl_->opt.host + ":" + std::to_string(impl_->opt.port) + ": " + ec.message());
  if (!ec) impl_->acceptor.listen(asio::socket_base::max_listen_connections, ec);
  if (ec) throw PortInUse("cannot listen on port " + std::to_string(impl_->opt.port) + ": " + ec.message());
  impl_->running = true;
  impl_->accept();
  impl_->net_thread = std::thread([impl = impl_.get()] { impl->ioc.run(); });
  impl_->tick_thread = std::thread([impl = impl_.get()] { impl->tick_loop(); });
}

void Server::stop() {
  if (!impl_->running.exchange(false)) return;
  if (impl_->tick_thread.joinable()) impl_->tick_thread.join();
  impl_->ioc.stop();
  if (impl_->net_thread.joinable()) impl_->net_thread.join();
  {
    std::lock_guard lock(impl_->mu);
    impl_->client.reset();
    impl_->live.reset();
  }
  beast::error_code ec;
  impl_->acceptor.close(ec);
  impl_->stop_cv.notify_all();
}

std::uint16_t Server::port() const {
  beast::error_code ec;
  const auto ep = impl_->acceptor.local_endpoint(ec);
  return ec ? 0 : ep.port();
}

void Server::wait() {
  std::unique_lock lock(impl_->stop_mu);
  impl_->stop_cv.wait(lock, [&] { return !impl_->running.load(); });
}

std::size_t Server::dropped_frames() const { return impl_->dropped; }

}  // namespace needlebench::serve
