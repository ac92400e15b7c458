#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <variant>

#include <json.hpp>

#include "needlebench/nn/cgru.hpp"
#include "needlebench/nn/resnet.hpp"

namespace needlebench::nn {

enum class Arch { Cgru, ResNet };
std::string_view to_string(Arch a);
Arch arch_from_string(std::string_view s);

/// Frame-by-frame inference state for one stream of A-scans.
class ForceStream {
 public:
  virtual ~ForceStream() = default;
  virtual float push(const float* frame) = 0;
  virtual void reset() = 0;
  virtual bool warming_up() const = 0;
};

/// Either regressor behind one value type (float32 weights).
class ForceModel {
 public:
  static ForceModel cgru(const CgruConfig& cfg);
  static ForceModel resnet(const ResNetConfig& cfg);

  Arch arch() const { return net_.index() == 0 ? Arch::Cgru : Arch::ResNet; }
  int seq_len() const;
  int height() const;
  std::span<float> params();
  std::span<const float> params() const;
  const ParamLayout& layout() const;
  nlohmann::json config_json() const;
  static ForceModel from_config(Arch arch, const nlohmann::json& cfg);

  void init(Rng& rng);
  /// Window of seq_len frames (frame-major) evaluated from a cold start.
  float forward_window(const float* window) const;
  std::unique_ptr<ForceStream> stream() const;

  template <class F>
  decltype(auto) visit(F&& f) {
    return std::visit(std::forward<F>(f), net_);
  }
  template <class F>
  decltype(auto) visit(F&& f) const {
    return std::visit(std::forward<F>(f), net_);
  }

 private:
  explicit ForceModel(std::variant<CgruCnn<float>, ResNet<float>> net) : net_(std::move(net)) {}
  std::variant<CgruCnn<float>, ResNet<float>> net_;
};

}  // namespace needlebench::nn
