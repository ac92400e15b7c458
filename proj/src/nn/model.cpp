#include "needlebench/nn/model.hpp"

namespace needlebench::nn {

std::string_view to_string(Arch a) { return a == Arch::Cgru ? "cgru" : "resnet"; }

Arch arch_from_string(std::string_view s) {
  if (s == "cgru") return Arch::Cgru;
  if (s == "resnet") return Arch::ResNet;
  throw SchemaError("unknown architecture '" + std::string(s) + "' (expected cgru|resnet)");
}

namespace {

class CgruForceStream final : public ForceStream {
 public:
  explicit CgruForceStream(const CgruCnn<float>& m) : s_(m), seq_len_(m.config().seq_len) {}
  float push(const float* frame) override { return s_.push(frame); }
  void reset() override { s_.reset(); }
  bool warming_up() const override { return s_.frames_seen() < std::size_t(seq_len_); }

 private:
  CgruStream<float> s_;
  int seq_len_;
};

class ResNetForceStream final : public ForceStream {
 public:
  explicit ResNetForceStream(const ResNet<float>& m) : s_(m) {}
  float push(const float* frame) override { return s_.push(frame); }
  void reset() override { s_.reset(); }
  bool warming_up() const override { return s_.warming_up(); }

 private:
  ResNetStream<float> s_;
};

}  // namespace

ForceModel ForceModel::cgru(const CgruConfig& cfg) { return ForceModel(CgruCnn<float>(cfg)); }
ForceModel ForceModel::resnet(const ResNetConfig& cfg) { return ForceModel(ResNet<float>(cfg)); }

ForceModel ForceModel::from_config(Arch arch, const nlohmann::json& cfg) {
  return arch == Arch::Cgru ? cgru(CgruConfig::from_json(cfg)) : resnet(ResNetConfig::from_json(cfg));
}

int ForceModel::seq_len() const {
  return std::visit(
      [](const auto& m) {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, CgruCnn<float>>)
          return m.config().seq_len;
        else
          return m.config().width;
      },
      net_);
}

int ForceModel::height() const {
  return std::visit([](const auto& m) { return m.config().height; }, net_);
}

std::span<float> ForceModel::params() {
  return std::visit([](auto& m) { return m.params(); }, net_);
}

std::span<const float> ForceModel::params() const {
  return std::visit([](const auto& m) { return m.params(); }, net_);
}

const ParamLayout& ForceModel::layout() const {
  return std::visit([](const auto& m) -> const ParamLayout& { return m.layout(); }, net_);
}

nlohmann::json ForceModel::config_json() const {
  return std::visit([](const auto& m) { return m.config().to_json(); }, net_);
}

void ForceModel::init(Rng& rng) {
  std::visit([&](auto& m) { m.init(rng); }, net_);
}

float ForceModel::forward_window(const float* window) const {
  return std::visit(
      [&](const auto& m) {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, CgruCnn<float>>) {
          auto ws = m.make_workspace(m.config().seq_len);
          return m.forward(window, ws);
        } else {
          auto ws = m.make_workspace();
          return m.forward(window, ws);
        }
      },
      net_);
}

std::unique_ptr<ForceStream> ForceModel::stream() const {
  return std::visit(
      [](const auto& m) -> std::unique_ptr<ForceStream> {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, CgruCnn<float>>)
          return std::make_unique<CgruForceStream>(m);
        else
          return std::make_unique<ResNetForceStream>(m);
      },
      net_);
}

}  // namespace needlebench::nn
