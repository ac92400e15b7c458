#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "needlebench/nn/blocks.hpp"
#include "needlebench/nn/params.hpp"

namespace needlebench::nn {

/// Small 2-D residual CNN over the H x T buffer of the most recent A-scans:
/// strided stem, residual blocks, linear head over the flattened feature map
/// (pooling would lose both the peak position and which frame is newest).
struct ResNetConfig {
  int height = 512;
  int width = 50;  // frames in the buffer
  int channels = 8;
  int stem_kh = 7, stem_kw = 3, stem_sh = 4, stem_sw = 2;
  std::vector<int> block_strides = {1, 2, 2, 2};

  nlohmann::json to_json() const;
  static ResNetConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct ResNetOffsets {
  ConvShape stem;
  std::size_t stem_w = 0, stem_b = 0;
  std::vector<ResBlock> blocks;
  int last_h = 0, last_w = 0;
  std::size_t fc_w = 0, fc_b = 0;
};

ParamLayout resnet_layout(const ResNetConfig& cfg);

template <class T>
class ResNet {
 public:
  explicit ResNet(ResNetConfig cfg);

  struct Workspace {
    std::vector<T> stem;  // post-relu stem output
    std::vector<ResBlockCache<T>> blocks;
    std::vector<T> flat;
    std::vector<T> dflat;
    std::vector<std::vector<T>> dblock_in;
    std::vector<T> dlast;
  };

  const ResNetConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  const ResNetOffsets& offsets() const { return off_; }
  std::size_t num_params() const { return layout_.total(); }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }

  void init(Rng& rng);
  Workspace make_workspace() const;

  /// `buffer` is width x height, oldest frame first (frame-major).
  T forward(const T* buffer, Workspace& ws) const;
  void backward(const T* buffer, T dy, T* grad, Workspace& ws) const;

 private:
  ResNetConfig cfg_;
  ParamLayout layout_;
  ResNetOffsets off_;
  std::vector<T> params_;
};

/// Cyclic buffer of the last `width` frames, zero-padded until full.
template <class T>
class ResNetStream {
 public:
  explicit ResNetStream(const ResNet<T>& model);
  T push(const T* frame);
  void reset();
  std::size_t frames_seen() const { return seen_; }
  bool warming_up() const { return seen_ < std::size_t(model_->config().width); }
  /// Buffer contents in time order (oldest first), as fed to the network.
  const std::vector<T>& linear() const { return linear_; }

 private:
  const ResNet<T>* model_;
  typename ResNet<T>::Workspace ws_;
  std::vector<T> ring_, linear_;
  std::size_t head_ = 0, seen_ = 0;
};

extern template class ResNet<float>;
extern template class ResNet<double>;
extern template class ResNetStream<float>;
extern template class ResNetStream<double>;

}  // namespace needlebench::nn
