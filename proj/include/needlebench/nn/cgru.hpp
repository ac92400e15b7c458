#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "needlebench/nn/blocks.hpp"
#include "needlebench/nn/params.hpp"

namespace needlebench::nn {

/// Convolutional GRU over A-scans followed by a residual 1-D CNN head.
struct CgruConfig {
  int height = 512;
  int in_channels = 1;
  int channels = 8;
  int kernel = 7;
  int head_kernel = 3;
  int head_blocks = 2;
  int fc_hidden = 32;
  int seq_len = 50;

  nlohmann::json to_json() const;
  static CgruConfig from_json(const nlohmann::json& j);
  void validate() const;
};

ParamLayout cgru_layout(const CgruConfig& cfg);

/// Offsets of the fused recurrent weights inside the flat parameter vector.
/// W_xz, W_xr, W_x are contiguous (and so are b_z, b_r, b and W_hz, W_hr) so
/// one convolution computes all gate inputs at once.
struct CgruOffsets {
  std::size_t w_x = 0;       // [3C][Cin][1][k]
  std::size_t b = 0;         // [3C]
  std::size_t w_hgates = 0;  // [2C][C][1][k]
  std::size_t w_h = 0;       // [C][C][1][k]
  std::vector<ResBlock> blocks;
  std::size_t fc1_w = 0, fc1_b = 0, fc2_w = 0, fc2_b = 0;
  int flat = 0;
};

template <class T>
class CgruCnn {
 public:
  explicit CgruCnn(CgruConfig cfg);

  struct Workspace {
    std::vector<T> hs;                // (steps + 1) x C x H
    std::vector<T> zs, rs, hhats;     // steps x C x H
    std::vector<T> gx, gh, rh;        // gate scratch
    std::vector<ResBlockCache<T>> blocks;
    std::vector<T> fc1;               // post-relu hidden layer
    std::vector<T> dh, dh_prev, dgx, drh, dflat, dfc1;
    std::vector<std::vector<T>> dblock_in;
    int steps = 0;
  };

  const CgruConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t num_params() const { return layout_.total(); }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }

  void init(Rng& rng);
  Workspace make_workspace(int steps) const;

  /// One recurrent step; `z`, `r`, `hhat` receive the gate activations.
  void cell(const T* x, const T* h_prev, T* h_out, T* z, T* r, T* hhat, Workspace& ws) const;
  /// Regression head on a hidden state; caches activations in `ws`.
  T head(const T* h, Workspace& ws) const;
  /// Full sequence (steps x H, time-major) from h_0 = 0.
  T forward(const T* seq, Workspace& ws) const;
  /// Backprop of `dy` through the last `forward`; accumulates into `grad`.
  void backward(const T* seq, T dy, T* grad, Workspace& ws) const;

  std::size_t hidden_size() const { return std::size_t(cfg_.channels) * cfg_.height; }
  const CgruOffsets& offsets() const { return off_; }

 private:
  void head_backward(const T* h, T dy, T* grad, T* dh, Workspace& ws) const;

  CgruConfig cfg_;
  ParamLayout layout_;
  CgruOffsets off_;
  std::vector<T> params_;
};

/// Streaming inference: one cell step per incoming frame, hidden state carried.
template <class T>
class CgruStream {
 public:
  explicit CgruStream(const CgruCnn<T>& model);
  T push(const T* frame);
  void reset();
  const std::vector<T>& hidden() const { return h_; }
  std::size_t frames_seen() const { return seen_; }

 private:
  const CgruCnn<T>* model_;
  typename CgruCnn<T>::Workspace ws_;
  std::vector<T> h_, h_next_, z_, r_, hhat_;
  std::size_t seen_ = 0;
};

extern template class CgruCnn<float>;
extern template class CgruCnn<double>;
extern template class CgruStream<float>;
extern template class CgruStream<double>;

}  // namespace needlebench::nn
