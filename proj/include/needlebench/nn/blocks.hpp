#pragma once

#include <optional>
#include <vector>

#include "needlebench/nn/conv.hpp"
#include "needlebench/nn/params.hpp"

namespace needlebench::nn {

/// relu(conv2(relu(conv1(x))) + skip(x)); skip is identity or a strided 1x1 conv.
struct ResBlock {
  ConvShape conv1, conv2;
  std::optional<ConvShape> skip;
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0, ws = 0, bs = 0;

  std::size_t in_size() const { return conv1.in_size(); }
  std::size_t mid_size() const { return conv1.out_size(); }
  std::size_t out_size() const { return conv2.out_size(); }

  /// Registers parameters under `prefix` and returns the block.
  static ResBlock make(ParamLayout& layout, const std::string& prefix, int cin, int cout, int h, int w, int kh,
                       int kw, int sh, int sw) {
    ResBlock b;
    b.conv1 = {cin, cout, h, w, kh, kw, sh, sw};
    b.conv2 = {cout, cout, b.conv1.ho(), b.conv1.wo(), kh, kw, 1, 1};
    b.w1 = layout.add(prefix + ".conv1.w", {cout, cin, kw, kh}, cin * kw * kh);
    b.b1 = layout.add(prefix + ".conv1.b", {cout}, 0);
    b.w2 = layout.add(prefix + ".conv2.w", {cout, cout, kw, kh}, cout * kw * kh);
    b.b2 = layout.add(prefix + ".conv2.b", {cout}, 0);
    if (sh != 1 || sw != 1 || cin != cout) {
      b.skip = ConvShape{cin, cout, h, w, 1, 1, sh, sw};
      b.ws = layout.add(prefix + ".skip.w", {cout, cin, 1, 1}, cin);
      b.bs = layout.add(prefix + ".skip.b", {cout}, 0);
    }
    return b;
  }
};

/// Activations a block keeps for its backward pass.
template <class T>
struct ResBlockCache {
  std::vector<T> mid;  // relu(conv1(x))
  std::vector<T> out;  // block output
  std::vector<T> dmid, dout_pre;
  void resize(const ResBlock& b) {
    mid.resize(b.mid_size());
    out.resize(b.out_size());
    dmid.resize(b.mid_size());
    dout_pre.resize(b.out_size());
  }
};

template <class T>
void res_block_forward(const ResBlock& b, const T* params, const T* in, ResBlockCache<T>& c) {
  conv_forward(b.conv1, in, params + b.w1, params + b.b1, c.mid.data());
  relu_inplace(c.mid.data(), c.mid.size());
  conv_forward(b.conv2, c.mid.data(), params + b.w2, params + b.b2, c.out.data());
  const std::size_t n = c.out.size();
  if (b.skip) {
    std::vector<T>& tmp = c.dout_pre;  // scratch until backward
    conv_forward(*b.skip, in, params + b.ws, params + b.bs, tmp.data());
    for (std::size_t i = 0; i < n; ++i) c.out[i] += tmp[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) c.out[i] += in[i];
  }
  relu_inplace(c.out.data(), n);
}

/// `dout` is the gradient w.r.t. the block output; accumulates into `din` and `grad`.
template <class T>
void res_block_backward(const ResBlock& b, const T* params, const T* in, const T* dout, T* din, T* grad,
                        ResBlockCache<T>& c) {
  const std::size_t n = c.out.size();
  for (std::size_t i = 0; i < n; ++i) c.dout_pre[i] = c.out[i] > T(0) ? dout[i] : T(0);
  std::fill(c.dmid.begin(), c.dmid.end(), T(0));
  conv_backward(b.conv2, c.mid.data(), params + b.w2, c.dout_pre.data(), c.dmid.data(), grad + b.w2, grad + b.b2);
  relu_backward_inplace(c.mid.data(), c.dmid.data(), c.dmid.size());
  conv_backward(b.conv1, in, params + b.w1, c.dmid.data(), din, grad + b.w1, grad + b.b1);
  if (b.skip) {
    conv_backward(*b.skip, in, params + b.ws, c.dout_pre.data(), din, grad + b.ws, grad + b.bs);
  } else if (din) {
    for (std::size_t i = 0; i < n; ++i) din[i] += c.dout_pre[i];
  }
}

}  // namespace needlebench::nn
