#include "needlebench/nn/resnet.hpp"

#include <algorithm>

namespace needlebench::nn {

using nlohmann::json;

json ResNetConfig::to_json() const {
  return {{"height", height},   {"width", width},     {"channels", channels}, {"stem_kh", stem_kh},
          {"stem_kw", stem_kw}, {"stem_sh", stem_sh}, {"stem_sw", stem_sw},   {"block_strides", block_strides}};
}

ResNetConfig ResNetConfig::from_json(const json& j) {
  ResNetConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.channels = j.value("channels", c.channels);
  c.stem_kh = j.value("stem_kh", c.stem_kh);
  c.stem_kw = j.value("stem_kw", c.stem_kw);
  c.stem_sh = j.value("stem_sh", c.stem_sh);
  c.stem_sw = j.value("stem_sw", c.stem_sw);
  c.block_strides = j.value("block_strides", c.block_strides);
  return c;
}

void ResNetConfig::validate() const {
  if (height <= 0 || width <= 0 || channels <= 0 || stem_sh <= 0 || stem_sw <= 0)
    throw ShapeMismatch("ResNet sizes must be positive");
  if (stem_kh % 2 == 0 || stem_kw % 2 == 0) throw ShapeMismatch("ResNet kernel extents must be odd");
  for (int s : block_strides)
    if (s <= 0) throw ShapeMismatch("ResNet block strides must be positive");
}

namespace {

ResNetOffsets build(const ResNetConfig& c, ParamLayout& layout) {
  c.validate();
  ResNetOffsets off;
  off.stem = {1, c.channels, c.height, c.width, c.stem_kh, c.stem_kw, c.stem_sh, c.stem_sw};
  off.stem_w = layout.add("stem.w", {c.channels, 1, c.stem_kw, c.stem_kh}, c.stem_kw * c.stem_kh);
  off.stem_b = layout.add("stem.b", {c.channels}, 0);
  int h = off.stem.ho(), w = off.stem.wo();
  for (std::size_t i = 0; i < c.block_strides.size(); ++i) {
    const int s = c.block_strides[i];
    off.blocks.push_back(
        ResBlock::make(layout, "block" + std::to_string(i), c.channels, c.channels, h, w, 3, 3, s, s));
    h = off.blocks.back().conv1.ho();
    w = off.blocks.back().conv1.wo();
  }
  off.last_h = h;
  off.last_w = w;
  off.fc_w = layout.add("fc.w", {1, c.channels * h * w}, c.channels * h * w);
  off.fc_b = layout.add("fc.b", {1}, 0);
  return off;
}

}  // namespace

ParamLayout resnet_layout(const ResNetConfig& cfg) {
  ParamLayout layout;
  build(cfg, layout);
  return layout;
}

template <class T>
ResNet<T>::ResNet(ResNetConfig cfg) : cfg_(std::move(cfg)) {
  off_ = build(cfg_, layout_);
  params_.assign(layout_.total(), T(0));
}

template <class T>
void ResNet<T>::init(Rng& rng) {
  init_params<T>(layout_, params_, rng);
}

template <class T>
typename ResNet<T>::Workspace ResNet<T>::make_workspace() const {
  Workspace ws;
  ws.stem.assign(off_.stem.out_size(), T(0));
  ws.blocks.resize(off_.blocks.size());
  ws.dblock_in.resize(off_.blocks.size());
  for (std::size_t i = 0; i < off_.blocks.size(); ++i) {
    ws.blocks[i].resize(off_.blocks[i]);
    ws.dblock_in[i].assign(off_.blocks[i].in_size(), T(0));
  }
  ws.flat.assign(std::size_t(cfg_.channels) * off_.last_h * off_.last_w, T(0));
  ws.dflat.assign(ws.flat.size(), T(0));
  ws.dlast.assign(off_.blocks.empty() ? off_.stem.out_size() : off_.blocks.back().out_size(), T(0));
  return ws;
}

template <class T>
T ResNet<T>::forward(const T* buffer, Workspace& ws) const {
  const T* p = params_.data();
  conv_forward(off_.stem, buffer, p + off_.stem_w, p + off_.stem_b, ws.stem.data());
  relu_inplace(ws.stem.data(), ws.stem.size());
  const T* in = ws.stem.data();
  for (std::size_t i = 0; i < off_.blocks.size(); ++i) {
    res_block_forward(off_.blocks[i], p, in, ws.blocks[i]);
    in = ws.blocks[i].out.data();
  }
  std::copy_n(in, ws.flat.size(), ws.flat.begin());
  T y;
  dense_forward(int(ws.flat.size()), 1, ws.flat.data(), p + off_.fc_w, p + off_.fc_b, &y);
  return y;
}

template <class T>
void ResNet<T>::backward(const T* buffer, T dy, T* grad, Workspace& ws) const {
  const T* p = params_.data();
  std::fill(ws.dflat.begin(), ws.dflat.end(), T(0));
  dense_backward(int(ws.flat.size()), 1, ws.flat.data(), p + off_.fc_w, &dy, ws.dflat.data(),
                 grad + off_.fc_w, grad + off_.fc_b);
  std::copy(ws.dflat.begin(), ws.dflat.end(), ws.dlast.begin());

  const T* dout = ws.dlast.data();
  for (std::size_t bi = off_.blocks.size(); bi-- > 0;) {
    const T* in = bi == 0 ? ws.stem.data() : ws.blocks[bi - 1].out.data();
    std::fill(ws.dblock_in[bi].begin(), ws.dblock_in[bi].end(), T(0));
    res_block_backward(off_.blocks[bi], p, in, dout, ws.dblock_in[bi].data(), grad, ws.blocks[bi]);
    dout = ws.dblock_in[bi].data();
  }
  // Through the stem relu; the input gradient is not needed.
  std::vector<T> dstem(dout, dout + ws.stem.size());
  relu_backward_inplace(ws.stem.data(), dstem.data(), dstem.size());
  conv_backward<T>(off_.stem, buffer, p + off_.stem_w, dstem.data(), nullptr, grad + off_.stem_w,
                   grad + off_.stem_b);
}

template <class T>
ResNetStream<T>::ResNetStream(const ResNet<T>& model) : model_(&model), ws_(model.make_workspace()) {
  const std::size_t n = std::size_t(model.config().width) * model.config().height;
  ring_.assign(n, T(0));
  linear_.assign(n, T(0));
}

template <class T>
T ResNetStream<T>::push(const T* frame) {
  const std::size_t H = model_->config().height;
  const std::size_t W = model_->config().width;
  std::copy_n(frame, H, ring_.begin() + head_ * H);
  head_ = (head_ + 1) % W;
  ++seen_;
  // Oldest slot is at head_ once the ring has wrapped; before that the
  // unwritten slots are zeros and also come first.
  for (std::size_t k = 0; k < W; ++k) {
    const std::size_t slot = (head_ + k) % W;
    std::copy_n(ring_.begin() + slot * H, H, linear_.begin() + k * H);
  }
  return model_->forward(linear_.data(), ws_);
}

template <class T>
void ResNetStream<T>::reset() {
  std::fill(ring_.begin(), ring_.end(), T(0));
  head_ = 0;
  seen_ = 0;
}

template class ResNet<float>;
template class ResNet<double>;
template class ResNetStream<float>;
template class ResNetStream<double>;

}  // namespace needlebench::nn
