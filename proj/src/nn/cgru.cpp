#include "needlebench/nn/cgru.hpp"

#include <algorithm>
#include <cmath>

namespace needlebench::nn {

using nlohmann::json;

json CgruConfig::to_json() const {
  return {{"height", height},         {"in_channels", in_channels}, {"channels", channels},
          {"kernel", kernel},         {"head_kernel", head_kernel}, {"head_blocks", head_blocks},
          {"fc_hidden", fc_hidden},   {"seq_len", seq_len}};
}

CgruConfig CgruConfig::from_json(const json& j) {
  CgruConfig c;
  c.height = j.value("height", c.height);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.channels = j.value("channels", c.channels);
  c.kernel = j.value("kernel", c.kernel);
  c.head_kernel = j.value("head_kernel", c.head_kernel);
  c.head_blocks = j.value("head_blocks", c.head_blocks);
  c.fc_hidden = j.value("fc_hidden", c.fc_hidden);
  c.seq_len = j.value("seq_len", c.seq_len);
  return c;
}

void CgruConfig::validate() const {
  if (height <= 0 || in_channels <= 0 || channels <= 0 || fc_hidden <= 0 || seq_len <= 0 || head_blocks < 0)
    throw ShapeMismatch("cGRU sizes must be positive");
  if (kernel % 2 == 0 || head_kernel % 2 == 0) throw ShapeMismatch("cGRU kernel widths must be odd");
}

namespace {

CgruOffsets build(const CgruConfig& c, ParamLayout& layout) {
  c.validate();
  CgruOffsets off;
  const int C = c.channels, Cin = c.in_channels, k = c.kernel;
  // Recurrent weights use std = sqrt(1 / fan_in): the layout's He init is
  // sqrt(2 / fan_in), hence the doubled fan-in.
  off.w_x = layout.add("gru.W_xz", {C, Cin, 1, k}, 2 * Cin * k);
  layout.add("gru.W_xr", {C, Cin, 1, k}, 2 * Cin * k);
  layout.add("gru.W_x", {C, Cin, 1, k}, 2 * Cin * k);
  off.b = layout.add("gru.b_z", {C}, 0);
  layout.add("gru.b_r", {C}, 0);
  layout.add("gru.b", {C}, 0);
  off.w_hgates = layout.add("gru.W_hz", {C, C, 1, k}, 2 * C * k);
  layout.add("gru.W_hr", {C, C, 1, k}, 2 * C * k);
  off.w_h = layout.add("gru.W_h", {C, C, 1, k}, 2 * C * k);

  int length = c.height;
  for (int i = 0; i < c.head_blocks; ++i) {
    off.blocks.push_back(ResBlock::make(layout, "head.block" + std::to_string(i), C, C, length, 1, c.head_kernel,
                                        1, 2, 1));
    length = off.blocks.back().conv1.ho();
  }
  off.flat = C * length;
  off.fc1_w = layout.add("head.fc1.w", {c.fc_hidden, off.flat}, off.flat);
  off.fc1_b = layout.add("head.fc1.b", {c.fc_hidden}, 0);
  off.fc2_w = layout.add("head.fc2.w", {1, c.fc_hidden}, c.fc_hidden / 2);
  off.fc2_b = layout.add("head.fc2.b", {1}, 0);
  return off;
}

template <class T>
inline T sigmoid(T a) {
  return T(1) / (T(1) + std::exp(-a));
}

}  // namespace

ParamLayout cgru_layout(const CgruConfig& cfg) {
  ParamLayout layout;
  build(cfg, layout);
  return layout;
}

template <class T>
CgruCnn<T>::CgruCnn(CgruConfig cfg) : cfg_(cfg) {
  off_ = build(cfg_, layout_);
  params_.assign(layout_.total(), T(0));
}

template <class T>
void CgruCnn<T>::init(Rng& rng) {
  init_params<T>(layout_, params_, rng);
}

template <class T>
typename CgruCnn<T>::Workspace CgruCnn<T>::make_workspace(int steps) const {
  Workspace ws;
  const std::size_t n = hidden_size();
  ws.steps = steps;
  ws.hs.assign((steps + 1) * n, T(0));
  ws.zs.assign(steps * n, T(0));
  ws.rs.assign(steps * n, T(0));
  ws.hhats.assign(steps * n, T(0));
  ws.gx.assign(3 * n, T(0));
  ws.gh.assign(2 * n, T(0));
  ws.rh.assign(n, T(0));
  ws.blocks.resize(off_.blocks.size());
  ws.dblock_in.resize(off_.blocks.size());
  for (std::size_t i = 0; i < off_.blocks.size(); ++i) {
    ws.blocks[i].resize(off_.blocks[i]);
    ws.dblock_in[i].assign(off_.blocks[i].in_size(), T(0));
  }
  ws.fc1.assign(cfg_.fc_hidden, T(0));
  ws.dfc1.assign(cfg_.fc_hidden, T(0));
  ws.dflat.assign(off_.flat, T(0));
  ws.dh.assign(n, T(0));
  ws.dh_prev.assign(n, T(0));
  ws.dgx.assign(3 * n, T(0));
  ws.drh.assign(n, T(0));
  return ws;
}

template <class T>
void CgruCnn<T>::cell(const T* x, const T* h_prev, T* h_out, T* z, T* r, T* hhat, Workspace& ws) const {
  const int C = cfg_.channels, H = cfg_.height;
  const std::size_t n = hidden_size();
  const T* p = params_.data();

  const auto xs = ConvShape::conv1d(cfg_.in_channels, 3 * C, H, cfg_.kernel);
  conv_forward(xs, x, p + off_.w_x, p + off_.b, ws.gx.data());
  const auto hs = ConvShape::conv1d(C, 2 * C, H, cfg_.kernel);
  conv_forward<T>(hs, h_prev, p + off_.w_hgates, nullptr, ws.gh.data());

  const T* gxz = ws.gx.data();
  const T* gxr = ws.gx.data() + n;
  const T* ghz = ws.gh.data();
  const T* ghr = ws.gh.data() + n;
  T* rh = ws.rh.data();
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = sigmoid(gxz[i] + ghz[i]);
    r[i] = sigmoid(gxr[i] + ghr[i]);
    rh[i] = r[i] * h_prev[i];
  }
  // Candidate pre-activation: W_h * (r . h) + (W_x * x + b), reusing gh as scratch.
  T* ah = ws.gh.data();
  const auto cs = ConvShape::conv1d(C, C, H, cfg_.kernel);
  conv_forward<T>(cs, rh, p + off_.w_h, nullptr, ah);
  const T* gxh = ws.gx.data() + 2 * n;
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) {
    hhat[i] = std::tanh(ah[i] + gxh[i]);
    h_out[i] = (T(1) - z[i]) * h_prev[i] + z[i] * hhat[i];
  }
}

template <class T>
T CgruCnn<T>::head(const T* h, Workspace& ws) const {
  const T* p = params_.data();
  const T* in = h;
  for (std::size_t i = 0; i < off_.blocks.size(); ++i) {
    res_block_forward(off_.blocks[i], p, in, ws.blocks[i]);
    in = ws.blocks[i].out.data();
  }
  dense_forward(off_.flat, cfg_.fc_hidden, in, p + off_.fc1_w, p + off_.fc1_b, ws.fc1.data());
  relu_inplace(ws.fc1.data(), ws.fc1.size());
  T y;
  dense_forward(cfg_.fc_hidden, 1, ws.fc1.data(), p + off_.fc2_w, p + off_.fc2_b, &y);
  return y;
}

template <class T>
T CgruCnn<T>::forward(const T* seq, Workspace& ws) const {
  const std::size_t n = hidden_size();
  const std::size_t frame = std::size_t(cfg_.in_channels) * cfg_.height;
  std::fill_n(ws.hs.begin(), n, T(0));
  for (int t = 0; t < ws.steps; ++t) {
    cell(seq + t * frame, ws.hs.data() + t * n, ws.hs.data() + (t + 1) * n, ws.zs.data() + t * n,
         ws.rs.data() + t * n, ws.hhats.data() + t * n, ws);
  }
  return head(ws.hs.data() + ws.steps * n, ws);
}

template <class T>
void CgruCnn<T>::head_backward(const T* h, T dy, T* grad, T* dh, Workspace& ws) const {
  const T* p = params_.data();
  const std::size_t nb = off_.blocks.size();
  const T* flat = nb ? ws.blocks[nb - 1].out.data() : h;

  std::fill(ws.dfc1.begin(), ws.dfc1.end(), T(0));
  dense_backward(cfg_.fc_hidden, 1, ws.fc1.data(), p + off_.fc2_w, &dy, ws.dfc1.data(), grad + off_.fc2_w,
                 grad + off_.fc2_b);
  relu_backward_inplace(ws.fc1.data(), ws.dfc1.data(), ws.dfc1.size());
  std::fill(ws.dflat.begin(), ws.dflat.end(), T(0));
  dense_backward(off_.flat, cfg_.fc_hidden, flat, p + off_.fc1_w, ws.dfc1.data(), ws.dflat.data(),
                 grad + off_.fc1_w, grad + off_.fc1_b);

  // dblock_in[i] is the gradient w.r.t. the input of block i.
  const T* dout = ws.dflat.data();
  for (std::size_t bi = nb; bi-- > 0;) {
    const T* in = bi == 0 ? h : ws.blocks[bi - 1].out.data();
    T* din = bi == 0 ? dh : ws.dblock_in[bi].data();
    if (bi != 0) std::fill(ws.dblock_in[bi].begin(), ws.dblock_in[bi].end(), T(0));
    res_block_backward(off_.blocks[bi], p, in, dout, din, grad, ws.blocks[bi]);
    dout = din;
  }
  if (nb == 0) {
    for (int i = 0; i < off_.flat; ++i) dh[i] += ws.dflat[i];
  }
}

template <class T>
void CgruCnn<T>::backward(const T* seq, T dy, T* grad, Workspace& ws) const {
  const int C = cfg_.channels, H = cfg_.height;
  const std::size_t n = hidden_size();
  const std::size_t frame = std::size_t(cfg_.in_channels) * H;
  const T* p = params_.data();

  std::fill(ws.dh.begin(), ws.dh.end(), T(0));
  head_backward(ws.hs.data() + ws.steps * n, dy, grad, ws.dh.data(), ws);

  const auto xs = ConvShape::conv1d(cfg_.in_channels, 3 * C, H, cfg_.kernel);
  const auto hs = ConvShape::conv1d(C, 2 * C, H, cfg_.kernel);
  const auto cs = ConvShape::conv1d(C, C, H, cfg_.kernel);

  for (int t = ws.steps; t-- > 0;) {
    const T* h_prev = ws.hs.data() + t * n;
    const T* z = ws.zs.data() + t * n;
    const T* r = ws.rs.data() + t * n;
    const T* hhat = ws.hhats.data() + t * n;
    const T* dh = ws.dh.data();
    T* dh_prev = ws.dh_prev.data();
    T* daz = ws.dgx.data();
    T* dar = ws.dgx.data() + n;
    T* dah = ws.dgx.data() + 2 * n;
    T* rh = ws.rh.data();
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) {
      const T dz = dh[i] * (hhat[i] - h_prev[i]);
      dah[i] = dh[i] * z[i] * (T(1) - hhat[i] * hhat[i]);
      daz[i] = dz * z[i] * (T(1) - z[i]);
      dh_prev[i] = dh[i] * (T(1) - z[i]);
      rh[i] = r[i] * h_prev[i];
    }
    std::fill(ws.drh.begin(), ws.drh.end(), T(0));
    conv_backward<T>(cs, rh, p + off_.w_h, dah, ws.drh.data(), grad + off_.w_h, nullptr);
    const T* drh = ws.drh.data();
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) {
      const T dr = drh[i] * h_prev[i];
      dar[i] = dr * r[i] * (T(1) - r[i]);
      dh_prev[i] += drh[i] * r[i];
    }
    conv_backward<T>(hs, h_prev, p + off_.w_hgates, ws.dgx.data(), dh_prev, grad + off_.w_hgates, nullptr);
    conv_backward<T>(xs, seq + t * frame, p + off_.w_x, ws.dgx.data(), nullptr, grad + off_.w_x, grad + off_.b);
    std::swap(ws.dh, ws.dh_prev);
  }
}

template <class T>
CgruStream<T>::CgruStream(const CgruCnn<T>& model) : model_(&model), ws_(model.make_workspace(1)) {
  const std::size_t n = model.hidden_size();
  h_.assign(n, T(0));
  h_next_.assign(n, T(0));
  z_.assign(n, T(0));
  r_.assign(n, T(0));
  hhat_.assign(n, T(0));
}

template <class T>
T CgruStream<T>::push(const T* frame) {
  model_->cell(frame, h_.data(), h_next_.data(), z_.data(), r_.data(), hhat_.data(), ws_);
  std::swap(h_, h_next_);
  ++seen_;
  return model_->head(h_.data(), ws_);
}

template <class T>
void CgruStream<T>::reset() {
  std::fill(h_.begin(), h_.end(), T(0));
  seen_ = 0;
}

template class CgruCnn<float>;
template class CgruCnn<double>;
template class CgruStream<float>;
template class CgruStream<double>;

}  // namespace needlebench::nn
