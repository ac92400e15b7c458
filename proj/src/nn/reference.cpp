#include "needlebench/nn/reference.hpp"

#include <cmath>

namespace needlebench::nn::reference {

Vec NamedParams::get(const std::string& name) const {
  const auto& s = layout->slot(name);
  return Vec(values.begin() + s.offset, values.begin() + s.offset + s.count);
}

Vec conv1d(const Vec& in, int cin, int length, const Vec& weight, const Vec& bias, int cout, int k, int stride) {
  const int pad = k / 2;
  const int lo = (length + 2 * pad - k) / stride + 1;
  Vec out(std::size_t(cout) * lo, 0.0);
  for (int o = 0; o < cout; ++o) {
    for (int i = 0; i < lo; ++i) {
      double acc = bias.empty() ? 0.0 : bias[o];
      for (int c = 0; c < cin; ++c) {
        for (int j = 0; j < k; ++j) {
          const int src = i * stride + j - pad;
          if (src < 0 || src >= length) continue;
          acc += weight[(o * cin + c) * k + j] * in[c * length + src];
        }
      }
      out[o * lo + i] = acc;
    }
  }
  return out;
}

Vec conv2d(const Vec& in, int cin, int height, int width, const Vec& weight, const Vec& bias, int cout, int kh, int kw,
           int sh, int sw) {
  const int ph = kh / 2, pw = kw / 2;
  const int ho = (height + 2 * ph - kh) / sh + 1;
  const int wo = (width + 2 * pw - kw) / sw + 1;
  Vec out(std::size_t(cout) * wo * ho, 0.0);
  for (int o = 0; o < cout; ++o)
    for (int t = 0; t < wo; ++t)
      for (int i = 0; i < ho; ++i) {
        double acc = bias.empty() ? 0.0 : bias[o];
        for (int c = 0; c < cin; ++c)
          for (int a = 0; a < kw; ++a)
            for (int b = 0; b < kh; ++b) {
              const int st = t * sw + a - pw;
              const int si = i * sh + b - ph;
              if (st < 0 || st >= width || si < 0 || si >= height) continue;
              acc += weight[((o * cin + c) * kw + a) * kh + b] * in[(c * width + st) * height + si];
            }
        out[(o * wo + t) * ho + i] = acc;
      }
  return out;
}

namespace {
double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }
}

Vec cgru_cell(const NamedParams& p, const CgruConfig& cfg, const Vec& x, const Vec& h_prev) {
  const int C = cfg.channels, H = cfg.height, Cin = cfg.in_channels, k = cfg.kernel;
  const Vec hz = conv1d(h_prev, C, H, p.get("gru.W_hz"), {}, C, k, 1);
  const Vec xz = conv1d(x, Cin, H, p.get("gru.W_xz"), {}, C, k, 1);
  const Vec hr = conv1d(h_prev, C, H, p.get("gru.W_hr"), {}, C, k, 1);
  const Vec xr = conv1d(x, Cin, H, p.get("gru.W_xr"), {}, C, k, 1);
  const Vec xh = conv1d(x, Cin, H, p.get("gru.W_x"), {}, C, k, 1);
  const Vec bz = p.get("gru.b_z"), br = p.get("gru.b_r"), b = p.get("gru.b");

  Vec z(h_prev.size()), r(h_prev.size()), rh(h_prev.size());
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H; ++i) {
      const int idx = c * H + i;
      z[idx] = sigmoid(hz[idx] + xz[idx] + bz[c]);
      r[idx] = sigmoid(hr[idx] + xr[idx] + br[c]);
      rh[idx] = r[idx] * h_prev[idx];
    }
  const Vec hh = conv1d(rh, C, H, p.get("gru.W_h"), {}, C, k, 1);
  Vec h(h_prev.size());
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H; ++i) {
      const int idx = c * H + i;
      const double cand = std::tanh(hh[idx] + xh[idx] + b[c]);
      h[idx] = (1.0 - z[idx]) * h_prev[idx] + z[idx] * cand;
    }
  return h;
}

Vec res_block(const NamedParams& p, const std::string& prefix, const Vec& in, int cin, int cout, int height, int width,
              int k_h, int k_w, int stride_h, int stride_w, bool has_skip) {
  Vec mid = conv2d(in, cin, height, width, p.get(prefix + ".conv1.w"), p.get(prefix + ".conv1.b"), cout, k_h, k_w,
                   stride_h, stride_w);
  for (double& v : mid) v = std::max(0.0, v);
  const int ho = (height + 2 * (k_h / 2) - k_h) / stride_h + 1;
  const int wo = (width + 2 * (k_w / 2) - k_w) / stride_w + 1;
  Vec out = conv2d(mid, cout, ho, wo, p.get(prefix + ".conv2.w"), p.get(prefix + ".conv2.b"), cout, k_h, k_w, 1, 1);
  if (has_skip) {
    const Vec skip = conv2d(in, cin, height, width, p.get(prefix + ".skip.w"), p.get(prefix + ".skip.b"), cout, 1, 1,
                            stride_h, stride_w);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += skip[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i];
  }
  for (double& v : out) v = std::max(0.0, v);
  return out;
}

double cgru_head(const NamedParams& p, const CgruConfig& cfg, const Vec& h) {
  Vec x = h;
  int length = cfg.height;
  for (int b = 0; b < cfg.head_blocks; ++b) {
    x = res_block(p, "head.block" + std::to_string(b), x, cfg.channels, cfg.channels, length, 1, cfg.head_kernel, 1,
                  2, 1, true);
    length = (length + 2 * (cfg.head_kernel / 2) - cfg.head_kernel) / 2 + 1;
  }
  const Vec w1 = p.get("head.fc1.w"), b1 = p.get("head.fc1.b");
  const Vec w2 = p.get("head.fc2.w"), b2 = p.get("head.fc2.b");
  const std::size_t flat = x.size();
  double y = b2[0];
  for (int f = 0; f < cfg.fc_hidden; ++f) {
    double a = b1[f];
    for (std::size_t i = 0; i < flat; ++i) a += w1[f * flat + i] * x[i];
    y += w2[f] * std::max(0.0, a);
  }
  return y;
}

double cgru_forward(const NamedParams& p, const CgruConfig& cfg, const Vec& seq, int steps) {
  const std::size_t frame = std::size_t(cfg.in_channels) * cfg.height;
  Vec h(std::size_t(cfg.channels) * cfg.height, 0.0);
  for (int t = 0; t < steps; ++t) {
    const Vec x(seq.begin() + t * frame, seq.begin() + (t + 1) * frame);
    h = cgru_cell(p, cfg, x, h);
  }
  return cgru_head(p, cfg, h);
}

double resnet_forward(const NamedParams& p, const ResNetConfig& cfg, const Vec& buffer) {
  Vec x = conv2d(buffer, 1, cfg.height, cfg.width, p.get("stem.w"), p.get("stem.b"), cfg.channels, cfg.stem_kh,
                 cfg.stem_kw, cfg.stem_sh, cfg.stem_sw);
  for (double& v : x) v = std::max(0.0, v);
  int h = (cfg.height + 2 * (cfg.stem_kh / 2) - cfg.stem_kh) / cfg.stem_sh + 1;
  int w = (cfg.width + 2 * (cfg.stem_kw / 2) - cfg.stem_kw) / cfg.stem_sw + 1;
  for (std::size_t b = 0; b < cfg.block_strides.size(); ++b) {
    const int s = cfg.block_strides[b];
    x = res_block(p, "block" + std::to_string(b), x, cfg.channels, cfg.channels, h, w, 3, 3, s, s, s != 1);
    h = (h - 1) / s + 1;
    w = (w - 1) / s + 1;
  }
  const Vec fw = p.get("fc.w"), fb = p.get("fc.b");
  double y = fb[0];
  for (std::size_t i = 0; i < x.size(); ++i) y += fw[i] * x[i];
  return y;
}

}  // namespace needlebench::nn::reference
