#pragma once

// Optimized convolution / dense kernels shared by both regressors.
//
// Tensors are dense row-major [channels][width][height] with `height` (the
// A-scan axis) contiguous; 1-D convolutions are the width == 1 case. Inner
// loops run over height so they vectorize with `omp simd`.

#include <algorithm>
#include <cstddef>
#include <vector>

namespace needlebench::nn {

struct ConvShape {
  int cin = 1, cout = 1;
  int h = 1, w = 1;    // input extent
  int kh = 1, kw = 1;  // odd kernel extents, same padding
  int sh = 1, sw = 1;  // strides

  int ph() const { return kh / 2; }
  int pw() const { return kw / 2; }
  int ho() const { return (h + 2 * ph() - kh) / sh + 1; }
  int wo() const { return (w + 2 * pw() - kw) / sw + 1; }
  std::size_t in_size() const { return std::size_t(cin) * w * h; }
  std::size_t out_size() const { return std::size_t(cout) * wo() * ho(); }
  std::size_t weight_size() const { return std::size_t(cout) * cin * kw * kh; }

  static ConvShape conv1d(int cin, int cout, int length, int k, int stride = 1) {
    return {cin, cout, length, 1, k, 1, stride, 1};
  }
};

namespace detail {

constexpr int kBlock = 64;  // output elements accumulated in registers

template <class T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> buf[2];
  return buf[slot];
}

/// Copies [c][w][h] rows into [c][w][stride] with `pad` zeros in front, zero tail.
template <class T>
const T* pad_rows(const T* src, int rows, int h, int pad, int stride, int slot) {
  auto& buf = scratch<T>(slot);
  buf.assign(std::size_t(rows) * stride + kBlock, T(0));
  for (int r = 0; r < rows; ++r) std::copy_n(src + std::size_t(r) * h, h, buf.data() + std::size_t(r) * stride + pad);
  return buf.data();
}

inline int padded_stride(int h, int pad) { return (h + 2 * pad + kBlock + 15) / 16 * 16; }

template <class T>
void conv_forward_s1(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out) {
  const int ho = s.h, wo = s.wo(), ph = s.ph(), pw = s.pw();
  const int stride = padded_stride(s.h, ph);
  const T* pin = pad_rows(in, s.cin * s.w, s.h, ph, stride, 0);
  for (int o = 0; o < s.cout; ++o) {
    const T b = bias ? bias[o] : T(0);
    for (int ot = 0; ot < wo; ++ot) {
      T* orow = out + (std::size_t(o) * wo + ot) * ho;
      for (int i0 = 0; i0 < ho; i0 += kBlock) {
        T acc[kBlock];
        for (int v = 0; v < kBlock; ++v) acc[v] = b;
        for (int c = 0; c < s.cin; ++c) {
          const T* w_oc = weight + (std::size_t(o) * s.cin + c) * s.kw * s.kh;
          for (int jt = 0; jt < s.kw; ++jt) {
            const int it = ot * s.sw + jt - pw;
            if (it < 0 || it >= s.w) continue;
            const T* src = pin + (std::size_t(c) * s.w + it) * stride + i0;
            for (int jh = 0; jh < s.kh; ++jh) {
              const T wv = w_oc[jt * s.kh + jh];
#pragma omp simd
              for (int v = 0; v < kBlock; ++v) acc[v] += wv * src[jh + v];
            }
          }
        }
        std::copy_n(acc, std::min(kBlock, ho - i0), orow + i0);
      }
    }
  }
}

template <class T>
void conv_backward_s1(const ConvShape& s, const T* in, const T* weight, const T* dout, T* din, T* dweight, T* dbias) {
  const int ho = s.h, wo = s.wo(), ph = s.ph(), pw = s.pw();
  const int stride = padded_stride(s.h, ph);
  constexpr int V = 16;
  const T* pout = pad_rows(dout, s.cout * wo, ho, ph, stride, 1);
  if (dbias) {
    for (int o = 0; o < s.cout; ++o) {
      const T* g = dout + std::size_t(o) * wo * ho;
      T acc = 0;
#pragma omp simd reduction(+ : acc)
      for (int i = 0; i < wo * ho; ++i) acc += g[i];
      dbias[o] += acc;
    }
  }
  if (dweight) {
    const T* pin = pad_rows(in, s.cin * s.w, s.h, ph, stride, 0);
    for (int o = 0; o < s.cout; ++o)
      for (int c = 0; c < s.cin; ++c) {
        T* dw = dweight + (std::size_t(o) * s.cin + c) * s.kw * s.kh;
        for (int ot = 0; ot < wo; ++ot) {
          // zero tail past ho in the padded gradient row keeps the blocks exact
          const T* g = pout + (std::size_t(o) * wo + ot) * stride + ph;
          for (int jt = 0; jt < s.kw; ++jt) {
            const int it = ot * s.sw + jt - pw;
            if (it < 0 || it >= s.w) continue;
            const T* src = pin + (std::size_t(c) * s.w + it) * stride;
            for (int jh = 0; jh < s.kh; ++jh) {
              T acc[V] = {};
              for (int i0 = 0; i0 < ho; i0 += V) {
#pragma omp simd
                for (int v = 0; v < V; ++v) acc[v] += g[i0 + v] * src[i0 + jh + v];
              }
              T sum = 0;
              for (int v = 0; v < V; ++v) sum += acc[v];
              dw[jt * s.kh + jh] += sum;
            }
          }
        }
      }
  }
  if (din) {
    for (int c = 0; c < s.cin; ++c)
      for (int it = 0; it < s.w; ++it) {
        T* drow = din + (std::size_t(c) * s.w + it) * s.h;
        for (int i0 = 0; i0 < s.h; i0 += kBlock) {
          T acc[kBlock] = {};
          for (int o = 0; o < s.cout; ++o) {
            const T* w_oc = weight + (std::size_t(o) * s.cin + c) * s.kw * s.kh;
            for (int jt = 0; jt < s.kw; ++jt) {
              const int ot = it - jt + pw;
              if (ot < 0 || ot >= wo) continue;
              const T* src = pout + (std::size_t(o) * wo + ot) * stride + i0 + 2 * ph;
              for (int jh = 0; jh < s.kh; ++jh) {
                const T wv = w_oc[jt * s.kh + jh];
#pragma omp simd
                for (int v = 0; v < kBlock; ++v) acc[v] += wv * src[v - jh];
              }
            }
          }
          const int n = std::min(kBlock, s.h - i0);
          for (int v = 0; v < n; ++v) drow[i0 + v] += acc[v];
        }
      }
  }
}

}  // namespace detail

/// out = bias + conv(in, weight). `bias` may be null.
template <class T>
void conv_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out) {
  if (s.sh == 1 && s.sw == 1) return detail::conv_forward_s1(s, in, weight, bias, out);
  const int ho = s.ho(), wo = s.wo(), ph = s.ph(), pw = s.pw();
  for (int o = 0; o < s.cout; ++o) {
    T* out_o = out + std::size_t(o) * wo * ho;
    const T b = bias ? bias[o] : T(0);
    for (int i = 0; i < wo * ho; ++i) out_o[i] = b;
    for (int c = 0; c < s.cin; ++c) {
      const T* in_c = in + std::size_t(c) * s.w * s.h;
      const T* w_oc = weight + (std::size_t(o) * s.cin + c) * s.kw * s.kh;
      for (int ot = 0; ot < wo; ++ot) {
        T* orow = out_o + std::size_t(ot) * ho;
        for (int jt = 0; jt < s.kw; ++jt) {
          const int it = ot * s.sw + jt - pw;
          if (it < 0 || it >= s.w) continue;
          const T* irow = in_c + std::size_t(it) * s.h;
          for (int jh = 0; jh < s.kh; ++jh) {
            const T wv = w_oc[jt * s.kh + jh];
            const int shift = jh - ph;
            // valid i: 0 <= i*sh + shift < h
            const int lo = shift >= 0 ? 0 : (-shift + s.sh - 1) / s.sh;
            const int hi = s.h - 1 - shift < 0 ? 0 : std::min(ho, (s.h - 1 - shift) / s.sh + 1);
            if (s.sh == 1) {
              const T* src = irow + shift;
#pragma omp simd
              for (int i = lo; i < hi; ++i) orow[i] += wv * src[i];
            } else {
              for (int i = lo; i < hi; ++i) orow[i] += wv * irow[i * s.sh + shift];
            }
          }
        }
      }
    }
  }
}

/// Accumulates gradients. Any of `din`, `dweight`, `dbias` may be null.
template <class T>
void conv_backward(const ConvShape& s, const T* in, const T* weight, const T* dout, T* din, T* dweight, T* dbias) {
  if (s.sh == 1 && s.sw == 1) return detail::conv_backward_s1(s, in, weight, dout, din, dweight, dbias);
  const int ho = s.ho(), wo = s.wo(), ph = s.ph(), pw = s.pw();
  for (int o = 0; o < s.cout; ++o) {
    const T* dout_o = dout + std::size_t(o) * wo * ho;
    if (dbias) {
      T acc = 0;
#pragma omp simd reduction(+ : acc)
      for (int i = 0; i < wo * ho; ++i) acc += dout_o[i];
      dbias[o] += acc;
    }
    for (int c = 0; c < s.cin; ++c) {
      const T* in_c = in + std::size_t(c) * s.w * s.h;
      T* din_c = din ? din + std::size_t(c) * s.w * s.h : nullptr;
      const T* w_oc = weight + (std::size_t(o) * s.cin + c) * s.kw * s.kh;
      T* dw_oc = dweight ? dweight + (std::size_t(o) * s.cin + c) * s.kw * s.kh : nullptr;
      for (int ot = 0; ot < wo; ++ot) {
        const T* grow = dout_o + std::size_t(ot) * ho;
        for (int jt = 0; jt < s.kw; ++jt) {
          const int it = ot * s.sw + jt - pw;
          if (it < 0 || it >= s.w) continue;
          const T* irow = in_c + std::size_t(it) * s.h;
          T* drow = din_c ? din_c + std::size_t(it) * s.h : nullptr;
          for (int jh = 0; jh < s.kh; ++jh) {
            const int shift = jh - ph;
            const int lo = shift >= 0 ? 0 : (-shift + s.sh - 1) / s.sh;
            const int hi = s.h - 1 - shift < 0 ? 0 : std::min(ho, (s.h - 1 - shift) / s.sh + 1);
            if (s.sh == 1) {
              const T* src = irow + shift;
              if (dw_oc) {
                T acc = 0;
#pragma omp simd reduction(+ : acc)
                for (int i = lo; i < hi; ++i) acc += grow[i] * src[i];
                dw_oc[jt * s.kh + jh] += acc;
              }
              if (drow) {
                const T wv = w_oc[jt * s.kh + jh];
                T* dst = drow + shift;
#pragma omp simd
                for (int i = lo; i < hi; ++i) dst[i] += wv * grow[i];
              }
            } else {
              if (dw_oc) {
                T acc = 0;
                for (int i = lo; i < hi; ++i) acc += grow[i] * irow[i * s.sh + shift];
                dw_oc[jt * s.kh + jh] += acc;
              }
              if (drow) {
                const T wv = w_oc[jt * s.kh + jh];
                for (int i = lo; i < hi; ++i) drow[i * s.sh + shift] += wv * grow[i];
              }
            }
          }
        }
      }
    }
  }
}

/// out[o] = bias[o] + sum_i weight[o][i] * in[i]
template <class T>
void dense_forward(int nin, int nout, const T* in, const T* weight, const T* bias, T* out) {
  for (int o = 0; o < nout; ++o) {
    const T* w = weight + std::size_t(o) * nin;
    T acc = 0;
#pragma omp simd reduction(+ : acc)
    for (int i = 0; i < nin; ++i) acc += w[i] * in[i];
    out[o] = acc + bias[o];
  }
}

template <class T>
void dense_backward(int nin, int nout, const T* in, const T* weight, const T* dout, T* din, T* dweight, T* dbias) {
  for (int o = 0; o < nout; ++o) {
    const T g = dout[o];
    if (dbias) dbias[o] += g;
    if (dweight) {
      T* dw = dweight + std::size_t(o) * nin;
#pragma omp simd
      for (int i = 0; i < nin; ++i) dw[i] += g * in[i];
    }
    if (din) {
      const T* w = weight + std::size_t(o) * nin;
#pragma omp simd
      for (int i = 0; i < nin; ++i) din[i] += g * w[i];
    }
  }
}

template <class T>
void relu_inplace(T* x, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > T(0) ? x[i] : T(0);
}

/// grad *= (activation > 0)
template <class T>
void relu_backward_inplace(const T* activation, T* grad, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) grad[i] = activation[i] > T(0) ? grad[i] : T(0);
}

}  // namespace needlebench::nn
