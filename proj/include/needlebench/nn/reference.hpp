#pragma once

// Naive scalar-loop implementations of every forward kernel. Written
// independently of the optimized code (no fused weights, explicit bounds
// checks, double precision) and used as the oracle in tests and as the
// serial baseline in the benchmark.

#include <span>
#include <vector>

#include "needlebench/nn/cgru.hpp"
#include "needlebench/nn/params.hpp"
#include "needlebench/nn/resnet.hpp"

namespace needlebench::nn::reference {

using Vec = std::vector<double>;

/// in: [cin][length]; weight: [cout][cin][k]; same padding.
Vec conv1d(const Vec& in, int cin, int length, const Vec& weight, const Vec& bias, int cout, int k, int stride);

/// in: [cin][width][height]; weight: [cout][cin][kw][kh]; same padding.
Vec conv2d(const Vec& in, int cin, int height, int width, const Vec& weight, const Vec& bias, int cout, int kh, int kw,
           int sh, int sw);

/// Parameters looked up by slot name from a flat vector.
struct NamedParams {
  const ParamLayout* layout;
  std::span<const double> values;
  Vec get(const std::string& name) const;
};

/// One cGRU step exactly as the gate equations read; x: [cin][H], h: [C][H].
Vec cgru_cell(const NamedParams& p, const CgruConfig& cfg, const Vec& x, const Vec& h_prev);
/// Residual block of the regression head or the ResNet.
Vec res_block(const NamedParams& p, const std::string& prefix, const Vec& in, int cin, int cout, int height, int width,
              int k_h, int k_w, int stride_h, int stride_w, bool has_skip);
double cgru_head(const NamedParams& p, const CgruConfig& cfg, const Vec& h);
double cgru_forward(const NamedParams& p, const CgruConfig& cfg, const Vec& seq, int steps);
double resnet_forward(const NamedParams& p, const ResNetConfig& cfg, const Vec& buffer);

}  // namespace needlebench::nn::reference
