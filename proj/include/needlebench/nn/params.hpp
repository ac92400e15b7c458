#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "needlebench/common.hpp"

namespace needlebench::nn {

struct ParamSlot {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t count = 0;
  /// Fan-in used for initialization; 0 marks a bias.
  int fan_in = 0;
};

/// Named views into one flat parameter vector. The flat layout is what the
/// optimizer, the checkpoint payload and the finite-difference checks see.
class ParamLayout {
 public:
  std::size_t add(std::string name, std::vector<int> shape, int fan_in) {
    const std::size_t count =
        std::accumulate(shape.begin(), shape.end(), std::size_t{1}, [](std::size_t a, int b) { return a * b; });
    slots_.push_back({std::move(name), std::move(shape), total_, count, fan_in});
    total_ += count;
    return slots_.back().offset;
  }
  const std::vector<ParamSlot>& slots() const { return slots_; }
  std::size_t total() const { return total_; }
  const ParamSlot& slot(const std::string& name) const {
    for (const auto& s : slots_)
      if (s.name == name) return s;
    throw ShapeMismatch("no parameter named '" + name + "'");
  }

 private:
  std::vector<ParamSlot> slots_;
  std::size_t total_ = 0;
};

/// He-normal weights, zero biases.
template <class T>
void init_params(const ParamLayout& layout, std::span<T> values, Rng& rng) {
  for (const auto& s : layout.slots()) {
    if (s.fan_in == 0) {
      std::fill_n(values.begin() + s.offset, s.count, T(0));
      continue;
    }
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / s.fan_in));
    for (std::size_t i = 0; i < s.count; ++i) values[s.offset + i] = static_cast<T>(dist(rng));
  }
}

template <class T>
bool all_finite(std::span<const T> v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace needlebench::nn
