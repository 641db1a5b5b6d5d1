#pragma once

#include <cmath>
#include <vector>

#include "semiseg/rng.hpp"
#include "semiseg/tensor.hpp"

namespace testutil {

inline semiseg::ImageTensor random_image(int c, int h, int w, semiseg::Rng& rng) {
  semiseg::ImageTensor im({c, h, w});
  for (auto& v : im.values()) v = static_cast<float>(rng.uniform());
  return im;
}

inline semiseg::LabelMask random_mask(int h, int w, int k, semiseg::Rng& rng) {
  semiseg::LabelMask m(h, w);
  for (auto& v : m.data) v = rng.uniform_int(0, k - 1);
  return m;
}

template <typename T>
semiseg::Tensor<T> random_tensor(std::vector<int> shape, semiseg::Rng& rng, double lo = -1.0, double hi = 1.0) {
  semiseg::Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Scalar softmax cross-entropy of one pixel.
inline double scalar_ce(const std::vector<double>& z, int target) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return std::log(s) + mx - z[static_cast<std::size_t>(target)];
}

}  // namespace testutil
