// Copyright 2026 The dualfed Authors
// SPDX-License-Identifier: Apache-2.0

// Straight-line reference implementations used to cross-check the library.
// Deliberately loop-based and free of Eigen expression templates.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dualfed/encoders.hpp"
#include "dualfed/numerics.hpp"
#include "dualfed/rng.hpp"

namespace oracle {

using dualfed::Matrix;
using dualfed::Vector;

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  }
  return out;
}

inline std::vector<double> matvec(const Matrix& w, const std::vector<double>& x) {
  std::vector<double> out(static_cast<std::size_t>(w.rows()), 0.0);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index k = 0; k < w.cols(); ++k) out[i] += w(i, k) * x[static_cast<std::size_t>(k)];
  }
  return out;
}

// W0 x + B (A x) per layer, tanh between layers.
inline std::vector<double> forward(const dualfed::EncoderStack& stack, std::vector<double> h) {
  const auto& layers = stack.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::vector<double> y = matvec(layers[l].w0, h);
    if (layers[l].rank() > 0) {
      const std::vector<double> ah = matvec(layers[l].a, h);
      const std::vector<double> bah = matvec(layers[l].b, ah);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += bah[i];
    }
    if (l + 1 < layers.size()) {
      for (double& v : y) v = std::tanh(v);
    }
    h = y;
  }
  return h;
}

inline std::vector<double> normalize(std::vector<double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double n = std::sqrt(ss);
  for (double& x : v) x /= n;
  return v;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// exp(s/tau) / sum exp(s/tau), no max subtraction; callers keep s/tau moderate.
inline std::vector<double> softmax(const std::vector<double>& s, double tau) {
  std::vector<double> p(s.size());
  double z = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    p[i] = std::exp(s[i] / tau);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

// Probability of every candidate column for one feature vector.
inline std::vector<double> class_probs(const dualfed::EncoderStack& stack, const std::vector<double>& x,
                                       const Matrix& text_embs, double tau) {
  const std::vector<double> z = normalize(forward(stack, x));
  std::vector<double> sims;
  for (Eigen::Index c = 0; c < text_embs.cols(); ++c) sims.push_back(dot(z, to_std(text_embs.col(c))));
  return softmax(sims, tau);
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace oracle

namespace testutil {

using dualfed::Matrix;

// Layers of shape d x d, LoRA of the given rank on every layer, random A and B.
inline dualfed::EncoderStack random_stack(dualfed::Rng& rng, Eigen::Index d, Eigen::Index rank, int layers = 2) {
  std::vector<dualfed::LoraLinear> out;
  for (int l = 0; l < layers; ++l) {
    dualfed::LoraLinear layer(Matrix::Identity(d, d) + dualfed::gaussian_matrix(rng, d, d, 0.3), rank);
    layer.a = dualfed::gaussian_matrix(rng, rank, d, 0.4);
    layer.b = dualfed::gaussian_matrix(rng, d, rank, 0.4);
    out.push_back(std::move(layer));
  }
  return dualfed::EncoderStack(std::move(out));
}

inline dualfed::EncoderStack identity_stack(Eigen::Index d, int layers = 1, Eigen::Index rank = 0) {
  std::vector<dualfed::LoraLinear> out;
  for (int l = 0; l < layers; ++l) out.emplace_back(Matrix::Identity(d, d), rank);
  return dualfed::EncoderStack(std::move(out));
}

}  // namespace testutil
