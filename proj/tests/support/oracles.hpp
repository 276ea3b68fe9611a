#pragma once

// Reference evaluations written independently of the library code paths:
// plain loops over raw arrays, dense Eigen algebra and finite differences.

#include "ddl/backbone.hpp"
#include "ddl/ops.hpp"
#include "ddl/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using ddl::Index;
using ddl::Shape;
using Tensor = ddl::Tensor<double>;
using Array = Tensor::Array;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline Array gaussian_array(Index n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Array a(n);
  for (Index i = 0; i < n; ++i) a[i] = dist(rng);
  return a;
}

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  return Tensor(shape, gaussian_array(ddl::numel(shape), rng, scale));
}

inline Tensor random_parameter(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  return Tensor::parameter(shape, gaussian_array(ddl::numel(shape), rng, scale));
}

inline Vec random_vector(Index n, std::mt19937_64& rng) { return gaussian_array(n, rng).matrix(); }

inline Mat random_matrix(Index r, Index c, std::mt19937_64& rng) {
  return Eigen::Map<const Mat>(gaussian_array(r * c, rng).data(), r, c);
}

/// Row-major (r, c) tensor view as an Eigen matrix.
inline Mat as_matrix(const Tensor& t, Index rows, Index cols) {
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = t.data()[i * cols + j];
  return m;
}

/// Central difference (f(x + h) - f(x - h)) / 2h for every entry of `param`.
inline Array central_difference(Tensor& param, const std::function<double()>& f, double h) {
  Array g(param.size());
  for (Index i = 0; i < param.size(); ++i) {
    double& x = param.mutable_data()[i];
    const double saved = x;
    x = saved + h;
    const double up = f();
    x = saved - h;
    const double down = f();
    x = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double relative_error(const Array& a, const Array& b, double floor = 1e-8) {
  return (a - b).matrix().norm() / std::max(a.matrix().norm() + b.matrix().norm(), floor);
}

/// out[b, t, c] = sum_s kernel[s, c] x[b, t - s, c], zero before t = 0.
inline std::vector<double> causal_conv(const std::vector<double>& x, const std::vector<double>& kernel, Index batch,
                                       Index steps, Index channels, Index taps) {
  std::vector<double> out(x.size(), 0.0);
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < steps; ++t)
      for (Index c = 0; c < channels; ++c) {
        double acc = 0;
        for (Index s = 0; s < taps; ++s) {
          if (t - s < 0) continue;
          acc += kernel[s * channels + c] * x[(b * steps + t - s) * channels + c];
        }
        out[(b * steps + t) * channels + c] = acc;
      }
  return out;
}

/// Causal multi-head attention by explicit loops over (head, query, key).
inline Mat naive_attention(const ddl::AttentionLayer<double>& layer, const Mat& x) {
  const Index steps = x.rows(), d = layer.d, heads = layer.n_heads, hd = layer.head_dim, half = hd / 2;
  const Mat wq = as_matrix(layer.wq, d, heads * hd), wk = as_matrix(layer.wk, d, heads * hd),
            wv = as_matrix(layer.wv, d, heads * hd), wo = as_matrix(layer.wo, heads * hd, d);
  const Mat q = x * wq, k = x * wk, v = x * wv;
  Mat concat = Mat::Zero(steps, heads * hd);
  auto prepare = [&](const Mat& m, Index t, Index h, const Tensor& scale) {
    Vec u = m.row(t).segment(h * hd, hd).transpose();
    const double inv = 1.0 / std::sqrt(u.squaredNorm() / static_cast<double>(hd) + layer.norm_eps);
    for (Index i = 0; i < hd; ++i) u[i] *= inv * scale.data()[i];
    Vec r = u;
    for (Index i = 0; i < half; ++i) {
      const double theta = static_cast<double>(t) * std::pow(layer.rope_base, -2.0 * i / static_cast<double>(hd));
      r[i] = u[i] * std::cos(theta) - u[i + half] * std::sin(theta);
      r[i + half] = u[i] * std::sin(theta) + u[i + half] * std::cos(theta);
    }
    return r;
  };
  for (Index h = 0; h < heads; ++h)
    for (Index t = 0; t < steps; ++t) {
      const Vec qt = prepare(q, t, h, layer.q_norm);
      std::vector<double> w(static_cast<std::size_t>(t + 1));
      double mx = -1e300;
      for (Index s = 0; s <= t; ++s) {
        w[s] = qt.dot(prepare(k, s, h, layer.k_norm)) / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, w[s]);
      }
      double z = 0;
      for (auto& e : w) z += (e = std::exp(e - mx));
      for (Index s = 0; s <= t; ++s)
        concat.row(t).segment(h * hd, hd) += (w[s] / z) * v.row(s).segment(h * hd, hd);
    }
  return concat * wo;
}

/// One AdamW update of a scalar parameter, decay applied before the moment step.
struct ScalarAdamW {
  double m = 0, v = 0;
  int t = 0;

  double step(double p, double g, double lr, double b1, double b2, double eps, double wd) {
    ++t;
    p -= lr * wd * p;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return p - lr * mh / (std::sqrt(vh) + eps);
  }
};

/// I_{d_v} (x) A as a dense (d d_v) x (d d_v) matrix.
inline Mat kron_lift(const Mat& a, Index d_v) {
  const Index d = a.rows();
  Mat out = Mat::Zero(d * d_v, d * d_v);
  for (Index j = 0; j < d_v; ++j) out.block(j * d, j * d, d, d) = a;
  return out;
}

}  // namespace oracle
