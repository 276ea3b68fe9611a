#pragma once

#include "ddl/init.hpp"
#include "ddl/tensor.hpp"

#include <cstdint>
#include <vector>

namespace ddl {

/// Linear warmup from 0, then cosine decay to min_ratio * peak at `total`.
struct LrSchedule {
  double peak = 1e-3;
  std::int64_t warmup = 100;
  std::int64_t total = 2000;
  double min_ratio = 0.1;

  double at(std::int64_t step) const;
};

/// Scales every gradient by clip / norm when the global L2 norm exceeds
/// `clip`. Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(const ParameterList<Scalar>& params, double clip);

template <typename Scalar>
double grad_norm(const ParameterList<Scalar>& params);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// Adam with decoupled weight decay: p <- p (1 - lr wd) for decayed tensors,
/// then p <- p - lr m_hat / (sqrt(v_hat) + eps).
template <typename Scalar>
class AdamW {
 public:
  using Array = typename Tensor<Scalar>::Array;

  AdamW(ParameterList<Scalar> params, AdamWConfig config);

  void step(double lr);
  void zero_grad();

  std::int64_t steps_taken() const { return t_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }
  const ParameterList<Scalar>& parameters() const { return params_; }
  std::vector<Array>& first_moments() { return m_; }
  std::vector<Array>& second_moments() { return v_; }
  const std::vector<Array>& first_moments() const { return m_; }
  const std::vector<Array>& second_moments() const { return v_; }
  const AdamWConfig& config() const { return config_; }

 private:
  ParameterList<Scalar> params_;
  AdamWConfig config_;
  std::vector<Array> m_, v_;
  std::int64_t t_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace ddl
