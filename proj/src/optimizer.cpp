#include "ddl/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ddl {

double LrSchedule::at(std::int64_t step) const {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<std::int64_t>(1, total - warmup));
  const double progress = std::clamp(static_cast<double>(step - warmup) / span, 0.0, 1.0);
  const double floor = min_ratio * peak;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename S>
double grad_norm(const ParameterList<S>& params) {
  double total = 0;
  for (const auto& p : params)
    if (p.tensor.has_grad()) total += p.tensor.node()->grad.template cast<double>().square().sum();
  return std::sqrt(total);
}

template <typename S>
double clip_grad_norm(const ParameterList<S>& params, double clip) {
  const double norm = grad_norm(params);
  if (norm > clip) {
    const double scale = clip / norm;
    for (const auto& p : params)
      if (p.tensor.has_grad()) {
        auto& g = p.tensor.node()->grad;
        g = (g.template cast<double>() * scale).template cast<S>();
      }
  }
  return norm;
}

template <typename S>
AdamW<S>::AdamW(ParameterList<S> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.push_back(Array::Zero(p.tensor.size()));
    v_.push_back(Array::Zero(p.tensor.size()));
  }
}

template <typename S>
void AdamW<S>::step(double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const Eigen::ArrayXd g = p.tensor.grad().template cast<double>();
    auto data = p.tensor.mutable_data().template cast<double>().eval();
    if (p.decay) data *= 1.0 - lr * config_.weight_decay;
    const auto m = (b1 * m_[i].template cast<double>() + (1.0 - b1) * g).eval();
    const auto v = (b2 * v_[i].template cast<double>() + (1.0 - b2) * g.square()).eval();
    data -= lr * (m / c1) / ((v / c2).sqrt() + config_.eps);
    m_[i] = m.template cast<S>();
    v_[i] = v.template cast<S>();
    p.tensor.mutable_data() = data.template cast<S>();
  }
}

template <typename S>
void AdamW<S>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template class AdamW<float>;
template class AdamW<double>;
template double grad_norm(const ParameterList<float>&);
template double grad_norm(const ParameterList<double>&);
template double clip_grad_norm(const ParameterList<float>&, double);
template double clip_grad_norm(const ParameterList<double>&, double);

}  // namespace ddl
