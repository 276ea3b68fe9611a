#pragma once

#include "ddl/tensor.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace ddl {

template <typename Scalar>
Tensor<Scalar> normal_parameter(const Shape& shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  typename Tensor<Scalar>::Array data(numel(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = static_cast<Scalar>(dist(rng));
  return Tensor<Scalar>::parameter(shape, std::move(data));
}

template <typename Scalar>
Tensor<Scalar> constant_parameter(const Shape& shape, double value) {
  return Tensor<Scalar>::parameter(shape, Tensor<Scalar>::Array::Constant(numel(shape), static_cast<Scalar>(value)));
}

/// Weight of a linear map stored (fan_in, fan_out), N(0, 1/fan_in).
template <typename Scalar>
Tensor<Scalar> linear_parameter(Index fan_in, Index fan_out, std::mt19937_64& rng) {
  return normal_parameter<Scalar>({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Tensor<Scalar> tensor;
  bool decay = true;
};

template <typename Scalar>
using ParameterList = std::vector<NamedParameter<Scalar>>;

}  // namespace ddl
