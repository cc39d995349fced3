// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cinr/autodiff.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cinr {

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

template <typename T>
Matrix<T> normal_matrix(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

// Binds parameter values into a graph, as variables when trainable.
template <typename T>
std::vector<ad::Tensor<T>> bind(ad::Graph<T>& graph, const ParamRefs<T>& params, bool trainable) {
  std::vector<ad::Tensor<T>> out;
  out.reserve(params.size());
  for (auto* p : params) out.push_back(trainable ? graph.variable(p->value) : graph.constant(p->value));
  return out;
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(AdamConfig cfg, ParamRefs<T> params) : cfg_(cfg), params_(std::move(params)) {
    for (auto* p : params_) {
      m_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(std::span<const Matrix<T>> grads) {
    if (grads.size() != params_.size()) throw std::invalid_argument("Adam::step: gradient count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T step = static_cast<T>(cfg_.lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& g = grads[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      params_[i]->value.array() -= step * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  ParamRefs<T> params_;
  std::vector<Matrix<T>> m_;
  std::vector<Matrix<T>> v_;
  std::int64_t t_ = 0;
};

template <typename T>
std::vector<Matrix<T>> values_of(std::span<const ad::Tensor<T>> tensors) {
  std::vector<Matrix<T>> out;
  out.reserve(tensors.size());
  for (const auto& t : tensors) out.push_back(t.value());
  return out;
}

template <typename T, typename U>
Matrix<U> cast_matrix(const Matrix<T>& m) {
  return m.template cast<U>();
}

}  // namespace cinr
