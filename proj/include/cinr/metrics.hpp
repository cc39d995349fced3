// SPDX-License-Identifier: Apache-2.0

// Reconstruction metric. The metric MSE averages over coordinates and
// channels; PSNR uses peak 1 and is capped at kPsnrCap dB.

#pragma once

#include "cinr/autodiff.hpp"
#include "cinr/errors.hpp"

#include <algorithm>
#include <cmath>

namespace cinr {

constexpr double kPsnrCap = 99.0;
constexpr double kPsnrPeak = 1.0;

inline double psnr_from_mse(double mse) {
  if (!(mse >= 0.0)) throw NumericalError("PSNR of a non-finite or negative MSE");
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(kPsnrPeak * kPsnrPeak / mse));
}

template <typename A, typename B>
double metric_mse(const A& pred, const B& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw DimensionError("metric_mse: " + shape_string(pred.rows(), pred.cols()) + " vs " +
                         shape_string(target.rows(), target.cols()));
  if (target.size() == 0) throw DimensionError("metric_mse: empty input");
  return (pred.template cast<double>() - target.template cast<double>()).squaredNorm() /
         static_cast<double>(target.size());
}

template <typename A, typename B>
double psnr(const A& pred, const B& target) {
  return psnr_from_mse(metric_mse(pred, target));
}

}  // namespace cinr
