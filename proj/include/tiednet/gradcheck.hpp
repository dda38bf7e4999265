#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tiednet/autograd.hpp"

namespace tiednet {

struct GradCheckOptions {
  double eps = 1e-4;
  double tol = 1e-6;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor):
  // below it the comparison is absolute. Central differences with eps 1e-4
  // carry an O(eps^2) truncation error near 1e-9 for O(1) curvature, so a
  // floor of 1e-2 keeps that error well under tol.
  double floor = 1e-2;
  // Coordinates checked per parameter; 0 checks every coordinate.
  std::int64_t max_coords = 0;
  std::uint64_t seed = 0;  // coordinate sampling
  // Multiplies the analytic gradient before comparison (sensitivity tests).
  double analytic_scale = 1.0;
};

struct Coordinate {
  std::int64_t index = 0;  // flat row-major index
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct ParamCheck {
  std::string name;
  std::int64_t checked = 0;
  double max_rel_err = 0.0;
  std::vector<Coordinate> worst;  // up to 3, largest error first
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_err = 0.0;
  bool passed = true;
  std::string text() const;
};

double relative_error(double analytic, double numeric, double floor);

// `loss` must build its graph on whatever tape is active and return a scalar;
// it is called once under a tape for the analytic gradient and twice per
// checked coordinate without one. Parameters must be f64.
GradCheckReport grad_check(const std::function<Tensor()>& loss,
                           const std::vector<ParamPtr>& params,
                           const GradCheckOptions& opts = {});

}  // namespace tiednet
