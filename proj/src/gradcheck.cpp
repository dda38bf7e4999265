#include "tiednet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "tiednet/error.hpp"

namespace tiednet {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Tensor()>& loss,
                           const std::vector<ParamPtr>& params,
                           const GradCheckOptions& opts) {
  for (const auto& p : params) {
    if (p->value.dtype() != DType::f64) {
      throw ContractError("grad_check: parameter '" + p->name + "' is " +
                          dtype_name(p->value.dtype()) + ", need f64");
    }
  }
  std::vector<std::vector<double>> analytic;
  {
    for (const auto& p : params) p->zero_grad();
    Tape tape;
    tape.backward(loss());
    for (const auto& p : params) {
      analytic.push_back(p->grad.values());
      p->zero_grad();
    }
  }

  auto eval = [&] {
    NoGradGuard guard;
    return loss().item();
  };

  GradCheckReport report;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    const auto n = p.value.numel();
    std::vector<std::int64_t> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords > 0 && opts.max_coords < n) {
      for (std::int64_t i = 0; i < opts.max_coords; ++i) {
        const auto j = i + static_cast<std::int64_t>(
                               rng() % static_cast<std::uint64_t>(n - i));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(static_cast<std::size_t>(opts.max_coords));
      std::sort(coords.begin(), coords.end());
    }

    ParamCheck check;
    check.name = p.name;
    std::vector<Coordinate> all;
    double* data = p.value.data<double>();
    const auto& strides = p.value.strides();
    const auto& dims = p.value.dims();
    for (auto flat : coords) {
      // Flat logical index -> storage offset (the value may be a view).
      std::int64_t offset = 0, rem = flat;
      for (int a = p.value.rank() - 1; a >= 0; --a) {
        offset += (rem % dims[a]) * strides[a];
        rem /= dims[a];
      }
      const double saved = data[offset];
      data[offset] = saved + opts.eps;
      const double up = eval();
      data[offset] = saved - opts.eps;
      const double down = eval();
      data[offset] = saved;

      Coordinate c;
      c.index = flat;
      c.numeric = (up - down) / (2.0 * opts.eps);
      c.analytic = analytic[k][static_cast<std::size_t>(flat)] * opts.analytic_scale;
      c.rel_err = relative_error(c.analytic, c.numeric, opts.floor);
      check.max_rel_err = std::max(check.max_rel_err, c.rel_err);
      all.push_back(c);
    }
    check.checked = static_cast<std::int64_t>(all.size());
    std::stable_sort(all.begin(), all.end(), [](const Coordinate& a, const Coordinate& b) {
      return a.rel_err > b.rel_err;
    });
    all.resize(std::min<std::size_t>(all.size(), 3));
    check.worst = std::move(all);
    report.max_rel_err = std::max(report.max_rel_err, check.max_rel_err);
    report.params.push_back(std::move(check));
  }
  report.passed = report.max_rel_err < opts.tol;
  return report;
}

std::string GradCheckReport::text() const {
  std::ostringstream os;
  char buf[256];
  for (const auto& p : params) {
    std::snprintf(buf, sizeof buf, "%-40s coords %6lld  max rel err %.3e\n",
                  p.name.c_str(), static_cast<long long>(p.checked), p.max_rel_err);
    os << buf;
    if (!passed) {
      for (const auto& c : p.worst) {
        std::snprintf(buf, sizeof buf,
                      "    [%lld] analytic %.12e numeric %.12e rel err %.3e\n",
                      static_cast<long long>(c.index), c.analytic, c.numeric,
                      c.rel_err);
        os << buf;
      }
    }
  }
  std::snprintf(buf, sizeof buf, "max rel err %.3e (%s)\n", max_rel_err,
                passed ? "pass" : "FAIL");
  os << buf;
  return os.str();
}

}  // namespace tiednet
