#include "tiednet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "tiednet/kernels.hpp"

namespace tiednet {

namespace {

thread_local MacCounter* t_counter = nullptr;

Tensor tracked(Tensor out, std::initializer_list<const Tensor*> inputs,
               Tape::BackwardFn fn) {
  Tape* tape = Tape::active();
  if (tape == nullptr || !Tape::recording()) return out;
  return tape->record(std::move(out), inputs, std::move(fn));
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": dtype mismatch (" +
                        dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()) +
                        ")");
  }
}

void require_rank(const Tensor& a, int rank, const char* op) {
  if (a.rank() != rank) {
    throw RankError(std::string(op) + ": expected rank " +
                    std::to_string(rank) + ", got " + shape_str(a.dims()));
  }
}

// Copy of a [g x r x c] tensor with its last two axes swapped.
Tensor swap_last2(const Tensor& a) {
  const Tensor src = a.contiguous();
  const auto g = src.dim(0), r = src.dim(1), c = src.dim(2);
  Tensor out({g, c, r}, src.dtype());
  dispatch(src.dtype(), [&]<typename T>() {
    const T* s = src.data<T>();
    T* d = out.data<T>();
    for (std::int64_t b = 0; b < g; ++b) {
      for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
          d[(b * c + j) * r + i] = s[(b * r + i) * c + j];
        }
      }
    }
  });
  return out;
}

template <class F>
Tensor map_unary(const Tensor& x, F&& f) {
  const Tensor src = x.contiguous();
  Tensor out(src.dims(), src.dtype());
  dispatch(src.dtype(), [&]<typename T>() {
    const T* s = src.data<T>();
    T* d = out.data<T>();
    const auto n = src.numel();
    for (std::int64_t i = 0; i < n; ++i) d[i] = static_cast<T>(f(s[i]));
  });
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F&& f) {
  const Tensor sa = a.contiguous();
  const Tensor sb = b.contiguous();
  Tensor out(sa.dims(), sa.dtype());
  dispatch(sa.dtype(), [&]<typename T>() {
    const T* pa = sa.data<T>();
    const T* pb = sb.data<T>();
    T* d = out.data<T>();
    const auto n = sa.numel();
    for (std::int64_t i = 0; i < n; ++i) d[i] = static_cast<T>(f(pa[i], pb[i]));
  });
  return out;
}

void require_same_dims(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  }
  require_same_dtype(a, b, op);
}

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf =
      std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// Sums a tensor over all axes except the trailing `suffix` dims.
Tensor reduce_to_suffix(const Tensor& g, const Shape& suffix) {
  const Tensor src = g.contiguous();
  Tensor out(suffix, src.dtype());
  const auto inner = shape_numel(suffix);
  const auto outer = src.numel() / inner;
  dispatch(src.dtype(), [&]<typename T>() {
    const T* s = src.data<T>();
    T* d = out.data<T>();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) d[i] += s[o * inner + i];
    }
  });
  return out;
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw ValidationError("activation", "unknown activation '" + std::string(name) + "'");
}

const char* activation_name(Activation kind) {
  return kind == Activation::relu ? "relu" : "gelu";
}

MacCounter::MacCounter() : previous_(t_counter) { t_counter = this; }

MacCounter::~MacCounter() { t_counter = previous_; }

void count_macs(std::int64_t macs) {
  if (Tape::in_backward()) return;
  for (MacCounter* c = t_counter; c != nullptr; c = c->previous_) {
    c->total_ += macs;
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.dims()) +
                     " x " + shape_str(b.dims()));
  }
  require_same_dtype(a, b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const Tensor ac = a.contiguous();
  const Tensor bc = b.contiguous();
  Tensor out({m, n}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    kernels::gemm<T>(m, k, n, ac.data<T>(), bc.data<T>(), out.data<T>());
  });
  count_macs(m * k * n);
  return tracked(std::move(out), {&a, &b},
                 [ac, bc](const Tensor& g, GradSink& sink) {
                   if (sink.needs(0)) sink.add(0, matmul(g, transpose(bc)));
                   if (sink.needs(1)) sink.add(1, matmul(transpose(ac), g));
                 });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  require_same_dtype(a, b, "bmm");
  const Tensor lhs = trans_a ? swap_last2(a) : a.contiguous();
  const Tensor rhs = trans_b ? swap_last2(b) : b.contiguous();
  if (lhs.dim(0) != rhs.dim(0) || lhs.dim(2) != rhs.dim(1)) {
    throw ShapeError("bmm: incompatible operands " + shape_str(lhs.dims()) +
                     " x " + shape_str(rhs.dims()));
  }
  const auto g = lhs.dim(0), m = lhs.dim(1), k = lhs.dim(2), n = rhs.dim(2);
  Tensor out({g, m, n}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    kernels::gemm_batched<T>(g, m, k, n, lhs.data<T>(), rhs.data<T>(),
                             out.data<T>());
  });
  count_macs(g * m * k * n);
  return tracked(std::move(out), {&a, &b},
                 [lhs, rhs, trans_a, trans_b](const Tensor& grad,
                                              GradSink& sink) {
                   if (sink.needs(0)) {
                     // d(lhs) = grad * rhs^T
                     Tensor d = bmm(grad, rhs, false, true);
                     sink.add(0, trans_a ? swap_last2(d) : d);
                   }
                   if (sink.needs(1)) {
                     // d(rhs) = lhs^T * grad
                     Tensor d = bmm(lhs, grad, true, false);
                     sink.add(1, trans_b ? swap_last2(d) : d);
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  Tensor out = a.view_transposed();
  return tracked(std::move(out), {&a}, [](const Tensor& g, GradSink& sink) {
    sink.add(0, g.view_transposed().contiguous());
  });
}

Tensor reshape(const Tensor& a, Shape dims) {
  if (shape_numel(dims) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.dims()) + " as " +
                     shape_str(dims));
  }
  Tensor out = a.contiguous().view_reshaped(std::move(dims));
  Shape src_dims = a.dims();
  return tracked(std::move(out), {&a},
                 [src_dims](const Tensor& g, GradSink& sink) {
                   sink.add(0, g.contiguous().view_reshaped(src_dims));
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dims(a, b, "add");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x + y; });
  return tracked(std::move(out), {&a, &b}, [](const Tensor& g, GradSink& sink) {
    sink.add(0, g);
    sink.add(1, g);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dims(a, b, "mul");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x * y; });
  return tracked(std::move(out), {&a, &b},
                 [a = a.detach(), b = b.detach()](const Tensor& g,
                                                  GradSink& sink) {
                   if (sink.needs(0)) sink.add(0, mul(g, b));
                   if (sink.needs(1)) sink.add(1, mul(g, a));
                 });
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = map_unary(a, [factor](auto x) { return x * factor; });
  return tracked(std::move(out), {&a},
                 [factor](const Tensor& g, GradSink& sink) {
                   sink.add(0, scale(g, factor));
                 });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  require_same_dtype(x, b, "add_bias");
  const Shape& xd = x.dims();
  const Shape& bd = b.dims();
  if (bd.size() > xd.size() ||
      !std::equal(bd.begin(), bd.end(), xd.end() - bd.size())) {
    throw ShapeError("add_bias: bias " + shape_str(bd) +
                     " is not a suffix of " + shape_str(xd));
  }
  const Tensor xs = x.contiguous();
  const Tensor bs = b.contiguous();
  Tensor out(xd, x.dtype());
  const auto inner = b.numel();
  const auto outer = x.numel() / inner;
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = xs.data<T>();
    const T* pb = bs.data<T>();
    T* d = out.data<T>();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        d[o * inner + i] = px[o * inner + i] + pb[i];
      }
    }
  });
  return tracked(std::move(out), {&x, &b},
                 [bd](const Tensor& g, GradSink& sink) {
                   sink.add(0, g);
                   if (sink.needs(1)) sink.add(1, reduce_to_suffix(g, bd));
                 });
}

Tensor sum(const Tensor& x) {
  const auto v = x.contiguous();
  double total = 0.0;
  dispatch(x.dtype(), [&]<typename T>() {
    const T* p = v.data<T>();
    T acc = 0;
    for (std::int64_t i = 0; i < v.numel(); ++i) acc += p[i];
    total = acc;
  });
  Tensor out = Tensor::scalar(total, x.dtype());
  Shape dims = x.dims();
  return tracked(std::move(out), {&x},
                 [dims](const Tensor& g, GradSink& sink) {
                   sink.add(0, Tensor::full(dims, g.item(), g.dtype()));
                 });
}

Tensor activation(const Tensor& x, Activation kind) {
  Tensor out = kind == Activation::relu
                   ? map_unary(x, [](auto v) { return v > 0 ? v : decltype(v)(0); })
                   : map_unary(x, [](auto v) { return gelu_value(v); });
  return tracked(std::move(out), {&x},
                 [xs = x.detach(), kind](const Tensor& g, GradSink& sink) {
                   if (kind == Activation::relu) {
                     sink.add(0, map_binary(g, xs, [](auto gv, auto v) {
                                return v > 0 ? gv : decltype(gv)(0);
                              }));
                   } else {
                     sink.add(0, map_binary(g, xs, [](auto gv, auto v) {
                                return gv * gelu_derivative(v);
                              }));
                   }
                 });
}

Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
Tensor gelu(const Tensor& x) { return activation(x, Activation::gelu); }

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1) throw RankError("softmax_lastdim on a rank-0 tensor");
  const Tensor xs = x.contiguous();
  Tensor out(x.dims(), x.dtype());
  const auto cols = x.dims().back();
  const auto rows = x.numel() / cols;
  bool finite = true;
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = xs.data<T>();
    T* py = out.data<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* row = px + r * cols;
      T* dst = py + r * cols;
      const T mx = *std::max_element(row, row + cols);
      T total = 0;
      for (std::int64_t c = 0; c < cols; ++c) {
        dst[c] = std::exp(row[c] - mx);
        total += dst[c];
      }
      for (std::int64_t c = 0; c < cols; ++c) {
        dst[c] /= total;
        finite = finite && std::isfinite(dst[c]);
      }
    }
  });
  if (!finite) throw NumericError("softmax_lastdim produced non-finite output");
  return tracked(std::move(out), {&x},
                 [y = out.detach(), rows, cols](const Tensor& g,
                                                GradSink& sink) {
                   const Tensor gs = g.contiguous();
                   Tensor dx(y.dims(), y.dtype());
                   dispatch(y.dtype(), [&]<typename T>() {
                     const T* py = y.data<T>();
                     const T* pg = gs.data<T>();
                     T* pd = dx.data<T>();
                     for (std::int64_t r = 0; r < rows; ++r) {
                       T dot = 0;
                       for (std::int64_t c = 0; c < cols; ++c) {
                         dot += pg[r * cols + c] * py[r * cols + c];
                       }
                       for (std::int64_t c = 0; c < cols; ++c) {
                         pd[r * cols + c] =
                             py[r * cols + c] * (pg[r * cols + c] - dot);
                       }
                     }
                   });
                   sink.add(0, dx);
                 });
}

namespace {

// Shared backward for normalizations: given xhat and 1/sigma per group,
// dx = inv_std * (g' - mean(g') - xhat * mean(g' * xhat)) with g' = g*gamma.
// `group_of(i)` / `channel_of(i)` map element i to its statistics group and
// affine channel.
template <class T, class GroupOf, class ChannelOf>
void normalize_backward(std::int64_t n, std::int64_t groups,
                        std::int64_t group_size, const T* g, const T* xhat,
                        const std::vector<double>& inv_std, const T* gamma,
                        GroupOf group_of, ChannelOf channel_of, T* dx) {
  std::vector<double> mean_g(groups, 0.0), mean_gx(groups, 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto grp = group_of(i);
    const double gp = static_cast<double>(g[i]) * gamma[channel_of(i)];
    mean_g[grp] += gp;
    mean_gx[grp] += gp * xhat[i];
  }
  for (std::int64_t k = 0; k < groups; ++k) {
    mean_g[k] /= static_cast<double>(group_size);
    mean_gx[k] /= static_cast<double>(group_size);
  }
  for (std::int64_t i = 0; i < n; ++i) {
    const auto grp = group_of(i);
    const double gp = static_cast<double>(g[i]) * gamma[channel_of(i)];
    dx[i] = static_cast<T>(inv_std[grp] *
                           (gp - mean_g[grp] - xhat[i] * mean_gx[grp]));
  }
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() < 1) throw RankError("layer_norm on a rank-0 tensor");
  const auto cols = x.dims().back();
  if (gamma.dims() != Shape{cols} || beta.dims() != Shape{cols}) {
    throw ShapeError("layer_norm: gamma/beta must be [" +
                     std::to_string(cols) + "], got " +
                     shape_str(gamma.dims()) + " / " + shape_str(beta.dims()));
  }
  require_same_dtype(x, gamma, "layer_norm");
  require_same_dtype(x, beta, "layer_norm");
  const auto rows = x.numel() / cols;
  const Tensor xs = x.contiguous();
  const Tensor gs = gamma.contiguous();
  const Tensor bs = beta.contiguous();
  Tensor out(x.dims(), x.dtype());
  Tensor xhat(x.dims(), x.dtype());
  std::vector<double> inv_std(rows);
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = xs.data<T>();
    const T* pgam = gs.data<T>();
    const T* pbet = bs.data<T>();
    T* py = out.data<T>();
    T* ph = xhat.data<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* row = px + r * cols;
      double mean = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) mean += row[c];
      mean /= static_cast<double>(cols);
      double var = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) {
        const double d = row[c] - mean;
        var += d * d;
      }
      var /= static_cast<double>(cols);
      inv_std[r] = 1.0 / std::sqrt(var + eps);
      for (std::int64_t c = 0; c < cols; ++c) {
        const T h = static_cast<T>((row[c] - mean) * inv_std[r]);
        ph[r * cols + c] = h;
        py[r * cols + c] = pgam[c] * h + pbet[c];
      }
    }
  });
  return tracked(
      std::move(out), {&x, &gamma, &beta},
      [xhat, gs, inv_std, rows, cols](const Tensor& g, GradSink& sink) {
        const Tensor gc = g.contiguous();
        const auto n = rows * cols;
        if (sink.needs(0)) {
          Tensor dx(xhat.dims(), xhat.dtype());
          dispatch(xhat.dtype(), [&]<typename T>() {
            normalize_backward<T>(
                n, rows, cols, gc.data<T>(), xhat.data<T>(), inv_std,
                gs.data<T>(), [cols](std::int64_t i) { return i / cols; },
                [cols](std::int64_t i) { return i % cols; }, dx.data<T>());
          });
          sink.add(0, dx);
        }
        if (sink.needs(1)) {
          sink.add(1, reduce_to_suffix(mul(gc, xhat), {cols}));
        }
        if (sink.needs(2)) sink.add(2, reduce_to_suffix(gc, {cols}));
      });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, NormMode mode,
                    double eps, double momentum) {
  require_rank(x, 4, "batch_norm2d");
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const Shape per_channel{C};
  if (gamma.dims() != per_channel || beta.dims() != per_channel ||
      running_mean.dims() != per_channel || running_var.dims() != per_channel) {
    throw ShapeError("batch_norm2d: per-channel tensors must be [" +
                     std::to_string(C) + "]");
  }
  require_same_dtype(x, gamma, "batch_norm2d");
  require_same_dtype(x, beta, "batch_norm2d");
  const Tensor xs = x.contiguous();
  const Tensor gs = gamma.contiguous();
  const Tensor bs = beta.contiguous();
  Tensor out(x.dims(), x.dtype());
  Tensor xhat(x.dims(), x.dtype());
  std::vector<double> inv_std(C);
  const std::int64_t count = N * HW;
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = xs.data<T>();
    const T* pgam = gs.data<T>();
    const T* pbet = bs.data<T>();
    T* py = out.data<T>();
    T* ph = xhat.data<T>();
    T* rm = running_mean.data<T>();
    T* rv = running_var.data<T>();
    for (std::int64_t c = 0; c < C; ++c) {
      double mean, var;
      if (mode == NormMode::train) {
        mean = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* plane = px + (n * C + c) * HW;
          for (std::int64_t i = 0; i < HW; ++i) mean += plane[i];
        }
        mean /= static_cast<double>(count);
        var = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* plane = px + (n * C + c) * HW;
          for (std::int64_t i = 0; i < HW; ++i) {
            const double d = plane[i] - mean;
            var += d * d;
          }
        }
        const double unbiased =
            count > 1 ? var / static_cast<double>(count - 1) : 0.0;
        var /= static_cast<double>(count);
        rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * mean);
        rv[c] = static_cast<T>((1.0 - momentum) * rv[c] +
                               momentum * (count > 1 ? unbiased : var));
      } else {
        mean = rm[c];
        var = rv[c];
      }
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      for (std::int64_t n = 0; n < N; ++n) {
        const auto base = (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
          const T h = static_cast<T>((px[base + i] - mean) * inv_std[c]);
          ph[base + i] = h;
          py[base + i] = pgam[c] * h + pbet[c];
        }
      }
    }
  });
  return tracked(
      std::move(out), {&x, &gamma, &beta},
      [xhat, gs, inv_std, mode, N, C, HW, count](const Tensor& g,
                                                 GradSink& sink) {
        const Tensor gc = g.contiguous();
        const auto n = N * C * HW;
        auto channel_of = [C, HW](std::int64_t i) { return (i / HW) % C; };
        if (sink.needs(0)) {
          Tensor dx(xhat.dims(), xhat.dtype());
          dispatch(xhat.dtype(), [&]<typename T>() {
            const T* pg = gc.data<T>();
            const T* pgam = gs.data<T>();
            T* pd = dx.data<T>();
            if (mode == NormMode::train) {
              normalize_backward<T>(n, C, count, pg, xhat.data<T>(), inv_std,
                                    pgam, channel_of, channel_of, pd);
            } else {
              for (std::int64_t i = 0; i < n; ++i) {
                const auto c = channel_of(i);
                pd[i] = static_cast<T>(pg[i] * pgam[c] * inv_std[c]);
              }
            }
          });
          sink.add(0, dx);
        }
        if (sink.needs(1) || sink.needs(2)) {
          Tensor dgamma({C}, xhat.dtype());
          Tensor dbeta({C}, xhat.dtype());
          dispatch(xhat.dtype(), [&]<typename T>() {
            const T* pg = gc.data<T>();
            const T* ph = xhat.data<T>();
            T* dg = dgamma.data<T>();
            T* db = dbeta.data<T>();
            for (std::int64_t i = 0; i < n; ++i) {
              const auto c = channel_of(i);
              dg[c] += pg[i] * ph[i];
              db[c] += pg[i];
            }
          });
          sink.add(1, dgamma);
          sink.add(2, dbeta);
        }
      });
}

Tensor cross_entropy(const Tensor& logits,
                     std::span<const std::int64_t> labels) {
  require_rank(logits, 2, "cross_entropy");
  const auto B = logits.dim(0), C = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(B));
  }
  for (auto l : labels) {
    if (l < 0 || l >= C) {
      throw IndexError("cross_entropy: label " + std::to_string(l) +
                       " outside [0, " + std::to_string(C) + ")");
    }
  }
  const Tensor xs = logits.contiguous();
  Tensor probs(logits.dims(), logits.dtype());
  double loss = 0.0;
  dispatch(logits.dtype(), [&]<typename T>() {
    const T* px = xs.data<T>();
    T* pp = probs.data<T>();
    for (std::int64_t b = 0; b < B; ++b) {
      const T* row = px + b * C;
      const double mx = *std::max_element(row, row + C);
      double total = 0.0;
      for (std::int64_t c = 0; c < C; ++c) total += std::exp(row[c] - mx);
      const double lse = mx + std::log(total);
      for (std::int64_t c = 0; c < C; ++c) {
        pp[b * C + c] = static_cast<T>(std::exp(row[c] - lse));
      }
      loss += lse - row[labels[b]];
    }
  });
  loss /= static_cast<double>(B);
  Tensor out = Tensor::scalar(loss, logits.dtype());
  std::vector<std::int64_t> labs(labels.begin(), labels.end());
  return tracked(std::move(out), {&logits},
                 [probs, labs, B, C](const Tensor& g, GradSink& sink) {
                   Tensor d = probs.clone();
                   const double scale_by = g.item() / static_cast<double>(B);
                   dispatch(d.dtype(), [&]<typename T>() {
                     T* pd = d.data<T>();
                     for (std::int64_t b = 0; b < B; ++b) {
                       pd[b * C + labs[b]] -= T(1);
                       for (std::int64_t c = 0; c < C; ++c) {
                         pd[b * C + c] = static_cast<T>(pd[b * C + c] * scale_by);
                       }
                     }
                   });
                   sink.add(0, d);
                 });
}

std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel,
                             const Conv2dOptions& opts) {
  if (opts.stride < 1 || opts.padding < 0) {
    throw ShapeError("conv: stride must be >= 1 and padding >= 0");
  }
  const auto span = in + 2 * opts.padding - kernel;
  if (span < 0) {
    throw ShapeError("conv: kernel " + std::to_string(kernel) +
                     " larger than padded input " +
                     std::to_string(in + 2 * opts.padding));
  }
  if (!opts.floor_mode && span % opts.stride != 0) {
    throw ShapeError("conv: output extent (" + std::to_string(in) + " + 2*" +
                     std::to_string(opts.padding) + " - " +
                     std::to_string(kernel) + ")/" +
                     std::to_string(opts.stride) + " + 1 is not integral");
  }
  return span / opts.stride + 1;
}

namespace {

kernels::ConvGeometry conv_geometry(const Tensor& x, const Tensor& w,
                                    const Conv2dOptions& opts) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  require_same_dtype(x, w, "conv2d");
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) +
                     " channels, kernel " + shape_str(w.dims()) + " expects " +
                     std::to_string(w.dim(1)));
  }
  kernels::ConvGeometry g{};
  g.batch = x.dim(0);
  g.c_in = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.c_out = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = opts.stride;
  g.pad = opts.padding;
  g.out_h = conv_out_extent(g.height, g.kh, opts);
  g.out_w = conv_out_extent(g.width, g.kw, opts);
  return g;
}

Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor* bias,
                   const Conv2dOptions& opts) {
  const auto geo = conv_geometry(x, w, opts);
  if (bias != nullptr && bias->dims() != Shape{geo.c_out}) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(geo.c_out) +
                     "], got " + shape_str(bias->dims()));
  }
  const Tensor xs = x.contiguous();
  const Tensor ws = w.contiguous();
  Tensor out({geo.batch, geo.c_out, geo.out_h, geo.out_w}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    kernels::conv2d_forward<T>(geo, xs.data<T>(), ws.data<T>(), out.data<T>());
    if (bias != nullptr) {
      const Tensor bs = bias->contiguous();
      const T* pb = bs.data<T>();
      T* py = out.data<T>();
      const auto plane = geo.out_pixels();
      for (std::int64_t n = 0; n < geo.batch; ++n) {
        for (std::int64_t c = 0; c < geo.c_out; ++c) {
          T* p = py + (n * geo.c_out + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) p[i] += pb[c];
        }
      }
    }
  });
  count_macs(geo.batch * geo.c_out * geo.out_pixels() * geo.patch_size());
  static const Tensor kNoBias;
  const Tensor& b = bias != nullptr ? *bias : kNoBias;
  return tracked(
      std::move(out), {&x, &w, &b},
      [xs, ws, geo](const Tensor& g, GradSink& sink) {
        const Tensor gc = g.contiguous();
        if (sink.needs(0)) {
          Tensor dx(xs.dims(), xs.dtype());
          dispatch(xs.dtype(), [&]<typename T>() {
            kernels::conv2d_backward_input<T>(geo, gc.data<T>(), ws.data<T>(),
                                              dx.data<T>());
          });
          sink.add(0, dx);
        }
        if (sink.needs(1)) {
          Tensor dw(ws.dims(), ws.dtype());
          dispatch(ws.dtype(), [&]<typename T>() {
            kernels::conv2d_backward_weight<T>(geo, xs.data<T>(), gc.data<T>(),
                                               dw.data<T>());
          });
          sink.add(1, dw);
        }
        if (sink.needs(2)) {
          Tensor db({geo.c_out}, gc.dtype());
          dispatch(gc.dtype(), [&]<typename T>() {
            const T* pg = gc.data<T>();
            T* pd = db.data<T>();
            const auto plane = geo.out_pixels();
            for (std::int64_t n = 0; n < geo.batch; ++n) {
              for (std::int64_t c = 0; c < geo.c_out; ++c) {
                const T* p = pg + (n * geo.c_out + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) pd[c] += p[i];
              }
            }
          });
          sink.add(2, db);
        }
      });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, std::int64_t stride,
              std::int64_t padding) {
  return conv2d_impl(x, w, nullptr, {stride, padding, false});
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              const Conv2dOptions& opts) {
  return conv2d_impl(x, w, bias.defined() ? &bias : nullptr, opts);
}

Tensor conv1x1(const Tensor& x, const Tensor& w, std::int64_t stride) {
  require_rank(w, 2, "conv1x1");
  const Tensor w4 = reshape(w, {w.dim(0), w.dim(1), 1, 1});
  return conv2d_impl(x, w4, nullptr, {stride, 0, true});
}

Tensor max_pool2d(const Tensor& x, std::int64_t kernel, std::int64_t stride,
                  std::int64_t padding) {
  require_rank(x, 4, "max_pool2d");
  const Conv2dOptions opts{stride, padding, true};
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto OH = conv_out_extent(H, kernel, opts);
  const auto OW = conv_out_extent(W, kernel, opts);
  const Tensor xs = x.contiguous();
  Tensor out({N, C, OH, OW}, x.dtype());
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(N * C * OH * OW));
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = xs.data<T>();
    T* py = out.data<T>();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t where = -1;
          for (std::int64_t i = 0; i < kernel; ++i) {
            const auto ih = oh * stride - padding + i;
            if (ih < 0 || ih >= H) continue;
            for (std::int64_t j = 0; j < kernel; ++j) {
              const auto iw = ow * stride - padding + j;
              if (iw < 0 || iw >= W) continue;
              const auto idx = (nc * H + ih) * W + iw;
              if (where < 0 || px[idx] > best) {
                best = px[idx];
                where = idx;
              }
            }
          }
          const auto o = (nc * OH + oh) * OW + ow;
          py[o] = best;
          (*argmax)[o] = where;
        }
      }
    }
  });
  Shape in_dims = x.dims();
  return tracked(std::move(out), {&x},
                 [argmax, in_dims](const Tensor& g, GradSink& sink) {
                   const Tensor gc = g.contiguous();
                   Tensor dx(in_dims, gc.dtype());
                   dispatch(gc.dtype(), [&]<typename T>() {
                     const T* pg = gc.data<T>();
                     T* pd = dx.data<T>();
                     for (std::size_t o = 0; o < argmax->size(); ++o) {
                       pd[(*argmax)[o]] += pg[o];
                     }
                   });
                   sink.add(0, dx);
                 });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const Tensor xs = x.contiguous();
  Tensor out({N, C}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = xs.data<T>();
    T* py = out.data<T>();
    for (std::int64_t i = 0; i < N * C; ++i) {
      T acc = 0;
      for (std::int64_t p = 0; p < HW; ++p) acc += px[i * HW + p];
      py[i] = acc / static_cast<T>(HW);
    }
  });
  Shape in_dims = x.dims();
  return tracked(std::move(out), {&x},
                 [in_dims, HW](const Tensor& g, GradSink& sink) {
                   const Tensor gc = g.contiguous();
                   Tensor dx(in_dims, gc.dtype());
                   dispatch(gc.dtype(), [&]<typename T>() {
                     const T* pg = gc.data<T>();
                     T* pd = dx.data<T>();
                     const auto n = gc.numel();
                     for (std::int64_t i = 0; i < n; ++i) {
                       const T v = pg[i] / static_cast<T>(HW);
                       for (std::int64_t p = 0; p < HW; ++p) pd[i * HW + p] = v;
                     }
                   });
                   sink.add(0, dx);
                 });
}

namespace {

// out[b*h + k, t, j] = x[b, t, k*dh + j] (split) and its inverse (merge).
Tensor head_permute(const Tensor& x, std::int64_t heads, bool split) {
  const Tensor xs = x.contiguous();
  std::int64_t B, T_, dh;
  if (split) {
    B = x.dim(0);
    T_ = x.dim(1);
    dh = x.dim(2) / heads;
  } else {
    B = x.dim(0) / heads;
    T_ = x.dim(1);
    dh = x.dim(2);
  }
  const Shape out_dims =
      split ? Shape{B * heads, T_, dh} : Shape{B, T_, heads * dh};
  Tensor out(out_dims, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* src = xs.data<T>();
    T* dst = out.data<T>();
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t k = 0; k < heads; ++k) {
        for (std::int64_t t = 0; t < T_; ++t) {
          const auto packed = ((b * heads + k) * T_ + t) * dh;
          const auto flat = (b * T_ + t) * heads * dh + k * dh;
          for (std::int64_t j = 0; j < dh; ++j) {
            if (split) {
              dst[packed + j] = src[flat + j];
            } else {
              dst[flat + j] = src[packed + j];
            }
          }
        }
      }
    }
  });
  return out;
}

}  // namespace

Tensor split_heads(const Tensor& x, std::int64_t heads) {
  require_rank(x, 3, "split_heads");
  if (heads < 1 || x.dim(2) % heads != 0) {
    throw ShapeError("split_heads: width " + std::to_string(x.dim(2)) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  return tracked(head_permute(x, heads, true), {&x},
                 [heads](const Tensor& g, GradSink& sink) {
                   sink.add(0, head_permute(g, heads, false));
                 });
}

Tensor merge_heads(const Tensor& x, std::int64_t heads) {
  require_rank(x, 3, "merge_heads");
  if (heads < 1 || x.dim(0) % heads != 0) {
    throw ShapeError("merge_heads: leading extent " + std::to_string(x.dim(0)) +
                     " not divisible by " + std::to_string(heads));
  }
  return tracked(head_permute(x, heads, false), {&x},
                 [heads](const Tensor& g, GradSink& sink) {
                   sink.add(0, head_permute(g, heads, true));
                 });
}

namespace {

// [N x A x B] <-> [N x B x A]
Tensor swap_inner(const Tensor& x, std::int64_t N, std::int64_t A,
                  std::int64_t B) {
  return swap_last2(x.contiguous().view_reshaped({N, A, B}));
}

}  // namespace

Tensor tokens_from_map(const Tensor& x) {
  require_rank(x, 4, "tokens_from_map");
  const auto N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  Shape in_dims = x.dims();
  return tracked(swap_inner(x, N, C, P), {&x},
                 [in_dims, N, C, P](const Tensor& g, GradSink& sink) {
                   sink.add(0, swap_inner(g, N, P, C).view_reshaped(in_dims));
                 });
}

Tensor prepend_token(const Tensor& x, const Tensor& token) {
  require_rank(x, 3, "prepend_token");
  const auto N = x.dim(0), T_ = x.dim(1), d = x.dim(2);
  if (token.dims() != Shape{d}) {
    throw ShapeError("prepend_token: token must be [" + std::to_string(d) +
                     "], got " + shape_str(token.dims()));
  }
  require_same_dtype(x, token, "prepend_token");
  const Tensor xs = x.contiguous();
  const Tensor ts = token.contiguous();
  Tensor out({N, T_ + 1, d}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = xs.data<T>();
    const T* pt = ts.data<T>();
    T* py = out.data<T>();
    for (std::int64_t n = 0; n < N; ++n) {
      T* dst = py + n * (T_ + 1) * d;
      std::copy(pt, pt + d, dst);
      std::copy(px + n * T_ * d, px + (n + 1) * T_ * d, dst + d);
    }
  });
  return tracked(std::move(out), {&x, &token},
                 [N, T_, d](const Tensor& g, GradSink& sink) {
                   const Tensor gc = g.contiguous();
                   Tensor dx({N, T_, d}, gc.dtype());
                   Tensor dt({d}, gc.dtype());
                   dispatch(gc.dtype(), [&]<typename T>() {
                     const T* pg = gc.data<T>();
                     T* px = dx.data<T>();
                     T* pt = dt.data<T>();
                     for (std::int64_t n = 0; n < N; ++n) {
                       const T* src = pg + n * (T_ + 1) * d;
                       for (std::int64_t j = 0; j < d; ++j) pt[j] += src[j];
                       std::copy(src + d, src + (T_ + 1) * d, px + n * T_ * d);
                     }
                   });
                   sink.add(0, dx);
                   sink.add(1, dt);
                 });
}

Tensor select_token(const Tensor& x, std::int64_t index) {
  require_rank(x, 3, "select_token");
  const auto N = x.dim(0), T_ = x.dim(1), d = x.dim(2);
  if (index < 0 || index >= T_) {
    throw IndexError("select_token: index " + std::to_string(index) +
                     " outside [0, " + std::to_string(T_) + ")");
  }
  const Tensor xs = x.contiguous();
  Tensor out({N, d}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = xs.data<T>();
    T* py = out.data<T>();
    for (std::int64_t n = 0; n < N; ++n) {
      std::copy(px + (n * T_ + index) * d, px + (n * T_ + index + 1) * d,
                py + n * d);
    }
  });
  Shape in_dims = x.dims();
  return tracked(std::move(out), {&x},
                 [in_dims, index, N, T_, d](const Tensor& g, GradSink& sink) {
                   const Tensor gc = g.contiguous();
                   Tensor dx(in_dims, gc.dtype());
                   dispatch(gc.dtype(), [&]<typename T>() {
                     const T* pg = gc.data<T>();
                     T* pd = dx.data<T>();
                     for (std::int64_t n = 0; n < N; ++n) {
                       std::copy(pg + n * d, pg + (n + 1) * d,
                                 pd + (n * T_ + index) * d);
                     }
                   });
                   sink.add(0, dx);
                 });
}

}  // namespace tiednet
