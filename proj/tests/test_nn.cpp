#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tiednet/error.hpp"
#include "tiednet/gradcheck.hpp"
#include "tiednet/nn.hpp"

using namespace tiednet;

namespace {

void set_values(const ParamPtr& p, std::initializer_list<double> v) {
  p->value.copy_from(Tensor::from_values(p->value.dims(), v, p->value.dtype()));
}

void set_identity(const ParamPtr& p) {
  p->value.fill(0.0);
  for (std::int64_t i = 0; i < std::min(p->value.dim(0), p->value.dim(1)); ++i) {
    p->value.set({i, i}, 1.0);
  }
}

Tensor probe_loss(const Tensor& y, std::uint64_t seed) {
  return sum(mul(y, oracle::random_tensor(y.dims(), seed, y.dtype())));
}

// Brute-force attention for x [T x d] (batch 1). Weights in y = W x form.
std::vector<double> attention_oracle(const std::vector<double>& x, std::int64_t T,
                                     std::int64_t d, std::int64_t h, const MhaLayer& l) {
  auto proj = [&](const ParamPtr& w, const ParamPtr& b) {
    auto y = oracle::matmul(x, oracle::transpose(w->value.values(), d, d), T, d, d);
    if (b) {
      const auto bv = b->value.values();
      for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t j = 0; j < d; ++j) y[t * d + j] += bv[j];
    }
    return y;
  };
  const auto q = proj(l.W_q, l.b_q), k = proj(l.W_k, l.b_k), v = proj(l.W_v, l.b_v);
  const std::int64_t hd = d / h;
  std::vector<double> merged(T * d, 0.0);
  for (std::int64_t head = 0; head < h; ++head) {
    for (std::int64_t i = 0; i < T; ++i) {
      std::vector<double> scores(T);
      for (std::int64_t j = 0; j < T; ++j) {
        double s = 0;
        for (std::int64_t c = 0; c < hd; ++c) s += q[i * d + head * hd + c] * k[j * d + head * hd + c];
        scores[j] = s / std::sqrt(static_cast<double>(hd));
      }
      const auto p = oracle::softmax(scores);
      for (std::int64_t c = 0; c < hd; ++c) {
        double s = 0;
        for (std::int64_t j = 0; j < T; ++j) s += p[j] * v[j * d + head * hd + c];
        merged[i * d + head * hd + c] = s;
      }
    }
  }
  auto out = oracle::matmul(merged, oracle::transpose(l.W_proj->value.values(), d, d), T, d, d);
  if (l.b_proj) {
    const auto bv = l.b_proj->value.values();
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t j = 0; j < d; ++j) out[t * d + j] += bv[j];
  }
  return out;
}

void make_pass_through(BatchNorm2dLayer& bn) {
  bn.mode = NormMode::eval;
  bn.eps = 0.0;
}

}  // namespace

TEST_CASE("linear layer") {
  LinearLayer l("fc", 2, 2, true, DType::f64);
  SUBCASE("identity") {
    set_identity(l.W);
    const Tensor x = oracle::random_tensor({3, 2}, 1);
    CHECK(l.forward(x).values() == x.values());
  }
  SUBCASE("hand arithmetic") {
    set_values(l.W, {1, 2, 3, 4});
    CHECK(l.forward(Tensor::from_values({2}, {1, 1}, DType::f64)).values() ==
          std::vector<double>{3, 7});
  }
  SUBCASE("matmul oracle over leading axes") {
    LinearLayer r("r", 4, 3, true, DType::f64);
    oracle::randomize(r.W, 2);
    oracle::randomize(r.b, 3);
    const Tensor x = oracle::random_tensor({2, 5, 4}, 4);
    auto want = oracle::matmul(x.values(), oracle::transpose(r.W->value.values(), 3, 4), 10, 4, 3);
    const auto b = r.b->value.values();
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 3; ++j) want[i * 3 + j] += b[j];
    const Tensor y = r.forward(x);
    CHECK(y.dims() == Shape{2, 5, 3});
    CHECK(oracle::max_abs_diff(y.values(), want) < 1e-13);
    CHECK(r.macs(x.dims()) == 10 * 4 * 3);
  }
  SUBCASE("shape error") {
    CHECK_THROWS_AS(l.forward(Tensor::zeros({3}, DType::f64)), ShapeError);
  }
}

TEST_CASE("multi-head attention") {
  SUBCASE("single token with identity weights is the identity") {
    MhaLayer l("attn", 4, 1, false, false, DType::f64);
    for (const auto& w : {l.W_q, l.W_k, l.W_v, l.W_proj}) set_identity(w);
    const Tensor x = oracle::random_tensor({1, 1, 4}, 1);
    CHECK(oracle::max_abs_diff(l.forward(x).values(), x.values()) < 1e-15);
  }
  SUBCASE("identical tokens produce identical rows") {
    MhaLayer l("attn", 4, 2, true, true, DType::f64);
    for (const auto& p : l.parameters()) oracle::randomize(p, 3);
    const Tensor row = oracle::random_tensor({4}, 4);
    auto v = row.values();
    v.insert(v.end(), v.begin(), v.end());
    const auto y = l.forward(Tensor::from_values({1, 2, 4}, v, DType::f64)).values();
    for (int j = 0; j < 4; ++j) CHECK(y[j] == y[4 + j]);
  }
  SUBCASE("brute-force oracle, B=1 T=3 d=4 h=2") {
    MhaLayer l("attn", 4, 2, true, true, DType::f64);
    std::uint64_t seed = 10;
    for (const auto& p : l.parameters()) oracle::randomize(p, seed++);
    const Tensor x = oracle::random_tensor({1, 3, 4}, 5);
    const auto want = attention_oracle(x.values(), 3, 4, 2, l);
    CHECK(oracle::max_abs_diff(l.forward(x).values(), want) < 1e-13);
  }
  SUBCASE("attention rows are stochastic") {
    MhaLayer l("attn", 8, 2, true, true, DType::f32);
    std::uint64_t seed = 20;
    for (const auto& p : l.parameters()) oracle::randomize(p, seed++, 0.5);
    Tensor probs;
    l.forward(oracle::random_tensor({2, 5, 8}, 6, DType::f32), &probs);
    CHECK(probs.dims() == Shape{4, 5, 5});
    const auto p = probs.values();
    for (int r = 0; r < 20; ++r) {
      double s = 0;
      for (int c = 0; c < 5; ++c) s += p[r * 5 + c];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  SUBCASE("parameter count and errors") {
    MhaLayer biased("a", 8, 2, true, true, DType::f32);
    MhaLayer bare("b", 8, 2, false, false, DType::f32);
    auto count = [](const Module& m) {
      std::int64_t n = 0;
      for (const auto& p : m.parameters()) n += p->value.numel();
      return n;
    };
    CHECK(count(bare) == 4 * 64);
    CHECK(count(biased) == 4 * 64 + 4 * 8);
    CHECK_THROWS_AS(MhaLayer("c", 8, 3, true, true, DType::f32), ShapeError);
    CHECK_THROWS_AS(biased.forward(Tensor::zeros({1, 2, 4}, DType::f32)), ShapeError);
  }
}

TEST_CASE("feed-forward layer") {
  SUBCASE("identity weights, relu, positive input") {
    FfnLayer l("ffn", 3, 3, Activation::relu, DType::f64);
    set_identity(l.W_1);
    set_identity(l.W_2);
    const Tensor x = Tensor::from_values({2, 3}, {1, 2, 3, 0.5, 4, 6}, DType::f64);
    CHECK(l.forward(x).values() == x.values());
  }
  SUBCASE("scalar arithmetic") {
    FfnLayer l("ffn", 1, 1, Activation::relu, DType::f64);
    set_values(l.W_1, {2});
    set_values(l.W_2, {3});
    set_values(l.b_1, {1});
    set_values(l.b_2, {-1});
    CHECK(l.forward(Tensor::from_values({1}, {1}, DType::f64)).item() == 8.0);
  }
  SUBCASE("composed-ops oracle and parameter count") {
    FfnLayer l("ffn", 4, 6, Activation::gelu, DType::f64);
    std::uint64_t seed = 30;
    for (const auto& p : l.parameters()) oracle::randomize(p, seed++);
    const Tensor x = oracle::random_tensor({3, 4}, 7);
    const Tensor want = add_bias(
        matmul(gelu(add_bias(matmul(x, transpose(l.W_1->value)), l.b_1->value)),
               transpose(l.W_2->value)),
        l.b_2->value);
    CHECK(l.forward(x).values() == want.values());
    std::int64_t n = 0;
    for (const auto& p : l.parameters()) n += p->value.numel();
    CHECK(n == 2 * 4 * 6 + 6 + 4);
    CHECK(l.W_2->value.dims() == Shape{l.W_1->value.dim(1), l.W_1->value.dim(0)});
  }
  SUBCASE("finite-difference check") {
    FfnLayer l("ffn", 3, 5, Activation::gelu, DType::f64);
    std::uint64_t seed = 40;
    for (const auto& p : l.parameters()) oracle::randomize(p, seed++);
    const Tensor x = oracle::random_tensor({2, 3}, 8);
    const auto rep = grad_check([&] { return probe_loss(l.forward(x), 9); }, l.parameters());
    CHECK_MESSAGE(rep.passed, rep.text());
  }
}

TEST_CASE("bottleneck block") {
  SUBCASE("identity convolutions with pass-through norms give 2x") {
    BottleneckBlock b("blk", 3, 3, 3, 1, false, DType::f64);
    set_identity(b.W_reduce);
    set_identity(b.W_expand);
    b.W_conv3->value.fill(0.0);
    for (std::int64_t c = 0; c < 3; ++c) b.W_conv3->value.set({c, c, 1, 1}, 1.0);
    make_pass_through(b.bn1);
    make_pass_through(b.bn2);
    make_pass_through(b.bn3);
    Tensor x = oracle::random_tensor({2, 3, 4, 4}, 1);
    x = relu(x);
    const auto y = b.forward(x).values();
    const auto xv = x.values();
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 2 * xv[i]);
  }
  SUBCASE("zero expand leaves relu(shortcut)") {
    BottleneckBlock b("blk", 4, 2, 8, 2, true, DType::f64);
    std::uint64_t seed = 50;
    for (const auto& p : b.parameters()) {
      if (p->trainable) oracle::randomize(p, seed++);
    }
    b.W_expand->value.fill(0.0);
    b.bn3.beta->value.fill(0.0);
    b.set_mode(NormMode::eval);
    const Tensor x = oracle::random_tensor({1, 4, 5, 5}, 2);
    const Tensor shortcut = b.bn_down->forward(conv1x1(x, b.W_down->value, 2));
    CHECK(b.forward(x).values() == relu(shortcut).values());
  }
  SUBCASE("composed-ops oracle, output non-negative") {
    BottleneckBlock b("blk", 4, 2, 4, 1, false, DType::f64);
    std::uint64_t seed = 60;
    for (const auto& p : b.parameters()) {
      if (p->trainable) oracle::randomize(p, seed++);
    }
    const Tensor x = oracle::random_tensor({2, 4, 5, 5}, 3);
    Tensor rm1 = b.bn1.running_mean->value.clone(), rv1 = b.bn1.running_var->value.clone();
    Tensor rm2 = b.bn2.running_mean->value.clone(), rv2 = b.bn2.running_var->value.clone();
    Tensor rm3 = b.bn3.running_mean->value.clone(), rv3 = b.bn3.running_var->value.clone();
    auto bn = [](const Tensor& t, const BatchNorm2dLayer& l, Tensor& rm, Tensor& rv) {
      return batch_norm2d(t, l.gamma->value, l.beta->value, rm, rv, NormMode::train);
    };
    Tensor h = relu(bn(conv1x1(x, b.W_reduce->value), b.bn1, rm1, rv1));
    h = relu(bn(conv2d(h, b.W_conv3->value, 1, 1), b.bn2, rm2, rv2));
    h = bn(conv1x1(h, b.W_expand->value), b.bn3, rm3, rv3);
    const Tensor want = relu(add(h, x));
    const auto y = b.forward(x).values();
    CHECK(y == want.values());
    for (double v : y) CHECK(v >= 0.0);
  }
  SUBCASE("finite-difference check") {
    BottleneckBlock b("blk", 4, 2, 4, 1, false, DType::f64);
    std::uint64_t seed = 70;
    for (const auto& p : b.parameters()) {
      if (p->trainable) oracle::randomize(p, seed++);
    }
    const Tensor x = oracle::random_tensor({2, 4, 5, 5}, 4);
    std::vector<ParamPtr> params;
    for (const auto& p : b.parameters()) {
      if (p->trainable) params.push_back(p);
    }
    const auto rep = grad_check([&] { return probe_loss(b.forward(x), 5); }, params);
    CHECK_MESSAGE(rep.passed, rep.text());
  }
  SUBCASE("mismatched dims without downsample") {
    BottleneckBlock b("blk", 4, 2, 8, 1, false, DType::f64);
    CHECK_THROWS_AS(b.forward(oracle::random_tensor({1, 4, 3, 3}, 5)), ShapeError);
  }
}

TEST_CASE("patch embedding") {
  SUBCASE("token arithmetic") {
    PatchEmbed pe("pe", 32, 16, 3, 8, DType::f32);
    CHECK(pe.tokens() == 4);
    CHECK(pe.forward(Tensor::zeros({2, 3, 32, 32}, DType::f32)).dims() == Shape{2, 5, 8});
  }
  SUBCASE("zero weights and positions leave only the class token") {
    PatchEmbed pe("pe", 8, 4, 3, 6, DType::f64);
    oracle::randomize(pe.cls_token, 1);
    const auto y = pe.forward(oracle::random_tensor({1, 3, 8, 8}, 2)).values();
    for (std::size_t i = 6; i < y.size(); ++i) CHECK(y[i] == 0.0);
    CHECK(std::vector<double>(y.begin(), y.begin() + 6) == pe.cls_token->value.values());
  }
  SUBCASE("unfold-then-linear oracle") {
    PatchEmbed pe("pe", 8, 4, 3, 5, DType::f64);
    std::uint64_t seed = 80;
    for (const auto& p : pe.parameters()) oracle::randomize(p, seed++);
    const Tensor x = oracle::random_tensor({2, 3, 8, 8}, 3);
    const auto xv = x.values();
    const auto w = pe.weight->value.values();  // [5 x 3*4*4]
    const auto b = pe.bias->value.values();
    const auto cls = pe.cls_token->value.values();
    const auto pos = pe.pos_embed->value.values();
    const auto y = pe.forward(x).values();
    for (int n = 0; n < 2; ++n) {
      for (int t = 0; t <= 4; ++t) {
        for (int j = 0; j < 5; ++j) {
          double want = pos[t * 5 + j];
          if (t == 0) {
            want += cls[j];
          } else {
            const int ph = (t - 1) / 2, pw = (t - 1) % 2;
            double s = b[j];
            for (int c = 0; c < 3; ++c)
              for (int i = 0; i < 4; ++i)
                for (int k = 0; k < 4; ++k)
                  s += w[((j * 3 + c) * 4 + i) * 4 + k] *
                       xv[((n * 3 + c) * 8 + ph * 4 + i) * 8 + pw * 4 + k];
            want += s;
          }
          CHECK(y[(n * 5 + t) * 5 + j] == doctest::Approx(want).epsilon(1e-13));
        }
      }
    }
  }
  SUBCASE("divisibility") {
    CHECK_THROWS_AS(PatchEmbed("pe", 30, 16, 3, 8, DType::f32), ShapeError);
  }
}
