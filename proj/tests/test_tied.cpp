#include <doctest.h>

#include "oracles.hpp"
#include "tiednet/error.hpp"
#include "tiednet/gradcheck.hpp"
#include "tiednet/tied.hpp"

using namespace tiednet;

namespace {

Tensor probe_loss(const Tensor& y, std::uint64_t seed) {
  return sum(mul(y, oracle::random_tensor(y.dims(), seed, y.dtype())));
}

void set_values(const ParamPtr& p, std::initializer_list<double> v) {
  p->value.copy_from(Tensor::from_values(p->value.dims(), v, p->value.dtype()));
}

void randomize_all(const std::vector<ParamPtr>& params, std::uint64_t seed) {
  for (const auto& p : params) {
    if (p->trainable) oracle::randomize(p, seed++);
  }
}

std::vector<double> transposed(const ParamPtr& p) {
  return oracle::transpose(p->value.values(), p->value.dim(0), p->value.dim(1));
}

std::vector<double> plus(std::vector<double> a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

std::vector<ParamPtr> trainable(const Module& m) {
  std::vector<ParamPtr> out;
  for (const auto& p : m.parameters()) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

}  // namespace

TEST_CASE("tied feed-forward") {
  SUBCASE("scalar arithmetic") {
    TiedFfnLayer l("ffn", 1, 1, Activation::relu, DType::f64);
    set_values(l.W, {2});
    CHECK(l.forward(Tensor::from_values({1}, {3}, DType::f64)).item() == 12.0);
  }
  SUBCASE("orthonormal W with positive inputs reproduces the input") {
    TiedFfnLayer l("ffn", 2, 2, Activation::relu, DType::f64);
    set_values(l.W, {1, 0, 0, 1});
    const Tensor x = Tensor::from_values({2}, {1.5, 2}, DType::f64);
    CHECK(l.forward(x).values() == x.values());
  }
  SUBCASE("second role is a view of the first") {
    TiedFfnLayer l("ffn", 4, 6, Activation::gelu, DType::f32);
    CHECK(l.second_weight().storage_id() == l.W->value.storage_id());
    l.W->value.set({2, 3}, 0.25);
    CHECK(l.second_weight().at({3, 2}) == 0.25);
  }
  SUBCASE("parameter count, d=4 hidden=4") {
    TiedFfnLayer tied("t", 4, 4, Activation::relu, DType::f32);
    FfnLayer untied("u", 4, 4, Activation::relu, DType::f32);
    auto count = [](const Module& m) {
      std::int64_t n = 0;
      for (const auto& p : m.parameters()) n += p->value.numel();
      return n;
    };
    CHECK(count(tied) == 16 + 4 + 4);
    CHECK(count(untied) == 32 + 4 + 4);
  }
  SUBCASE("equals an untied layer holding a copied transpose") {
    TiedFfnLayer tied("t", 3, 5, Activation::gelu, DType::f64);
    randomize_all(tied.parameters(), 1);
    FfnLayer untied("u", 3, 5, Activation::gelu, DType::f64);
    untied.W_1->value.copy_from(tied.W->value);
    untied.W_2->value.copy_from(Tensor::from_values({3, 5}, transposed(tied.W), DType::f64));
    untied.b_1->value.copy_from(tied.b_1->value);
    untied.b_2->value.copy_from(tied.b_2->value);
    const Tensor x = oracle::random_tensor({4, 3}, 2);
    {
      Tape tape;
      const Tensor y = tied.forward(x);
      tape.backward(probe_loss(y, 3));
      Tape t2;
      const Tensor yu = untied.forward(x);
      t2.backward(probe_loss(yu, 3));
      CHECK(y.values() == yu.values());
    }
    const auto want = plus(untied.W_1->grad.values(),
                           oracle::transpose(untied.W_2->grad.values(), 3, 5));
    CHECK(oracle::max_abs_diff(tied.W->grad.values(), want) < 1e-12);
  }
  SUBCASE("finite-difference check") {
    TiedFfnLayer l("ffn", 4, 6, Activation::gelu, DType::f64);
    randomize_all(l.parameters(), 10);
    const Tensor x = oracle::random_tensor({2, 3, 4}, 4);
    const auto rep = grad_check([&] { return probe_loss(l.forward(x), 5); }, l.parameters());
    CHECK_MESSAGE(rep.passed, rep.text());
  }
}

TEST_CASE("tied attention") {
  SUBCASE("two matrices, views share storage") {
    TiedMhaLayer l("attn", 8, 2, true, true, DType::f32);
    CHECK(l.parameters().size() == 2 + 4);
    CHECK(l.value_weight().storage_id() == l.W_kv->value.storage_id());
    CHECK(l.projection_weight().storage_id() == l.W_q->value.storage_id());
  }
  SUBCASE("single token, identity weights") {
    TiedMhaLayer l("attn", 4, 1, false, false, DType::f64);
    for (std::int64_t i = 0; i < 4; ++i) {
      l.W_q->value.set({i, i}, 1.0);
      l.W_kv->value.set({i, i}, 1.0);
    }
    const Tensor x = oracle::random_tensor({1, 1, 4}, 1);
    CHECK(oracle::max_abs_diff(l.forward(x).values(), x.values()) < 1e-15);
  }
  SUBCASE("equals an untied layer holding copied transposes") {
    TiedMhaLayer tied("t", 6, 2, true, true, DType::f64);
    randomize_all(tied.parameters(), 20);
    MhaLayer untied("u", 6, 2, true, true, DType::f64);
    untied.W_q->value.copy_from(tied.W_q->value);
    untied.W_k->value.copy_from(tied.W_kv->value);
    untied.W_v->value.copy_from(Tensor::from_values({6, 6}, transposed(tied.W_kv), DType::f64));
    untied.W_proj->value.copy_from(Tensor::from_values({6, 6}, transposed(tied.W_q), DType::f64));
    for (auto [a, b] : {std::pair{tied.b_q, untied.b_q}, {tied.b_k, untied.b_k},
                        {tied.b_v, untied.b_v}, {tied.b_proj, untied.b_proj}}) {
      b->value.copy_from(a->value);
    }
    const Tensor x = oracle::random_tensor({2, 3, 6}, 21);
    {
      Tape tape;
      const Tensor y = tied.forward(x);
      tape.backward(probe_loss(y, 22));
      Tape t2;
      const Tensor yu = untied.forward(x);
      t2.backward(probe_loss(yu, 22));
      CHECK(y.values() == yu.values());
    }
    const auto want_q = plus(untied.W_q->grad.values(),
                             oracle::transpose(untied.W_proj->grad.values(), 6, 6));
    const auto want_kv = plus(untied.W_k->grad.values(),
                              oracle::transpose(untied.W_v->grad.values(), 6, 6));
    CHECK(oracle::max_abs_diff(tied.W_q->grad.values(), want_q) < 1e-12);
    CHECK(oracle::max_abs_diff(tied.W_kv->grad.values(), want_kv) < 1e-12);
    CHECK(oracle::max_abs_diff(tied.b_v->grad.values(), untied.b_v->grad.values()) < 1e-12);
  }
  SUBCASE("finite-difference check") {
    TiedMhaLayer l("attn", 4, 2, true, true, DType::f64);
    randomize_all(l.parameters(), 30);
    const Tensor x = oracle::random_tensor({2, 3, 4}, 31);
    const auto rep = grad_check([&] { return probe_loss(l.forward(x), 32); }, l.parameters());
    CHECK_MESSAGE(rep.passed, rep.text());
  }
  SUBCASE("head divisibility") {
    CHECK_THROWS_AS(TiedMhaLayer("attn", 6, 4, true, true, DType::f32), ShapeError);
  }
}

TEST_CASE("tied bottleneck block") {
  SUBCASE("requires an identity shortcut") {
    CHECK_THROWS_AS(TiedBottleneckBlock("b", 8, 2, 16, 1, nullptr, DType::f32), BuildError);
    CHECK_THROWS_AS(TiedBottleneckBlock("b", 8, 2, 8, 2, nullptr, DType::f32), BuildError);
    auto wrong = make_param("w", Tensor::zeros({3, 8}, DType::f32));
    CHECK_THROWS_AS(TiedBottleneckBlock("b", 8, 2, 8, 1, wrong, DType::f32), BuildError);
  }
  SUBCASE("zero W leaves relu(x)") {
    TiedBottleneckBlock b("b", 4, 2, 4, 1, nullptr, DType::f64);
    randomize_all(b.parameters(), 40);
    b.W->value.fill(0.0);
    b.bn3.beta->value.fill(0.0);
    b.set_mode(NormMode::eval);
    const Tensor x = oracle::random_tensor({1, 4, 3, 3}, 41);
    CHECK(b.forward(x).values() == relu(x).values());
  }
  SUBCASE("reduce output is the 1x1 projection by W") {
    TiedBottleneckBlock b("b", 4, 2, 4, 1, nullptr, DType::f64);
    oracle::randomize(b.W, 42);
    const Tensor x = oracle::random_tensor({2, 4, 3, 3}, 43);
    const auto got = b.reduce_output(x).values();
    const auto w = b.W->value.values();
    const auto xv = x.values();
    for (int n = 0; n < 2; ++n)
      for (int o = 0; o < 2; ++o)
        for (int p = 0; p < 9; ++p) {
          double s = 0;
          for (int c = 0; c < 4; ++c) s += w[o * 4 + c] * xv[(n * 4 + c) * 9 + p];
          CHECK(got[(n * 2 + o) * 9 + p] == doctest::Approx(s).epsilon(1e-14));
        }
  }
  SUBCASE("equals an untied block holding a copied transpose") {
    TiedBottleneckBlock tied("t", 4, 2, 4, 1, nullptr, DType::f64);
    randomize_all(tied.parameters(), 50);
    BottleneckBlock untied("u", 4, 2, 4, 1, false, DType::f64);
    untied.W_reduce->value.copy_from(tied.W->value);
    untied.W_expand->value.copy_from(Tensor::from_values({4, 2}, transposed(tied.W), DType::f64));
    untied.W_conv3->value.copy_from(tied.W_conv3->value);
    for (auto [a, b] : {std::pair{&tied.bn1, &untied.bn1}, {&tied.bn2, &untied.bn2},
                        {&tied.bn3, &untied.bn3}}) {
      b->gamma->value.copy_from(a->gamma->value);
      b->beta->value.copy_from(a->beta->value);
    }
    const Tensor x = oracle::random_tensor({2, 4, 5, 5}, 51);
    {
      Tape tape;
      const Tensor y = tied.forward(x);
      tape.backward(probe_loss(y, 52));
      Tape t2;
      const Tensor yu = untied.forward(x);
      t2.backward(probe_loss(yu, 52));
      CHECK(y.values() == yu.values());
    }
    const auto want = plus(untied.W_reduce->grad.values(),
                           oracle::transpose(untied.W_expand->grad.values(), 4, 2));
    CHECK(oracle::max_abs_diff(tied.W->grad.values(), want) < 1e-12);
  }
  SUBCASE("finite-difference check") {
    TiedBottleneckBlock b("b", 4, 2, 4, 1, nullptr, DType::f64);
    randomize_all(b.parameters(), 60);
    const Tensor x = oracle::random_tensor({2, 4, 5, 5}, 61);
    const auto rep = grad_check([&] { return probe_loss(b.forward(x), 62); }, trainable(b));
    CHECK_MESSAGE(rep.passed, rep.text());
  }
}

TEST_CASE("shared stage") {
  SUBCASE("one W across blocks, named after the stage") {
    SharedStage s("stage3", 3, 8, 2, DType::f32, 1);
    CHECK(s.W->name == "stage3.shared.W");
    REQUIRE(s.blocks.size() == 3);
    for (const auto& b : s.blocks) CHECK(b->W.get() == s.W.get());
    CHECK(s.blocks[0]->W_conv3->name == "stage3.1.conv3x3.W");
    CHECK(s.blocks[0]->W_conv3.get() != s.blocks[1]->W_conv3.get());
    std::int64_t w_entries = 0;
    for (const auto& p : s.parameters()) w_entries += (p.get() == s.W.get());
    CHECK(w_entries == 1);
  }
  SUBCASE("W grad is the sum of per-block contributions") {
    SharedStage s("s", 2, 4, 2, DType::f64);
    randomize_all(s.parameters(), 70);
    const Tensor x = oracle::random_tensor({2, 4, 4, 4}, 71);
    {
      Tape tape;
      tape.backward(probe_loss(s.forward(x), 72));
    }
    const auto total = s.W->grad.values();

    // Rebuild the same computation with a private copy of W per block.
    std::vector<ParamPtr> copies;
    for (int i = 0; i < 2; ++i) {
      copies.push_back(make_param("copy", s.W->value.clone()));
    }
    std::vector<std::unique_ptr<TiedBottleneckBlock>> privates;
    for (int i = 0; i < 2; ++i) {
      auto b = std::make_unique<TiedBottleneckBlock>("p", 4, 2, 4, 1, copies[i], DType::f64);
      b->W_conv3->value.copy_from(s.blocks[i]->W_conv3->value);
      for (auto [src, dst] : {std::pair{&s.blocks[i]->bn1, &b->bn1},
                              {&s.blocks[i]->bn2, &b->bn2}, {&s.blocks[i]->bn3, &b->bn3}}) {
        dst->gamma->value.copy_from(src->gamma->value);
        dst->beta->value.copy_from(src->beta->value);
      }
      privates.push_back(std::move(b));
    }
    {
      Tape tape;
      tape.backward(probe_loss(privates[1]->forward(privates[0]->forward(x)), 72));
    }
    const auto want = plus(copies[0]->grad.values(), copies[1]->grad.values());
    CHECK(oracle::max_abs_diff(total, want) < 1e-12);
  }
  SUBCASE("finite-difference check") {
    SharedStage s("s", 2, 4, 2, DType::f64);
    randomize_all(s.parameters(), 80);
    const Tensor x = oracle::random_tensor({2, 4, 5, 5}, 81);
    const auto rep = grad_check([&] { return probe_loss(s.forward(x), 82); }, trainable(s));
    CHECK_MESSAGE(rep.passed, rep.text());
  }
}
