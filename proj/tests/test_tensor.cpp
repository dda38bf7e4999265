#include <doctest.h>

#include "oracles.hpp"
#include "tiednet/error.hpp"
#include "tiednet/ops.hpp"

using namespace tiednet;

TEST_CASE("tensor numel matches dims and extents must be positive") {
  Tensor t({2, 3, 4}, DType::f32);
  CHECK(t.numel() == 24);
  CHECK(t.values().size() == 24);
  CHECK_THROWS_AS(Tensor({2, 0}, DType::f32), ShapeError);
  CHECK_THROWS_AS(Tensor({-1}, DType::f64), ShapeError);
}

TEST_CASE("from_values rejects a length mismatch") {
  CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("typed access checks dtype") {
  Tensor t({2}, DType::f32);
  CHECK_NOTHROW(t.data<float>());
  CHECK_THROWS_AS(t.data<double>(), ContractError);
}

TEST_CASE("transpose view") {
  const Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});

  SUBCASE("values") {
    CHECK(transpose(a).values() == std::vector<double>{1, 3, 2, 4});
  }
  SUBCASE("involution") {
    const Tensor x = oracle::random_tensor({3, 5}, 7);
    const Tensor tt = transpose(transpose(x));
    CHECK(tt.dims() == x.dims());
    CHECK(tt.values() == x.values());
  }
  SUBCASE("shares storage") {
    Tensor v = transpose(a);
    CHECK(v.storage_id() == a.storage_id());
    v.set({0, 1}, 9.0);
    CHECK(a.at({1, 0}) == 9.0);
  }
  SUBCASE("rank error") {
    CHECK_THROWS_AS(transpose(Tensor({2, 2, 2}, DType::f32)), RankError);
    CHECK_THROWS_AS(Tensor({3}, DType::f32).view_transposed(), RankError);
  }
}

TEST_CASE("contiguous copy of a view is a new buffer in logical order") {
  const Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor c = a.view_transposed().contiguous();
  CHECK(c.is_contiguous());
  CHECK(c.storage_id() != a.storage_id());
  CHECK(c.values() == std::vector<double>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("dtype conversion round-trips representable values") {
  const Tensor a = Tensor::from_values({3}, {0.5, -2.0, 8.0}, DType::f64);
  const Tensor b = a.to(DType::f32).to(DType::f64);
  CHECK(b.values() == a.values());
}
