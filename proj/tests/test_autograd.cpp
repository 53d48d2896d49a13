#include <doctest.h>

#include <cmath>
#include <random>

#include "mcm/ops.hpp"
#include "mcm/tensor.hpp"
#include "support/bridge.hpp"
#include "support/gradcheck.hpp"
#include "support/oracle.hpp"

using namespace mcm;

namespace {

gradcheck::Options exhaustive() {
  gradcheck::Options o;
  o.samples_per_tensor = 0;
  return o;
}

void require_ok(const gradcheck::Report& r) {
  INFO(r.worst);
  for (const auto& f : r.failed) INFO(f);
  CHECK(r.failures == 0);
  CHECK(r.checked > 0);
}

}  // namespace

TEST_CASE("tensor construction and accessors") {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.size(0) == 2);
  CHECK(t.size(-1) == 3);
  CHECK(t.value({1, 2}) == 6.0);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(t.item(), ContractError);
  CHECK(Tensor::scalar(2.5).item() == 2.5);
  CHECK(shape_str({2, 3}) == "[2,3]");
}

TEST_CASE("copies alias storage, detach does not") {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tensor alias = a;
  alias.mutable_data()[0] = 7;
  CHECK(a.data()[0] == 7);
  Tensor d = a.detach();
  d.mutable_data()[0] = 1;
  CHECK(a.data()[0] == 7);
  CHECK_FALSE(d.requires_grad());
}

TEST_CASE("elementwise ops match hand values and broadcast over leading extents") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2}, {10, 20});
  const auto s = bridge::values(add(a, b));
  CHECK(s == oracle::Vec{11, 22, 13, 24});
  CHECK(bridge::values(sub(a, b)) == oracle::Vec{-9, -18, -7, -16});
  CHECK(bridge::values(mul(a, b)) == oracle::Vec{10, 40, 30, 80});
  CHECK(bridge::values(scale(a, 2)) == oracle::Vec{2, 4, 6, 8});
  CHECK(bridge::values(square(a)) == oracle::Vec{1, 4, 9, 16});
  CHECK(sum(a).item() == 10);
  CHECK(mean(a).item() == 2.5);
  CHECK(bridge::values(mean_lastdim(a)) == oracle::Vec{1.5, 3.5});
  CHECK_THROWS_AS(add(a, Tensor::from({3}, {1, 2, 3})), DimensionError);
  // Only suffix broadcasting: [2] against [2, 1] is rejected.
  CHECK_THROWS_AS(add(Tensor::zeros({2, 1}), b), DimensionError);
}

TEST_CASE("matmul matches the triple loop for batched and shared operands") {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t batch = 1 + gen() % 3, m = 1 + gen() % 5, k = 1 + gen() % 6, n = 1 + gen() % 4;
    Tensor a = bridge::random_tensor(gen, {batch, m, k});
    Tensor b3 = bridge::random_tensor(gen, {batch, k, n});
    Tensor b2 = bridge::random_tensor(gen, {k, n});
    const Tensor c3 = matmul(a, b3);
    const Tensor c2 = matmul(a, b2);
    REQUIRE(c3.shape() == Shape{batch, m, n});
    for (std::size_t s = 0; s < batch; ++s) {
      const auto av = bridge::sample(a, s);
      CHECK(bridge::max_abs_diff(bridge::sample(c3, s), oracle::matmul(av, bridge::sample(b3, s), m, k, n)) < 1e-12);
      CHECK(bridge::max_abs_diff(bridge::sample(c2, s), oracle::matmul(av, bridge::values(b2), m, k, n)) < 1e-12);
    }
  }
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), DimensionError);
}

TEST_CASE("softmax, layer norm and gelu match independent formulas") {
  std::mt19937_64 gen(5);
  const std::size_t rows = 4, cols = 7;
  const oracle::Vec x = oracle::random_vec(gen, rows * cols, -4, 4);
  const Tensor xt = bridge::tensor({rows, cols}, x);
  CHECK(bridge::max_abs_diff(bridge::values(softmax_lastdim(xt)), oracle::softmax_rows(x, rows, cols)) < 1e-14);

  const oracle::Vec g = oracle::random_vec(gen, cols, 0.5, 1.5);
  const oracle::Vec bias = oracle::random_vec(gen, cols);
  const Tensor ln = layer_norm(xt, bridge::tensor({cols}, g), bridge::tensor({cols}, bias), 1e-5);
  CHECK(bridge::max_abs_diff(bridge::values(ln), oracle::layer_norm_rows(x, rows, cols, g, bias, 1e-5)) < 1e-12);

  oracle::Vec gx;
  for (double v : x) gx.push_back(oracle::gelu(v));
  CHECK(bridge::max_abs_diff(bridge::values(gelu(xt)), gx) < 1e-13);
  // Exact Phi, not the tanh approximation: gelu(1) = Phi(1) = 0.841344746...
  CHECK(gelu(Tensor::scalar(1.0)).item() == doctest::Approx(0.8413447460685429).epsilon(1e-14));
}

TEST_CASE("softmax is stable for large logits") {
  const Tensor y = softmax_lastdim(Tensor::from({1, 3}, {1000, 1001, 1002}));
  for (double v : y.data()) CHECK(std::isfinite(v));
  CHECK(y.data()[2] == doctest::Approx(0.6652409557748219));
}

TEST_CASE("row gather, scatter, concat and head reshapes") {
  Tensor x = Tensor::from({1, 3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(bridge::values(gather_rows(x, {2, 0, 2})) == oracle::Vec{5, 6, 1, 2, 5, 6});
  CHECK(bridge::values(scatter_rows(Tensor::from({1, 2, 2}, {1, 1, 2, 2}), {1, 1}, 3)) == oracle::Vec{0, 0, 3, 3, 0, 0});
  CHECK_THROWS_AS(gather_rows(x, {3}), IndexError);
  CHECK(bridge::values(concat_rows(x, Tensor::from({1, 1, 2}, {7, 8}))) == oracle::Vec{1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(expand_leading(Tensor::from({2}, {1, 2}), 3).shape() == Shape{3, 2});

  Tensor h = Tensor::from({1, 2, 4}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor split = split_heads(h, 2);
  CHECK(split.shape() == Shape{1, 2, 2, 2});
  CHECK(bridge::values(split) == oracle::Vec{0, 1, 4, 5, 2, 3, 6, 7});
  CHECK(bridge::values(merge_heads(split)) == bridge::values(h));
  CHECK(bridge::values(transpose_last2(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}))) == oracle::Vec{1, 4, 2, 5, 3, 6});

  Tensor c = Tensor::from({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(bridge::values(select_row(c, 1)) == oracle::Vec{3, 4, 7, 8});
  CHECK(bridge::values(replace_row(c, 0, Tensor::from({2, 2}, {0, 0, 9, 9}))) == oracle::Vec{0, 0, 3, 4, 9, 9, 7, 8});
}

TEST_CASE("gradients of every primitive agree with central differences") {
  std::mt19937_64 gen(11);
  const auto ex = exhaustive();
  Tensor a = bridge::random_tensor(gen, {2, 3, 4}, true);
  Tensor b = bridge::random_tensor(gen, {3, 4}, true);
  Tensor w = bridge::random_tensor(gen, {4, 5}, true);
  Tensor bw = bridge::random_tensor(gen, {2, 4, 5}, true);
  Tensor g = bridge::random_tensor(gen, {4}, true, 0.5, 1.5);
  Tensor beta = bridge::random_tensor(gen, {4}, true);
  Tensor row = bridge::random_tensor(gen, {2, 4}, true);

  SUBCASE("binary with broadcast") {
    require_ok(gradcheck::check({{"a", a}, {"b", b}}, [&] { return gradcheck::probe_sum(add(a, b), 1); }, ex));
    require_ok(gradcheck::check({{"a", a}, {"b", b}}, [&] { return gradcheck::probe_sum(sub(a, b), 2); }, ex));
    require_ok(gradcheck::check({{"a", a}, {"b", b}}, [&] { return gradcheck::probe_sum(mul(a, b), 3); }, ex));
  }
  SUBCASE("unary and reductions") {
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(scale(a, 0.7), 4); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(square(a), 5); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return mean(square(a)); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return sum(square(a)); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(mean_lastdim(a), 6); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(gelu(a), 7); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(softmax_lastdim(a), 8); }, ex));
  }
  SUBCASE("matmul forms") {
    require_ok(gradcheck::check({{"a", a}, {"w", w}}, [&] { return gradcheck::probe_sum(matmul(a, w), 9); }, ex));
    require_ok(gradcheck::check({{"a", a}, {"bw", bw}}, [&] { return gradcheck::probe_sum(matmul(a, bw), 10); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(matmul(a, transpose_last2(a)), 11); }, ex));
  }
  SUBCASE("layer norm") {
    require_ok(gradcheck::check({{"a", a}, {"g", g}, {"beta", beta}},
                                [&] { return gradcheck::probe_sum(layer_norm(a, g, beta, 1e-5), 12); }, ex));
  }
  SUBCASE("structural ops") {
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(gather_rows(a, {2, 0, 2}), 13); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(scatter_rows(a, {1, 1, 3}, 5), 14); }, ex));
    require_ok(gradcheck::check({{"a", a}, {"b", b}},
                                [&] { return gradcheck::probe_sum(concat_rows(a, expand_leading(b, 2)), 15); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(reshape(a, {6, 4}), 16); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(merge_heads(split_heads(a, 2)), 17); }, ex));
    require_ok(gradcheck::check({{"a", a}}, [&] { return gradcheck::probe_sum(split_heads(a, 2), 18); }, ex));
    require_ok(gradcheck::check({{"a", a}, {"row", row}},
                                [&] { return gradcheck::probe_sum(replace_row(a, 1, row), 19); }, ex));
    require_ok(gradcheck::check({{"b", b}}, [&] {
      return gradcheck::probe_sum(replace_row(reshape(b, {1, 3, 4}), 2, select_row(reshape(b, {1, 3, 4}), 0)), 20);
    }, ex));
  }
}

TEST_CASE("leaf gradients accumulate until cleared") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  sum(square(x)).backward();
  sum(square(x)).backward();
  CHECK(bridge::values(Tensor::from({2}, std::vector<Scalar>(x.grad().begin(), x.grad().end()))) == oracle::Vec{4, 8});
  x.zero_grad();
  CHECK(x.grad()[0] == 0);
}

TEST_CASE("shared subexpressions receive the sum of both paths") {
  Tensor x = Tensor::from({1}, {3}, true);
  Tensor y = mul(x, x);
  sum(add(y, y)).backward();
  CHECK(x.grad()[0] == doctest::Approx(12));
}

TEST_CASE("no-grad mode records no history") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    y = square(x);
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("backward needs a scalar") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(square(x).backward(), ContractError);
}

TEST_CASE("MAC counter attributes matmuls to the innermost tag") {
  MacCounter counter;
  Tensor a = Tensor::zeros({3, 2, 4});
  Tensor b = Tensor::zeros({4, 5});
  {
    MacTag outer("outer");
    matmul(a, b);
    {
      MacTag inner("x.core");
      matmul(a, b);
    }
  }
  CHECK(counter.counts().at("outer") == 3 * 2 * 4 * 5);
  CHECK(counter.counts().at("x.core") == 3 * 2 * 4 * 5);
  CHECK(counter.total() == 2 * 3 * 2 * 4 * 5);
  CHECK(counter.total_with_suffix(".core") == 3 * 2 * 4 * 5);
}
