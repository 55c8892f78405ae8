#include <doctest.h>

#include <cmath>
#include <random>

#include "hetmp/ops.hpp"
#include "support.hpp"

using namespace hetmp;
using test::fd_worst_rel_error;
using test::probe;
using test::random_tensor;
using Inputs = std::vector<Tensor<double>>;

namespace {

Tensor<double> make(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
  Tensor<double> t(r, c, std::move(v));
  t.set_requires_grad(grad);
  return t;
}

void check_close(std::span<const double> got, std::vector<double> want, double tol = 1e-12) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("elementwise and structural examples") {
  auto x = make(2, 2, {1, 2, 3, 4});
  auto eye = make(2, 2, {1, 0, 0, 1});
  check_close(matmul(eye, x).values(), {1, 2, 3, 4});
  check_close(relu(make(1, 2, {-1, 2})).values(), {0, 2});
  for (std::uint64_t seed : {0ULL, 7ULL, 12345ULL})
    check_close(dropout(x, 0.0, seed, true).values(), {1, 2, 3, 4});
  check_close(dropout(x, 0.5, 3, false).values(), {1, 2, 3, 4});
  check_close(concat_cols(x, eye).values(), {1, 2, 1, 0, 3, 4, 0, 1});
  std::vector<std::uint32_t> rows{1, 1, 0};
  check_close(select_rows(x, rows).values(), {3, 4, 3, 4, 1, 2});
  check_close(mul_scalar(x, 2.0).values(), {2, 4, 6, 8});
  CHECK_THROWS_AS(matmul(x, make(3, 1, {1, 2, 3})), DimensionError);
  CHECK_THROWS_AS(add(x, make(1, 2, {1, 2})), DimensionError);
  CHECK_THROWS_AS(dropout(x, 1.0, 1, true), std::invalid_argument);
  CHECK_THROWS_AS(dropout(x, -0.1, 1, true), std::invalid_argument);
}

TEST_CASE("dropout keeps survivors scaled and is seeded") {
  Tensor<double> x(50, 40, 1.0);
  auto a = dropout(x, 0.25, 42, true);
  auto b = dropout(x, 0.25, 42, true);
  auto c = dropout(x, 0.25, 43, true);
  std::size_t zeros = 0;
  for (double v : a.values()) {
    CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
    zeros += v == 0.0;
  }
  CHECK(zeros > 400);
  CHECK(zeros < 600);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  CHECK_FALSE(std::equal(a.values().begin(), a.values().end(), c.values().begin()));
}

TEST_CASE("l2norm_rows examples") {
  check_close(l2norm_rows(make(1, 2, {3, 4})).values(), {0.6, 0.8});
  check_close(l2norm_rows(make(1, 3, {0, 1, 0})).values(), {0, 1, 0});
  check_close(l2norm_rows(make(1, 2, {0, 0}), 1e-12).values(), {0, 0});
  std::mt19937_64 gen(1);
  auto x = random_tensor(20, 5, gen);
  auto y = l2norm_rows(x);
  for (std::size_t i = 0; i < 20; ++i) {
    double n = 0;
    for (std::size_t j = 0; j < 5; ++j) n += y(i, j) * y(i, j);
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layernorm examples and moments") {
  auto g1 = make(1, 2, {1, 1});
  auto b0 = make(1, 2, {0, 0});
  auto y = layernorm(make(1, 2, {1, 3}), g1, b0, 0.0);
  check_close(y.values(), {-1, 1});
  auto beta = make(1, 3, {0.5, -2, 7});
  auto c = layernorm(make(1, 3, {4, 4, 4}), make(1, 3, {1, 1, 1}), beta);
  check_close(c.values(), {0.5, -2, 7});
  auto z = layernorm(make(2, 3, {1, 5, -2, 0, 3, 3}), make(1, 3, {0, 0, 0}), beta);
  check_close(z.values(), {0.5, -2, 7, 0.5, -2, 7});

  std::mt19937_64 gen(5);
  auto x = random_tensor(10, 16, gen);
  auto out = layernorm(x, Tensor<double>(1, 16, 1.0), Tensor<double>(1, 16, 0.0));
  for (std::size_t i = 0; i < 10; ++i) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 16; ++j) mean += out(i, j);
    mean /= 16;
    for (std::size_t j = 0; j < 16; ++j) var += (out(i, j) - mean) * (out(i, j) - mean);
    var /= 16;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("msgnorm examples") {
  check_close(msgnorm(make(1, 2, {3, 4}), make(1, 2, {1, 0}), Tensor<double>::scalar(1)).values(),
              {0.6, 0.8});
  check_close(msgnorm(make(1, 2, {3, 4}), make(1, 2, {0, 0}), Tensor<double>::scalar(1)).values(),
              {0, 0});
  check_close(msgnorm(make(1, 2, {3, 4}), make(1, 2, {5, 1}), Tensor<double>::scalar(0)).values(),
              {0, 0});
  check_close(msgnorm(make(1, 2, {0, 2}), make(1, 2, {3, 4}), Tensor<double>::scalar(2)).values(),
              {0, 10});
}

TEST_CASE("normalize_sum examples and fallback") {
  auto a = normalize_sum(std::vector<double>{1, 3});
  CHECK(a[0] == 0.25);
  CHECK(a[1] == 0.75);
  CHECK(normalize_sum(std::vector<double>{-0.4})[0] == 1.0);
  auto f = normalize_sum(std::vector<double>{1, -1});
  CHECK(f[0] == 0.5);
  CHECK(f[1] == 0.5);

  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> d(-1, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> e(1 + trial % 7);
    for (auto& v : e) v = d(gen);
    if (trial % 5 == 0) {  // force a cancelling sum
      double s = 0;
      for (std::size_t i = 0; i + 1 < e.size(); ++i) s += e[i];
      e.back() = -s;
    }
    double total = 0;
    for (double w : normalize_sum(e)) total += w;
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("normalize_segments matches normalize_sum per segment") {
  auto e = make(5, 1, {1, 3, 2, -2, 0.5});
  std::vector<std::uint32_t> seg{0, 0, 1, 1, 2};
  auto w = normalize_segments(e, seg, 4, CoefficientMode::kSumNormalize);
  check_close(w.values(), {0.25, 0.75, 0.5, 0.5, 1.0});
  auto s = normalize_segments(e, seg, 4, CoefficientMode::kSoftmax);
  const double z = std::exp(1.0) + std::exp(3.0);
  check_close(s.values(), {std::exp(1.0) / z, std::exp(3.0) / z, std::exp(4.0) / (std::exp(4.0) + 1),
                           1 / (std::exp(4.0) + 1), 1.0});
}

TEST_CASE("cross_entropy examples") {
  std::vector<std::int32_t> t{2};
  CHECK(cross_entropy(make(1, 4, {0, 0, 0, 0}), t).item() == doctest::Approx(std::log(4.0)));
  CHECK(cross_entropy(make(1, 4, {0, 0, 1e4, 0}), t).item() <= 1e-12);
  std::vector<std::int32_t> two{0, 3};
  auto logits = make(2, 4, std::vector<double>(8, 0.0), true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(cross_entropy(logits, two));
  }
  // (1/N)(softmax - onehot) with N = 2
  check_close(logits.grad(), {-0.375, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, -0.375});
  std::vector<std::int32_t> bad{4};
  CHECK_THROWS(cross_entropy(make(1, 4, {0, 0, 0, 0}), bad));
}

TEST_CASE("backward examples") {
  std::mt19937_64 gen(3);
  auto w = random_tensor(2, 3, gen);
  auto x = random_tensor(3, 1, gen, -1, 1, false);
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(sum_all(matmul(w, x)));
  }
  // d sum(Wx) / dW_ij = x_j
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(w.grad()[i * 3 + j] == doctest::Approx(x(j, 0)));

  auto v = random_tensor(4, 6, gen);
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto y = l2norm_rows(v);
    tape.backward(sum_all(mul(y, y)));
  }
  for (std::size_t i = 0; i < 4; ++i) {
    double dot = 0;
    for (std::size_t j = 0; j < 6; ++j) dot += v.grad()[i * 6 + j] * v(i, j);
    CHECK(std::abs(dot) <= 1e-10);
  }
  CHECK(fd_worst_rel_error({v}, [](const Inputs& in) {
          auto y = l2norm_rows(in[0]);
          return sum_all(mul(y, y));
        }) <= 1e-4);

  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  CHECK_THROWS_AS(tape.backward(add(v, v)), DimensionError);
}

TEST_CASE("gradients accumulate across backward calls on leaves") {
  std::mt19937_64 gen(4);
  auto w = random_tensor(2, 2, gen);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto loss = sum_all(mul_scalar(w, 3.0));
  tape.backward(loss);
  tape.backward(loss);
  for (double g : w.grad()) CHECK(g == 6.0);
}

TEST_CASE("finite differences agree with every differentiable op") {
  std::mt19937_64 gen(2024);
  auto a = random_tensor(3, 3, gen);
  auto b = random_tensor(3, 3, gen);
  auto c = random_tensor(3, 4, gen);
  auto wide = random_tensor(4, 3, gen);
  auto s = random_tensor(1, 1, gen, 0.5, 1.5);
  auto col = random_tensor(3, 1, gen);
  auto gamma = random_tensor(1, 3, gen);
  auto beta = random_tensor(1, 3, gen);
  const std::vector<std::uint32_t> src{0, 2, 2, 1};
  const std::vector<std::uint32_t> dst{0, 0, 1, 1};
  const std::vector<std::uint32_t> seg{0, 0, 1};
  const std::vector<std::int32_t> targets{2, 0, 1};

  using Fn = std::function<Tensor<double>(const Inputs&)>;
  const std::vector<std::pair<std::string, std::pair<Inputs, Fn>>> cases = {
      {"matmul", {{a, b}, [](const Inputs& i) { return probe(matmul(i[0], i[1])); }}},
      {"linear", {{a, wide}, [](const Inputs& i) { return probe(linear(i[0], i[1])); }}},
      {"add", {{a, b}, [](const Inputs& i) { return probe(add(i[0], i[1])); }}},
      {"mul", {{a, b}, [](const Inputs& i) { return probe(mul(i[0], i[1])); }}},
      {"scale", {{a, s}, [](const Inputs& i) { return probe(scale(i[0], i[1])); }}},
      {"row_scale", {{a, col}, [](const Inputs& i) { return probe(row_scale(i[0], i[1])); }}},
      {"concat", {{a, c}, [](const Inputs& i) { return probe(concat_cols(i[0], i[1])); }}},
      {"concat_rows",
       {{a, b}, [](const Inputs& i) { return probe(concat_rows<double>(i)); }}},
      {"relu", {{a}, [](const Inputs& i) { return probe(relu(i[0])); }}},
      {"select", {{a}, [&](const Inputs& i) { return probe(select_rows(i[0], src)); }}},
      {"scatter", {{c}, [&](const Inputs& i) { return probe(scatter_add_rows(slice_rows(i[0], 0, 3), seg, 2)); }}},
      {"segment_mean", {{a}, [&](const Inputs& i) { return probe(segment_mean(i[0], src, dst, 3)); }}},
      {"mean_rows", {{a}, [](const Inputs& i) { return probe(mean_rows(i[0])); }}},
      {"row_norms", {{a}, [](const Inputs& i) { return probe(row_norms(i[0])); }}},
      {"rowwise_dot", {{a, b}, [](const Inputs& i) { return probe(rowwise_dot(i[0], i[1])); }}},
      {"l2norm", {{a}, [](const Inputs& i) { return probe(l2norm_rows(i[0])); }}},
      {"layernorm",
       {{a, gamma, beta},
        [](const Inputs& i) { return probe(layernorm(i[0], i[1], i[2])); }}},
      {"msgnorm",
       {{a, b, s}, [](const Inputs& i) { return probe(msgnorm(i[0], i[1], i[2])); }}},
      {"normalize_sum",
       {{col}, [&](const Inputs& i) {
          auto shifted = add(i[0], Tensor<double>(3, 1, 2.0));
          return probe(normalize_segments(shifted, seg, 2, CoefficientMode::kSumNormalize));
        }}},
      {"softmax",
       {{col}, [&](const Inputs& i) {
          return probe(normalize_segments(i[0], seg, 2, CoefficientMode::kSoftmax));
        }}},
      {"cross_entropy",
       {{a}, [&](const Inputs& i) { return cross_entropy(i[0], targets); }}},
      {"composite",
       {{a, b, gamma, beta, s},
        [](const Inputs& i) {
          auto h = relu(matmul(layernorm(i[0], i[2], i[3]), i[1]));
          auto m = msgnorm(l2norm_rows(h), matmul(i[0], i[1]), i[4]);
          return probe(concat_cols(m, h));
        }}},
  };
  for (const auto& [name, spec] : cases) {
    CAPTURE(name);
    CHECK(fd_worst_rel_error(spec.first, spec.second) <= 1e-4);
  }
}

TEST_CASE("random 3x3 composite of all ops passes the finite-difference check") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 gen(seed);
    Inputs in{random_tensor(3, 3, gen), random_tensor(3, 3, gen), random_tensor(1, 3, gen),
              random_tensor(1, 3, gen), random_tensor(1, 1, gen)};
    const std::vector<std::uint32_t> seg{0, 1, 1};
    const std::vector<std::int32_t> y{0, 1, 2};
    auto fn = [&](const Inputs& i) {
      auto h = relu(add(matmul(i[0], i[1]), mul_scalar(i[0], 0.5)));
      auto n = layernorm(l2norm_rows(h), i[2], i[3]);
      auto m = msgnorm(n, i[0], i[4]);
      auto w = normalize_segments(row_norms(i[1]), seg, 2, CoefficientMode::kSumNormalize);
      auto mixed = row_scale(m, w);
      return add(cross_entropy(mixed, y), sum_all(mul(mean_rows(mixed), i[2])));
    };
    CAPTURE(seed);
    CHECK(fd_worst_rel_error(in, fn) <= 1e-4);
  }
}

TEST_CASE("backward is bit-deterministic") {
  auto run = [] {
    std::mt19937_64 gen(77);
    auto w = random_tensor(8, 8, gen);
    auto x = random_tensor(8, 8, gen, -1, 1, false);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto y = layernorm(l2norm_rows(matmul(x, w)), Tensor<double>(1, 8, 1.0),
                       Tensor<double>(1, 8, 0.0));
    tape.backward(probe(y));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  CHECK(run() == run());
}

TEST_CASE("checked mode rejects non-finite outputs") {
  set_checked_mode(true);
  auto x = make(1, 2, {std::nan(""), 1});
  CHECK_THROWS_AS(add(x, x), NumericError);
  set_checked_mode(false);
  CHECK_NOTHROW(add(x, x));
}

TEST_CASE("corrupted backward hook is detected") {
  std::mt19937_64 gen(8);
  Inputs in{random_tensor(3, 3, gen)};
  auto fn = [](const Inputs& i) { return probe(l2norm_rows(i[0])); };
  testing::set_corrupt_backward(true);
  const double bad = fd_worst_rel_error(in, fn);
  testing::set_corrupt_backward(false);
  CHECK(bad > 1e-2);
  CHECK(fd_worst_rel_error(in, fn) <= 1e-4);
}
