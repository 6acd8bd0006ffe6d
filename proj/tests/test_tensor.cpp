#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "mutab/rng.hpp"
#include "mutab/tensor.hpp"

using namespace mutab;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul identity and projector") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.data()[i] == doctest::Approx(m.data()[i]));

  Tensor proj = Tensor::from({2, 2}, {1, 0, 0, 0});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor p = matmul(proj, b);
  CHECK(p.at(0, 0) == 5);
  CHECK(p.at(0, 1) == 6);
  CHECK(p.at(1, 0) == 0);
  CHECK(p.at(1, 1) == 0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
  try {
    matmul(a, b);
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match central finite differences") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor w = random_tensor({3, 2}, rng);  // weighting makes the gradient non-uniform

  double err_a = grad_check([&](Tensor& x) { return sum(mul(matmul(x, b), w)); }, a);
  CHECK(err_a < 1e-6);
  double err_b = grad_check([&](Tensor& x) { return sum(mul(matmul(a, x), w)); }, b);
  CHECK(err_b < 1e-6);
}

TEST_CASE("softmax basics") {
  Tensor u = softmax(Tensor::from({2}, {0, 0}), 0);
  CHECK(u.at(0) == doctest::Approx(0.5));
  CHECK(u.at(1) == doctest::Approx(0.5));

  Tensor m = softmax(Tensor::from({2}, {0, -kInf}), 0);
  CHECK(m.at(0) == 1.0);
  CHECK(m.at(1) == 0.0);  // masked entries are exactly zero

  // Independent direct evaluation of exp / sum(exp).
  Tensor s = softmax(Tensor::from({3}, {1, 2, 3}), 0);
  double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(s.at(i) == doctest::Approx(std::exp(1.0 + i) / denom).epsilon(1e-12));
  CHECK(s.at(0) == doctest::Approx(0.09003057).epsilon(1e-7));
  CHECK(s.at(1) == doctest::Approx(0.24472847).epsilon(1e-7));
  CHECK(s.at(2) == doctest::Approx(0.66524096).epsilon(1e-7));
}

TEST_CASE("softmax rows sum to one and degenerate rows throw") {
  Rng rng(11);
  Tensor x = random_tensor({5, 7}, rng, -4, 4);
  x.data()[3] = -kInf;
  x.data()[10] = -kInf;
  Tensor y = softmax(x, 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += y.at(r, c);
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
  CHECK(y.data()[3] == 0.0);
  CHECK(y.data()[10] == 0.0);

  Tensor bad = Tensor::from({1, 2}, {-kInf, -kInf});
  CHECK_THROWS_AS(softmax(bad, 1), std::invalid_argument);
}

TEST_CASE("softmax along axis 0") {
  Tensor x = Tensor::from({2, 2}, {0, 1, 0, 3});
  Tensor y = softmax(x, 0);
  CHECK(y.at(0, 0) == doctest::Approx(0.5));
  CHECK(y.at(1, 0) == doctest::Approx(0.5));
  double d = std::exp(1.0) + std::exp(3.0);
  CHECK(y.at(0, 1) == doctest::Approx(std::exp(1.0) / d));
  CHECK(y.at(1, 1) == doctest::Approx(std::exp(3.0) / d));
}

TEST_CASE("layer_norm examples") {
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});

  Tensor c = layer_norm(Tensor::full({4}, 3.25), gain, bias, 1e-5);
  for (auto v : c.data()) CHECK(v == doctest::Approx(0.0));

  Tensor g2 = Tensor::full({2}, 1.0), b2 = Tensor::zeros({2});
  Tensor n = layer_norm(Tensor::from({2}, {1, -1}), g2, b2, 1e-12);
  CHECK(n.at(0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(n.at(1) == doctest::Approx(-1.0).epsilon(1e-6));

  Rng rng(3);
  Tensor x = random_tensor({4}, rng, -2, 2);
  Tensor y = layer_norm(x, gain, bias, 1e-10);
  double m = 0, v = 0;
  for (auto e : y.data()) m += e;
  m /= 4;
  for (auto e : y.data()) v += (e - m) * (e - m);
  v /= 4;
  CHECK(std::fabs(m) < 1e-12);
  CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("backward fills gradients and accumulates") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
  backward(sum(x));
  for (auto g : x.grad()) CHECK(g == 1.0);

  // repeated call on a fresh graph accumulates
  backward(sum(x));
  for (auto g : x.grad()) CHECK(g == 2.0);
  x.zero_grad();

  Tensor z = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  backward(sum(mul(z, z)));
  CHECK(z.grad()[0] == doctest::Approx(2.0));
  CHECK(z.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  CHECK_THROWS_AS(backward(mul(x, x)), std::invalid_argument);
}

TEST_CASE("composite graph matches finite differences") {
  Rng rng(42);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 3}, rng);
  auto f = [&](Tensor& x) {
    Tensor s = softmax(matmul(x, b), 1);
    // negative log of the diagonal, a small classification-style loss
    Tensor picked = mul(s, Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    return scale(sum(mul(picked, picked)), -1.0);
  };
  CHECK(grad_check(f, a) < 1e-5);
}

TEST_CASE("shared subexpression equals sum of path gradients") {
  Rng rng(9);
  Tensor zdata = random_tensor({3}, rng);
  Tensor a = random_tensor({3}, rng);
  Tensor b = random_tensor({3}, rng);

  // shared: z used through two paths
  Tensor z1 = zdata.detach().set_requires_grad(true);
  backward(add(sum(mul(z1, a)), sum(mul(z1, b))));

  // duplicated subgraph: two independent copies, gradients summed by hand
  Tensor z2 = zdata.detach().set_requires_grad(true);
  Tensor z3 = zdata.detach().set_requires_grad(true);
  backward(sum(mul(z2, a)));
  backward(sum(mul(z3, b)));

  for (std::size_t i = 0; i < 3; ++i)
    CHECK(z1.grad()[i] == doctest::Approx(z2.grad()[i] + z3.grad()[i]).epsilon(1e-14));
}

TEST_CASE("grad_check on sum is exact up to float noise") {
  Rng rng(5);
  Tensor x = random_tensor({4, 2}, rng);
  CHECK(grad_check([](Tensor& t) { return sum(t); }, x) < 1e-9);
}

TEST_CASE("grad_check on layer_norm composite") {
  Rng rng(6);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor gain = random_tensor({5}, rng, 0.5, 1.5);
  Tensor bias = random_tensor({5}, rng, -0.2, 0.2);
  Tensor w = random_tensor({3, 5}, rng);
  auto f = [&](Tensor& t) { return sum(mul(layer_norm(t, gain, bias), w)); };
  CHECK(grad_check(f, x) < 1e-4);
  CHECK(grad_check([&](Tensor&) { return sum(layer_norm(x, gain, bias)); }, gain) < 1e-4);
}

TEST_CASE("elementwise op gradients") {
  Rng rng(13);
  Tensor x = random_tensor({4, 3}, rng, -2, 2);
  Tensor c = random_tensor({4, 3}, rng);
  CHECK(grad_check([&](Tensor& t) { return sum(mul(relu(t), c)); }, x) < 1e-4);
  CHECK(grad_check([&](Tensor& t) { return sum(mul(sigmoid(t), c)); }, x) < 1e-6);
  CHECK(grad_check([&](Tensor& t) { return sum(mul(absolute(t), c)); }, x) < 1e-6);
  Tensor xd = x.detach();
  CHECK(grad_check([&](Tensor& t) { return sum(mul(sub(t, c), xd)); }, x) < 1e-6);
  Tensor v = random_tensor({3}, rng);
  CHECK(grad_check([&](Tensor& t) { return sum(mul(add_rowvec(x, t), c)); }, v) < 1e-6);
  CHECK(grad_check([&](Tensor& t) { return sum(mul(transpose(t), transpose(c))); }, x) < 1e-6);
  CHECK(grad_check([&](Tensor& t) { return mean(mul(t, c)); }, x) < 1e-6);
}

TEST_CASE("embedding gathers rows and scatters gradients") {
  Tensor table = Tensor::from({3, 2}, {0, 1, 10, 11, 20, 21}).set_requires_grad(true);
  Tensor e = embedding(table, {2, 0, 2});
  CHECK(e.at(0, 0) == 20);
  CHECK(e.at(2, 1) == 21);
  backward(sum(e));
  CHECK(table.grad()[0] == 1.0);
  CHECK(table.grad()[2] == 0.0);  // row 1 unused
  CHECK(table.grad()[4] == 2.0);  // row 2 used twice
  CHECK_THROWS_AS(embedding(table, {3}), std::invalid_argument);
}

TEST_CASE("concat_cols splits gradients") {
  Rng rng(21);
  Tensor a = random_tensor({2, 2}, rng);
  Tensor b = random_tensor({2, 3}, rng);
  Tensor w = random_tensor({2, 5}, rng);
  CHECK(grad_check([&](Tensor& t) { return sum(mul(concat_cols({t, b}), w)); }, a) < 1e-6);
  CHECK(grad_check([&](Tensor& t) { return sum(mul(concat_cols({a, t}), w)); }, b) < 1e-6);
}

TEST_CASE("reshape keeps data and routes gradients") {
  Rng rng(22);
  Tensor x = random_tensor({2, 6}, rng);
  Tensor w = random_tensor({3, 4}, rng);
  CHECK(grad_check([&](Tensor& t) { return sum(mul(reshape(t, {3, 4}), w)); }, x) < 1e-6);
  CHECK_THROWS_AS(reshape(x, {5, 2}), std::invalid_argument);
}

TEST_CASE("detach blocks gradient flow") {
  Tensor x = Tensor::from({2}, {3, 4}).set_requires_grad(true);
  Tensor d = x.detach();
  CHECK_FALSE(d.requires_grad());
  backward(sum(mul(d, d)));  // no-op for x
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("no-grad mode records no graph") {
  Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  NoGradGuard ng;
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.impl()->node == nullptr);
}

TEST_CASE("tensor blob round trip") {
  namespace fs = std::filesystem;
  Rng rng(33);
  Tensor t = random_tensor({2, 3, 4}, rng);
  fs::path p = fs::temp_directory_path() / "mutab_blob_test.bin";
  save_tensor_blob(p.string(), t);
  Tensor r = load_tensor_blob(p.string());
  CHECK(r.shape() == t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(r.data()[i] == t.data()[i]);
  fs::remove(p);
}

TEST_CASE("grad_check flags non-finite outputs") {
  Tensor x = Tensor::from({1}, {0.0});
  auto f = [](Tensor& t) {
    return scale(sum(mul(t, t)), std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(grad_check(f, x), std::runtime_error);
}
