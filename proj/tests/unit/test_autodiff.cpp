#include <cmath>
#include <random>

#include <doctest.h>

#include "qreg/autodiff.hpp"
#include "qreg/errors.hpp"
#include "support.hpp"

using namespace qreg;
using qreg::testing::check_gradients;
using qreg::testing::random_tensor;

TEST_CASE("tensor construction and shape checks") {
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.at(1, 2) == 1.5);
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK(Tensor::scalar(4.0).numel() == 1);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);

  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  const std::vector<std::size_t> rows{2, 0};
  CHECK(m.gather_rows(rows) == Tensor::matrix({{5, 6}, {1, 2}}));
  CHECK(m.slice_rows(1, 2) == Tensor::matrix({{3, 4}}));
}

TEST_CASE("matmul values") {
  const Node eye = Node::constant(Tensor::matrix({{1, 0}, {0, 1}}));
  const Node b = Node::constant(Tensor::matrix({{1, 2}, {3, 4}}));
  CHECK(matmul(eye, b).value() == b.value());

  const Node row = Node::constant(Tensor::matrix({{1, 2}}));
  const Node col = Node::constant(Tensor::matrix({{3}, {4}}));
  CHECK(matmul(row, col).value() == Tensor::matrix({{11}}));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Node a = Node::constant(Tensor(Shape{2, 3}));
  const Node b = Node::constant(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(11);
  const auto res = check_gradients([](const auto& in) { return sum(matmul(in[0], in[1])); },
                                   {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  CHECK_MESSAGE(res.max_rel_error < 1e-6, res.worst);
}

TEST_CASE("conv2d values") {
  const Node ones = Node::constant(Tensor(Shape{1, 1, 3, 3}, 1.0));
  CHECK(conv2d(ones, ones).value() == Tensor(Shape{1, 1, 1, 1}, 9.0));

  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 1, 4, 5}, rng);
  Tensor delta(Shape{1, 1, 3, 3});
  delta[4] = 1.0;
  const Node y = conv2d(Node::constant(x), Node::constant(delta), 1, 1);
  CHECK(bitwise_equal(y.value(), x));

  const Node strided = conv2d(Node::constant(Tensor(Shape{1, 2, 7, 6})),
                              Node::constant(Tensor(Shape{3, 2, 3, 3})), 2, 1);
  CHECK(strided.shape() == Shape{1, 3, 4, 3});

  CHECK_THROWS_AS(conv2d(Node::constant(Tensor(Shape{1, 1, 2, 2})),
                         Node::constant(Tensor(Shape{1, 1, 3, 3}))),
                  DimensionError);
  CHECK_THROWS_AS(conv2d(Node::constant(Tensor(Shape{1, 2, 4, 4})),
                         Node::constant(Tensor(Shape{1, 1, 3, 3}))),
                  DimensionError);
}

TEST_CASE("conv2d gradient matches finite differences") {
  std::mt19937_64 rng(5);
  for (std::size_t stride : {1, 2}) {
    const auto res = check_gradients(
        [stride](const auto& in) {
          const Node y = conv2d(in[0], in[1], stride, 1);
          return sum(mul(y, y));
        },
        {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng)});
    CHECK_MESSAGE(res.max_rel_error < 1e-5, res.worst);
  }
}

TEST_CASE("elementwise values") {
  const Node x = Node::constant(Tensor::vector({-1, 0, 2}));
  CHECK(relu(x).value() == Tensor::vector({0, 0, 2}));
  CHECK(sigmoid(Node::constant(Tensor::scalar(0))).value()[0] == 0.5);
  CHECK(clamp(x, -0.5, 1.0).value() == Tensor::vector({-0.5, 0, 1}));
  CHECK_THROWS_AS(log(x), DomainError);
  CHECK_THROWS_AS(log(Node::constant(Tensor::vector({1, 0}))), DomainError);
  CHECK_THROWS_AS(add(Node::constant(Tensor(Shape{2, 3})), Node::constant(Tensor(Shape{2}))),
                  DimensionError);

  const Node m = Node::constant(Tensor::matrix({{1, 2}, {3, 4}}));
  const Node b = Node::constant(Tensor::vector({10, 20}));
  CHECK(add(m, b).value() == Tensor::matrix({{11, 22}, {13, 24}}));
  CHECK(sub(b, m).value() == Tensor::matrix({{9, 18}, {7, 16}}));
}

TEST_CASE("sigmoid is stable for large magnitudes") {
  const Node s = sigmoid(Node::constant(Tensor::vector({-800, 800})));
  CHECK(s.value()[0] == 0.0);
  CHECK(s.value()[1] == 1.0);
}

TEST_CASE("relu gradient is zero at zero") {
  const Node x = Node::leaf(Tensor::vector({-1, 0, 2}), true);
  backward(sum(relu(x)));
  CHECK(x.grad() == Tensor::vector({0, 0, 1}));
}

TEST_CASE("elementwise gradients match finite differences") {
  std::mt19937_64 rng(17);
  using Fn = std::function<Node(const std::vector<Node>&)>;
  const std::vector<std::pair<const char*, Fn>> ops = {
      {"add", [](const auto& in) { return sum(mul(add(in[0], in[1]), in[0])); }},
      {"sub", [](const auto& in) { return sum(mul(sub(in[0], in[1]), in[1])); }},
      {"mul", [](const auto& in) { return sum(mul(in[0], in[1])); }},
      {"broadcast", [](const auto& in) {
         return sum(mul(add(in[0], reshape(in[1], {1, 4})), in[0]));
       }},
      {"scale", [](const auto& in) { return sum(mul(scale(in[0], -1.5), in[1])); }},
      {"sigmoid", [](const auto& in) { return sum(mul(sigmoid(in[0]), in[1])); }},
      {"exp", [](const auto& in) { return sum(mul(exp(in[0]), in[1])); }},
      {"log", [](const auto& in) { return sum(mul(log(exp(in[0])), in[1])); }},
      {"mean", [](const auto& in) { return mean(mul(in[0], in[1])); }},
      {"transpose", [](const auto& in) { return sum(matmul(transpose(in[0]), in[1])); }},
  };
  for (const auto& [name, fn] : ops) {
    const std::string op = name;
    const Shape second = op == "broadcast" ? Shape{4} : op == "transpose" ? Shape{3, 2} : Shape{3, 4};
    const auto res = check_gradients(fn, {random_tensor({3, 4}, rng), random_tensor(second, rng)});
    CHECK_MESSAGE(res.max_rel_error < 1e-6, name, " ", res.worst);
  }

  // relu and clamp have kinks; keep samples away from them.
  auto away = [&](Shape s) {
    Tensor t = random_tensor(s, rng);
    for (auto& v : t.storage()) {
      if (std::abs(v) < 0.05) v += 0.1;
      if (std::abs(std::abs(v) - 1.0) < 0.05) v += 0.1;
    }
    return t;
  };
  const auto r = check_gradients([](const auto& in) { return sum(mul(relu(in[0]), in[1])); },
                                 {away({3, 4}), random_tensor({3, 4}, rng)});
  CHECK(r.max_rel_error < 1e-6);
  const auto c = check_gradients([](const auto& in) { return sum(mul(clamp(in[0], -1, 1), in[1])); },
                                 {away({3, 4}), random_tensor({3, 4}, rng)});
  CHECK(c.max_rel_error < 1e-6);
}

TEST_CASE("linear with bias gradient") {
  std::mt19937_64 rng(23);
  const auto res = check_gradients(
      [](const auto& in) {
        const Node y = linear(in[0], in[1], &in[2]);
        return sum(mul(y, y));
      },
      {random_tensor({5, 3}, rng), random_tensor({4, 3}, rng), random_tensor({4}, rng)});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("custom_grad passes the upstream gradient unchanged") {
  auto rounding = [](const Tensor& t) {
    Tensor out = t;
    for (auto& v : out.storage()) v = std::round(v);
    return out;
  };
  const Node x = Node::leaf(Tensor::vector({0.4, 0.6}), true);
  const Node y = custom_grad(x, rounding);
  CHECK(y.value() == Tensor::vector({0, 1}));
  backward(sum(y));
  CHECK(x.grad() == Tensor::vector({1, 1}));

  const Node z = Node::leaf(Tensor::vector({1.7, -2.2}), true);
  const Node up = Node::constant(Tensor::vector({0.3, -2}));
  auto flooring = [](const Tensor& t) {
    Tensor out = t;
    for (auto& v : out.storage()) v = std::floor(v);
    return out;
  };
  backward(sum(mul(custom_grad(z, flooring), up)));
  CHECK(bitwise_equal(z.grad(), up.value()));

  const Node w = Node::leaf(Tensor::vector({3, 4}), true);
  const Node id = custom_grad(w, [](const Tensor& t) { return t; });
  CHECK(bitwise_equal(id.value(), w.value()));

  CHECK_THROWS_AS(custom_grad(w, [](const Tensor&) { return Tensor(Shape{3}); }), DimensionError);
}

TEST_CASE("custom_grad output gradient is bitwise the upstream gradient") {
  std::mt19937_64 rng(29);
  const Node x = Node::leaf(random_tensor({4, 5}, rng), true);
  const Tensor g = random_tensor({4, 5}, rng);
  const Node y = custom_grad(x, [](const Tensor& t) { return t; });
  backward(sum(mul(y, Node::constant(g))));
  CHECK(bitwise_equal(x.grad(), g));
}

TEST_CASE("backward basics") {
  const Node w = Node::leaf(Tensor(Shape{2, 3}, 0.7), true);
  backward(sum(w));
  CHECK(w.grad() == Tensor(Shape{2, 3}, 1.0));

  const Node v = Node::leaf(Tensor::vector({1, -2}), true);
  backward(sum(mul(v, v)));
  CHECK(v.grad() == Tensor::vector({2, -4}));

  CHECK_THROWS_AS(backward(v), ContractError);
  backward(reshape(sum(v), {1}));
}

TEST_CASE("diamond graph accumulates both paths") {
  std::mt19937_64 rng(31);
  const auto res = check_gradients(
      [](const auto& in) {
        const Node a = sigmoid(in[0]);
        const Node left = mul(a, in[1]);
        const Node right = exp(scale(a, 0.5));
        return sum(add(left, right));
      },
      {random_tensor({3, 3}, rng), random_tensor({3, 3}, rng)});
  CHECK(res.max_rel_error < 1e-6);

  const Node x = Node::leaf(Tensor::scalar(3.0), true);
  backward(add(x, x));
  CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("nodes without requires_grad receive no gradient") {
  const Node c = Node::constant(Tensor::vector({1, 2}));
  const Node w = Node::leaf(Tensor::vector({3, 4}), true);
  backward(sum(mul(c, w)));
  CHECK_FALSE(c.has_grad());
  CHECK(w.grad() == Tensor::vector({1, 2}));
}
