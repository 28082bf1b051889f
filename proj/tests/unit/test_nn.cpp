#include <cmath>
#include <fstream>
#include <random>

#include <doctest.h>

#include "qreg/errors.hpp"
#include "qreg/nn.hpp"
#include "qreg/qat.hpp"
#include "support.hpp"

using namespace qreg;
using qreg::testing::check_gradients;
using qreg::testing::random_tensor;
using qreg::testing::scratch_dir;

namespace {

Model identity_dense(std::size_t d) {
  Model m({d}, HeadKind::softmax, d);
  std::mt19937_64 rng(0);
  Layer l = make_dense("dense0", d, d, rng);
  Tensor eye(Shape{d, d});
  for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1.0;
  l.weight.mutable_value() = eye;
  l.bias.mutable_value().fill(0.0);
  m.layers().push_back(l);
  return m;
}

// Normalized rows summing to one.
Tensor random_targets(std::size_t n, std::size_t c, std::mt19937_64& rng) {
  Tensor t = random_tensor({n, c}, rng, 0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += t.at(i, j);
    for (std::size_t j = 0; j < c; ++j) t.at(i, j) /= s;
  }
  return t;
}

}  // namespace

TEST_CASE("identity network returns its input") {
  Model m = identity_dense(4);
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({3, 4}, rng);
  ForwardContext ctx;
  CHECK(m.forward(x, ctx).value() == x);
  CHECK_THROWS_AS(m.forward(random_tensor({3, 5}, rng), ctx), DimensionError);
}

TEST_CASE("eval forward is deterministic and train dropout depends on the mask seed") {
  Model m = make_mlp_small(12, 3, HeadKind::softmax, 7, 0.3);
  std::mt19937_64 data(2);
  const Tensor x = random_tensor({8, 12}, data);
  ForwardContext eval;
  CHECK(bitwise_equal(m.forward(x, eval).value(), m.forward(x, eval).value()));

  std::mt19937_64 r1(100), r2(200);
  ForwardContext t1{true, &r1}, t2{true, &r2};
  CHECK_FALSE(bitwise_equal(m.forward(x, t1).value(), m.forward(x, t2).value()));
}

TEST_CASE("mlp-small preset shape") {
  const Model m = make_mlp_small(784, 10, HeadKind::softmax, 1);
  const auto shapes = m.layer_output_shapes();
  CHECK(shapes.back() == Shape{10});
  CHECK(m.parameter_count() == 784 * 256 + 256 + 256 * 128 + 128 + 128 * 10 + 10);
}

TEST_CASE("cnn-small preset runs forward") {
  Model m = make_cnn_small({1, 8, 8}, 4, HeadKind::softmax, 3);
  std::mt19937_64 rng(4), drop(5);
  ForwardContext ctx{true, &drop};
  const Node y = m.forward(random_tensor({3, 1, 8, 8}, rng), ctx);
  CHECK(y.shape() == Shape{3, 4});
}

TEST_CASE("batchnorm normalizes and collapses") {
  // Columns with mean 0 and biased variance 1.
  const Tensor x = Tensor::matrix({{1, -1}, {-1, 1}, {1, 1}, {-1, -1}});
  Tensor rm(Shape{2}), rv(Shape{2}, 1.0);
  const Node g = Node::constant(Tensor(Shape{2}, 1.0));
  const Node b = Node::constant(Tensor(Shape{2}, 0.0));
  const Node y = batchnorm_forward(Node::constant(x), g, b, rm, rv, 0.9, 1e-5, true);
  CHECK(max_abs_diff(y.value(), x) < 1e-5);

  const Node g0 = Node::constant(Tensor(Shape{2}, 0.0));
  const Node b5 = Node::constant(Tensor(Shape{2}, 5.0));
  const Node z = batchnorm_forward(Node::constant(x), g0, b5, rm, rv, 0.9, 1e-5, true);
  CHECK(z.value() == Tensor(Shape{4, 2}, 5.0));

  CHECK_THROWS_AS(batchnorm_forward(Node::constant(Tensor(Shape{1, 2})), g, b, rm, rv, 0.9, 1e-5, true),
                  ContractError);
}

TEST_CASE("batchnorm running statistics follow the EMA of batch statistics") {
  std::mt19937_64 rng(8);
  const double momentum = 0.9;
  Tensor rm(Shape{3}), rv(Shape{3}, 1.0);
  std::vector<double> mean_oracle(3, 0.0), var_oracle(3, 1.0);
  const Node g = Node::constant(Tensor(Shape{3}, 1.0));
  const Node b = Node::constant(Tensor(Shape{3}, 0.0));
  for (int k = 0; k < 6; ++k) {
    const Tensor x = random_tensor({10, 3}, rng, -3.0, 5.0);
    batchnorm_forward(Node::constant(x), g, b, rm, rv, momentum, 1e-5, true);
    for (std::size_t c = 0; c < 3; ++c) {
      double mu = 0;
      for (std::size_t i = 0; i < 10; ++i) mu += x.at(i, c);
      mu /= 10;
      double var = 0;
      for (std::size_t i = 0; i < 10; ++i) var += (x.at(i, c) - mu) * (x.at(i, c) - mu);
      var /= 10;
      mean_oracle[c] = momentum * mean_oracle[c] + (1 - momentum) * mu;
      var_oracle[c] = momentum * var_oracle[c] + (1 - momentum) * var;
    }
  }
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(rm[c] == doctest::Approx(mean_oracle[c]).epsilon(1e-12));
    CHECK(rv[c] == doctest::Approx(var_oracle[c]).epsilon(1e-12));
  }

  // Eval mode never updates.
  const Tensor before = rm;
  batchnorm_forward(Node::constant(random_tensor({4, 3}, rng)), g, b, rm, rv, momentum, 1e-5, false);
  CHECK(bitwise_equal(before, rm));
}

TEST_CASE("batchnorm gradient matches finite differences") {
  std::mt19937_64 rng(9);
  for (const Shape& xs : {Shape{6, 3}, Shape{3, 2, 2, 3}}) {
    const std::size_t c = xs[1];
    const Tensor up = random_tensor(xs, rng);
    const auto res = check_gradients(
        [&](const auto& in) {
          Tensor rm(Shape{c}), rv(Shape{c}, 1.0);
          const Node y = batchnorm_forward(in[0], in[1], in[2], rm, rv, 0.9, 1e-5, true);
          return sum(mul(y, Node::constant(up)));
        },
        {random_tensor(xs, rng), random_tensor({c}, rng), random_tensor({c}, rng)});
    CHECK_MESSAGE(res.max_rel_error < 1e-5, res.worst);
  }
}

TEST_CASE("cross entropy values and errors") {
  const Node uniform = Node::constant(Tensor(Shape{2, 10}, 0.3));
  Tensor t(Shape{2, 10});
  t.at(0, 3) = 1.0;
  t.at(1, 7) = 1.0;
  CHECK(cross_entropy_loss(uniform, t).value()[0] == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  Tensor margin(Shape{2, 10});
  margin.at(0, 3) = 50;
  margin.at(1, 7) = 50;
  CHECK(cross_entropy_loss(Node::constant(margin), t).value()[0] < 1e-6);

  Tensor bad = t;
  bad.at(0, 0) = 0.5;
  CHECK_THROWS_AS(cross_entropy_loss(uniform, bad), ContractError);
  CHECK_THROWS_AS(cross_entropy_loss(Node::constant(Tensor(Shape{2, 1})), Tensor(Shape{2, 1}, 1.0)),
                  ContractError);
}

TEST_CASE("cross entropy gradient matches finite differences") {
  std::mt19937_64 rng(10);
  const Tensor t = random_targets(5, 4, rng);
  const auto res = check_gradients([&](const auto& in) { return cross_entropy_loss(in[0], t); },
                                   {random_tensor({5, 4}, rng)});
  CHECK(res.max_rel_error < 1e-5);
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(12);
  const Tensor p = softmax_rows(random_tensor({20, 7}, rng, -30, 30));
  for (std::size_t i = 0; i < 20; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) s += p.at(i, j);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("binary cross entropy values, symmetry and two-class equivalence") {
  CHECK(binary_ce_loss(Node::constant(Tensor(Shape{1, 1}, 0.0)), Tensor(Shape{1, 1}, 0.5)).value()[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(binary_ce_loss(Node::constant(Tensor(Shape{1, 1}, 50.0)), Tensor(Shape{1, 1}, 1.0)).value()[0] <
        1e-12);
  CHECK_THROWS_AS(binary_ce_loss(Node::constant(Tensor(Shape{1, 1})), Tensor(Shape{1, 1}, 1.5)),
                  ContractError);

  std::mt19937_64 rng(13);
  const Tensor z = random_tensor({6, 4}, rng, -5, 5);
  const Tensor y = random_tensor({6, 4}, rng, 0, 1);
  Tensor neg = z, flip = y;
  for (auto& v : neg.storage()) v = -v;
  for (auto& v : flip.storage()) v = 1 - v;
  const double a = binary_ce_loss(Node::constant(z), y).value()[0];
  const double b = binary_ce_loss(Node::constant(neg), flip).value()[0];
  CHECK(std::abs(a - b) < 1e-9);

  // Logit z with target y equals a 2-class softmax over [0, z] with targets [1-y, y].
  Tensor two(Shape{24, 2}), two_t(Shape{24, 2});
  for (std::size_t i = 0; i < 24; ++i) {
    two.at(i, 1) = z[i];
    two_t.at(i, 0) = 1 - y[i];
    two_t.at(i, 1) = y[i];
  }
  const double c = cross_entropy_loss(Node::constant(two), two_t).value()[0];
  CHECK(std::abs(a - c) < 1e-9);

  const auto res = check_gradients([&](const auto& in) { return binary_ce_loss(in[0], y); }, {z});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("multitask head has one normalizer per task") {
  MlpOptions opts;
  opts.hidden = {16};
  opts.task_norm = true;
  Model m = make_mlp(8, 12, HeadKind::sigmoid, opts, 5);
  CHECK(m.task_norm_count() == 12);
  const Model q = wrap_model(m, QuantConfig{});
  CHECK(q.task_norm_count() == 12);
}

TEST_CASE("clone shares no state") {
  Model a = make_mlp_small(6, 3, HeadKind::softmax, 1);
  Model b = a.clone();
  b.layers()[0].weight.mutable_value().fill(0.0);
  CHECK_FALSE(a.layers()[0].weight.value() == b.layers()[0].weight.value());
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = scratch_dir("ckpt");
  MlpOptions opts;
  opts.hidden = {5, 4};
  opts.hidden_batchnorm = true;
  Model a = wrap_model(make_mlp(3, 2, HeadKind::softmax, opts, 42), QuantConfig{});
  std::mt19937_64 rng(6), drop(7);
  ForwardContext ctx{true, &drop};
  a.forward(random_tensor({8, 3}, rng), ctx);  // calibrate scales, move running stats

  save_checkpoint(a, dir / "a.ckpt");
  Model b = wrap_model(make_mlp(3, 2, HeadKind::softmax, opts, 99), QuantConfig{});
  load_checkpoint(b, dir / "a.ckpt");
  const auto sa = model_state(a), sb = model_state(b);
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    CHECK(sa[i].name == sb[i].name);
    CHECK(bitwise_equal(sa[i].value, sb[i].value));
  }

  // Layout: magic, then the first record's name length as little-endian u64.
  std::ifstream f(dir / "a.ckpt", std::ios::binary);
  char magic[5];
  f.read(magic, 5);
  CHECK(std::string(magic, 5) == "QREG1");
  unsigned char len[8];
  f.read(reinterpret_cast<char*>(len), 8);
  CHECK(len[0] == sa[0].name.size());
  for (int i = 1; i < 8; ++i) CHECK(len[i] == 0);

  Model c = make_mlp_small(3, 2, HeadKind::softmax, 1);
  CHECK_THROWS_AS(load_checkpoint(c, dir / "a.ckpt"), DataError);
  CHECK_THROWS(read_records(dir / "a.ckpt", kDatasetMagic));
}
