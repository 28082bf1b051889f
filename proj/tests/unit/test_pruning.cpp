#include <cmath>
#include <random>

#include <doctest.h>

#include "qreg/errors.hpp"
#include "qreg/nn.hpp"
#include "qreg/pruning.hpp"
#include "support.hpp"

using namespace qreg;
using qreg::testing::random_tensor;

namespace {

// Forward of the unpruned model with the listed neurons of each hidden
// parametric layer zeroed after the activation. Built by hand so it does not
// share code with prune_model.
Tensor masked_forward(Model model, const std::vector<std::vector<std::size_t>>& removed,
                      const Tensor& x) {
  std::size_t p = 0;
  for (auto& l : model.layers()) {
    if (!l.parametric() || p >= removed.size()) continue;
    // Zeroing the weights and bias of a neuron makes its pre-activation 0;
    // relu(0) = 0 and batchnorm is handled by zeroing gamma and beta.
    Tensor& w = l.weight.mutable_value();
    const std::size_t row = w.row_size();
    for (std::size_t f : removed[p]) {
      for (std::size_t j = 0; j < row; ++j) w[f * row + j] = 0.0;
      l.bias.mutable_value()[f] = 0.0;
    }
    ++p;
  }
  // Batchnorm shifts a zero channel to beta - gamma*mean/sqrt(var+eps); zero
  // gamma and beta for removed channels so they stay at zero.
  p = 0;
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    auto& l = model.layers()[i];
    if (l.parametric()) {
      ++p;
    } else if (l.kind == LayerKind::batchnorm && p >= 1 && p - 1 < removed.size()) {
      for (std::size_t f : removed[p - 1]) {
        l.gamma.mutable_value()[f] = 0.0;
        l.beta.mutable_value()[f] = 0.0;
      }
    }
  }
  ForwardContext ctx;
  return model.forward(x, ctx).value();
}

}  // namespace

TEST_CASE("neuron norms") {
  CHECK(neuron_norms(Tensor::matrix({{1, -1}, {3, 0}, {0.1, 0.1}})) == std::vector<double>{2, 3, 0.2});
  const auto eq = neuron_norms(Tensor::matrix({{1, 2}, {2, 1}, {-1, -2}}));
  CHECK(eq[0] == eq[1]);
  CHECK(eq[1] == eq[2]);

  std::mt19937_64 rng(1);
  const Tensor w = random_tensor({4, 5}, rng);
  Tensor perm(Shape{4, 5});
  const std::size_t order[] = {3, 0, 4, 1, 2};
  for (std::size_t f = 0; f < 4; ++f)
    for (std::size_t j = 0; j < 5; ++j) perm.at(f, j) = w.at(f, order[j]);
  const auto a = neuron_norms(w), b = neuron_norms(perm);
  for (std::size_t f = 0; f < 4; ++f) CHECK(a[f] == doctest::Approx(b[f]).epsilon(1e-15));
}

TEST_CASE("selection of pruned neurons") {
  CHECK(select_pruned({0.1, 5, 3, 0.2}, 0.5) == std::vector<std::size_t>{0, 3});
  CHECK(select_pruned({0.1, 5, 3, 0.2}, 0.5, PruneCriterion::highest_norm) ==
        std::vector<std::size_t>{1, 2});
  CHECK(select_pruned({1, 1, 1, 1}, 0.5) == std::vector<std::size_t>{0, 1});
  CHECK(select_pruned({1, 2, 3}, 0.0).empty());
  CHECK(select_pruned({1, 2, 3}, 0.5).size() == 1);
  CHECK_THROWS_AS(select_pruned({1, 2}, 1.0), ContractError);
  CHECK_THROWS_AS(select_pruned({1, 2}, -0.1), ContractError);
}

TEST_CASE("ratio zero leaves predictions unchanged") {
  Model m = make_mlp_small(20, 4, HeadKind::softmax, 3);
  Model p = prune_model(m, {0.0});
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({6, 20}, rng);
  ForwardContext ctx;
  CHECK(bitwise_equal(m.forward(x, ctx).value(), p.forward(x, ctx).value()));
}

TEST_CASE("mlp-small pruned at 0.75 has the rebuilt parameter count") {
  const Model m = make_mlp_small(784, 10, HeadKind::softmax, 4);
  const Model p = prune_model(m, {0.75});
  CHECK(p.parameter_count() == 784 * 64 + 64 + 64 * 32 + 32 + 32 * 10 + 10);
  CHECK(p.layer_output_shapes().back() == Shape{10});
  CHECK(m.parameter_count() == 784 * 256 + 256 + 256 * 128 + 128 + 128 * 10 + 10);
}

TEST_CASE("pruned forward equals the zero-masked original") {
  MlpOptions opts;
  opts.hidden = {12, 8};
  for (bool bn : {false, true}) {
    opts.hidden_batchnorm = bn;
    Model m = make_mlp(7, 3, HeadKind::softmax, opts, 5);
    std::mt19937_64 rng(6), drop(7);
    if (bn) {
      ForwardContext t{true, &drop};
      for (int i = 0; i < 3; ++i) m.forward(random_tensor({16, 7}, rng), t);
    }
    std::vector<std::vector<std::size_t>> removed;
    for (const auto& l : m.layers()) {
      if (l.parametric() && l.name != "dense2") {
        removed.push_back(select_pruned(neuron_norms(l.weight.value()), 0.75));
      }
    }
    CHECK(removed[0].size() == 9);
    CHECK(removed[1].size() == 6);
    Model p = prune_model(m, {0.75});
    const Tensor x = random_tensor({10, 7}, rng);
    ForwardContext ctx;
    CHECK(max_abs_diff(p.forward(x, ctx).value(), masked_forward(m.clone(), removed, x)) < 1e-9);
  }
}

TEST_CASE("conv pruning carries through flatten") {
  Model m = make_cnn_small({2, 6, 6}, 3, HeadKind::softmax, 8);
  std::mt19937_64 rng(9), drop(10);
  ForwardContext t{true, &drop};
  for (int i = 0; i < 3; ++i) m.forward(random_tensor({8, 2, 6, 6}, rng), t);
  std::vector<std::vector<std::size_t>> removed;
  std::size_t param = 0, total = 0;
  for (const auto& l : m.layers()) total += l.parametric();
  for (const auto& l : m.layers()) {
    if (l.parametric() && ++param < total) {
      removed.push_back(select_pruned(neuron_norms(l.weight.value()), 0.5));
    }
  }
  Model p = prune_model(m, {0.5});
  p.validate();
  const Tensor x = random_tensor({4, 2, 6, 6}, rng);
  ForwardContext ctx;
  CHECK(max_abs_diff(p.forward(x, ctx).value(), masked_forward(m.clone(), removed, x)) < 1e-9);
}

TEST_CASE("pruning leaves the source model untouched") {
  const Model m = make_mlp_small(10, 2, HeadKind::softmax, 11);
  const auto before = model_state(m);
  prune_model(m, {0.5});
  const auto after = model_state(m);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(bitwise_equal(before[i].value, after[i].value));
}
