#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qreg/autodiff.hpp"
#include "qreg/tensor.hpp"

namespace qreg::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -2.0,
                            double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "input i, element j"
};

// Compares backward() against central differences of a scalar function of
// several inputs. Relative error uses max(|a|, |n|, 1e-3) as the denominator so
// near-zero gradients are compared absolutely.
inline GradCheck check_gradients(const std::function<Node(const std::vector<Node>&)>& f,
                                 const std::vector<Tensor>& inputs, double h = 1e-5) {
  std::vector<Node> leaves;
  for (const auto& t : inputs) leaves.push_back(Node::leaf(t, true));
  backward(f(leaves));

  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      auto eval = [&](double delta) {
        std::vector<Node> probe;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          Tensor t = inputs[k];
          if (k == i) t[j] += delta;
          probe.push_back(Node::constant(t));
        }
        return f(probe).value()[0];
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double analytic = leaves[i].grad()[j];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
      const double err = std::abs(analytic - numeric) / denom;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = "input " + std::to_string(i) + ", element " + std::to_string(j);
      }
    }
  }
  return out;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("qreg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace qreg::testing
