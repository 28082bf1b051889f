#include "qreg/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "qreg/errors.hpp"

namespace qreg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

CMapMat as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MapMat as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank(const Node& n, std::size_t rank, const char* op) {
  if (n.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " operand, got " + shape_str(n.shape()));
  }
}

Shape strip_leading_ones(const Shape& s) {
  auto it = std::find_if(s.begin(), s.end(), [](std::size_t d) { return d != 1; });
  return Shape(it, s.end());
}

// Size of the repeated block when `small` broadcasts against `big`, or 0.
std::size_t broadcast_block(const Shape& big, const Shape& small) {
  const Shape core = strip_leading_ones(small);
  if (core.size() > big.size()) return 0;
  if (!std::equal(core.rbegin(), core.rend(), big.rbegin())) return 0;
  return shape_numel(core);
}

enum class Arith { add, sub, mul };

Node binary(const Node& a, const Node& b, Arith kind) {
  const char* names[] = {"add", "sub", "mul"};
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool a_big = av.numel() >= bv.numel();
  const Shape& big_shape = a_big ? av.shape() : bv.shape();
  std::size_t block = av.shape() == bv.shape()
                          ? av.numel()
                          : broadcast_block(big_shape, a_big ? bv.shape() : av.shape());
  if (block == 0) {
    throw DimensionError(std::string(names[static_cast<int>(kind)]) + ": shapes " +
                         shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                         " are not broadcastable");
  }
  const std::size_t n = std::max(av.numel(), bv.numel());
  // Index into the smaller operand wraps every `block` elements.
  auto ia = [&](std::size_t i) { return a_big ? i : i % block; };
  auto ib = [&](std::size_t i) { return a_big ? i % block : i; };

  Tensor out(big_shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[ia(i)], y = bv[ib(i)];
    out[i] = kind == Arith::add ? x + y : kind == Arith::sub ? x - y : x * y;
  }
  return Node::make(std::move(out), {a, b}, [kind, a_big, block, n](detail::NodeImpl& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const Tensor& g = self.grad;
    auto ia = [&](std::size_t i) { return a_big ? i : i % block; };
    auto ib = [&](std::size_t i) { return a_big ? i % block : i; };
    if (pa.requires_grad) {
      Tensor& ga = detail::grad_slot(pa);
      for (std::size_t i = 0; i < n; ++i) {
        ga[ia(i)] += kind == Arith::mul ? g[i] * pb.value[ib(i)] : g[i];
      }
    }
    if (pb.requires_grad) {
      Tensor& gb = detail::grad_slot(pb);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = kind == Arith::add ? g[i] : kind == Arith::sub ? -g[i] : g[i] * pa.value[ia(i)];
        gb[ib(i)] += d;
      }
    }
  });
}

// Unary op whose local derivative depends on input and output values.
template <typename F, typename D>
Node unary(const Node& a, F f, D dfdx) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = f(av[i]);
  return Node::make(std::move(out), {a}, [dfdx](detail::NodeImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& gp = detail::grad_slot(p);
    for (std::size_t i = 0; i < gp.numel(); ++i) {
      gp[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
    }
  });
}

}  // namespace

namespace detail {

Tensor& grad_slot(NodeImpl& node) {
  if (!node.grad_written) {
    node.grad.fill(0.0);
    node.grad_written = true;
  }
  return node.grad;
}

void accumulate_grad(NodeImpl& node, const Tensor& g) {
  if (!node.grad_written) {
    std::copy(g.data().begin(), g.data().end(), node.grad.data().begin());
    node.grad_written = true;
    return;
  }
  for (std::size_t i = 0; i < g.numel(); ++i) node.grad[i] += g[i];
}

}  // namespace detail

Node Node::leaf(Tensor value, bool requires_grad, std::string name) {
  auto impl = std::make_shared<detail::NodeImpl>();
  impl->grad = Tensor(value.shape());
  impl->value = std::move(value);
  impl->requires_grad = requires_grad;
  impl->name = std::move(name);
  return Node(std::move(impl));
}

Node Node::make(Tensor value, std::vector<Node> parents,
                std::function<void(detail::NodeImpl&)> rule) {
  auto impl = std::make_shared<detail::NodeImpl>();
  impl->grad = Tensor(value.shape());
  impl->value = std::move(value);
  for (auto& p : parents) {
    impl->requires_grad = impl->requires_grad || p.requires_grad();
    impl->parents.push_back(std::move(p.impl_));
  }
  if (impl->requires_grad) impl->backward_rule = std::move(rule);
  return Node(std::move(impl));
}

void Node::zero_grad() {
  impl_->grad.fill(0.0);
  impl_->grad_written = false;
}

Node matmul(const Node& a, const Node& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  as_mat(out, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), k, n);
  return Node::make(std::move(out), {a, b}, [m, k, n](detail::NodeImpl& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto g = as_mat(self.grad, m, n);
    if (pa.requires_grad) {
      as_mat(detail::grad_slot(pa), m, k).noalias() += g * as_mat(pb.value, k, n).transpose();
    }
    if (pb.requires_grad) {
      as_mat(detail::grad_slot(pb), k, n).noalias() += as_mat(pa.value, m, k).transpose() * g;
    }
  });
}

Node transpose(const Node& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out(Shape{c, r});
  as_mat(out, c, r) = as_mat(a.value(), r, c).transpose();
  return Node::make(std::move(out), {a}, [r, c](detail::NodeImpl& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) as_mat(detail::grad_slot(p), r, c) += as_mat(self.grad, c, r).transpose();
  });
}

Node linear(const Node& x, const Node& w, const Node* bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  if (w.shape()[1] != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  if (bias && bias->shape() != Shape{out_dim}) {
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " for weight " +
                         shape_str(w.shape()));
  }
  Tensor out(Shape{n, out_dim});
  auto o = as_mat(out, n, out_dim);
  o.noalias() = as_mat(x.value(), n, in) * as_mat(w.value(), out_dim, in).transpose();
  if (bias) {
    o.rowwise() += as_mat(bias->value(), 1, out_dim).row(0);
  }
  std::vector<Node> parents{x, w};
  if (bias) parents.push_back(*bias);
  return Node::make(std::move(out), std::move(parents), [n, in, out_dim](detail::NodeImpl& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto g = as_mat(self.grad, n, out_dim);
    if (px.requires_grad) {
      as_mat(detail::grad_slot(px), n, in).noalias() += g * as_mat(pw.value, out_dim, in);
    }
    if (pw.requires_grad) {
      as_mat(detail::grad_slot(pw), out_dim, in).noalias() += g.transpose() * as_mat(px.value, n, in);
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      as_mat(detail::grad_slot(*self.parents[2]), 1, out_dim) += g.colwise().sum();
    }
  });
}

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t spatial() const { return ho * wo; }
};

// cols[(ci*kh+ki)*kw+kj][oy*wo+ox] = x[ci][oy*s+ki-p][ox*s+kj-p]
void im2col(const ConvGeom& g, const double* x, double* cols) {
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((ci * g.kh + ki) * g.kw + kj) * g.spatial();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] = inside ? x[(ci * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

void col2im_add(const ConvGeom& g, const double* cols, double* dx) {
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((ci * g.kh + ki) * g.kw + kj) * g.spatial();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(ci * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace

Node conv2d(const Node& x, const Node& w, std::size_t stride, std::size_t padding) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[1] != xs[1]) {
    throw DimensionError("conv2d: input " + shape_str(xs) + " has " + std::to_string(xs[1]) +
                         " channels but kernel " + shape_str(ws) + " expects " +
                         std::to_string(ws[1]));
  }
  if (ws[2] > xs[2] + 2 * padding || ws[3] > xs[3] + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(ws) + " larger than padded input " +
                         shape_str(xs));
  }
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, padding, 0, 0};
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  Tensor out(Shape{g.n, g.f, g.ho, g.wo});
  std::vector<double> cols(g.patch() * g.spatial());
  auto wm = as_mat(w.value(), g.f, g.patch());
  for (std::size_t i = 0; i < g.n; ++i) {
    im2col(g, x.value().data().data() + i * g.c * g.h * g.w, cols.data());
    MapMat o(out.data().data() + i * g.f * g.spatial(), g.f, g.spatial());
    o.noalias() = wm * CMapMat(cols.data(), g.patch(), g.spatial());
  }
  return Node::make(std::move(out), {x, w}, [g](detail::NodeImpl& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    std::vector<double> cols(g.patch() * g.spatial());
    auto wm = as_mat(pw.value, g.f, g.patch());
    for (std::size_t i = 0; i < g.n; ++i) {
      CMapMat gi(self.grad.data().data() + i * g.f * g.spatial(), g.f, g.spatial());
      if (pw.requires_grad) {
        im2col(g, px.value.data().data() + i * g.c * g.h * g.w, cols.data());
        as_mat(detail::grad_slot(pw), g.f, g.patch()).noalias() +=
            gi * CMapMat(cols.data(), g.patch(), g.spatial()).transpose();
      }
      if (px.requires_grad) {
        MapMat dcols(cols.data(), g.patch(), g.spatial());
        dcols.noalias() = wm.transpose() * gi;
        col2im_add(g, cols.data(), detail::grad_slot(px).data().data() + i * g.c * g.h * g.w);
      }
    }
  });
}

Node add_channel_bias(const Node& x, const Node& b) {
  require_rank(x, 4, "add_channel_bias");
  const auto& xs = x.shape();
  if (b.shape() != Shape{xs[1]}) {
    throw DimensionError("add_channel_bias: bias " + shape_str(b.shape()) + " for input " +
                         shape_str(xs));
  }
  const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t j = 0; j < hw; ++j) out[(i * c + ci) * hw + j] += b.value()[ci];
  return Node::make(std::move(out), {x, b}, [n, c, hw](detail::NodeImpl& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) {
      Tensor& gx = detail::grad_slot(px);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      Tensor& gb = detail::grad_slot(pb);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t j = 0; j < hw; ++j) gb[ci] += self.grad[(i * c + ci) * hw + j];
    }
  });
}

Node add(const Node& a, const Node& b) { return binary(a, b, Arith::add); }
Node sub(const Node& a, const Node& b) { return binary(a, b, Arith::sub); }
Node mul(const Node& a, const Node& b) { return binary(a, b, Arith::mul); }

Node scale(const Node& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Node relu(const Node& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Node sigmoid(const Node& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Node exp(const Node& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Node log(const Node& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Node clamp(const Node& a, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return x >= lo && x <= hi ? 1.0 : 0.0; });
}

Node sum(const Node& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return Node::make(Tensor::scalar(s), {a}, [](detail::NodeImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& gp = detail::grad_slot(p);
    for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += self.grad[0];
  });
}

Node mean(const Node& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

Node reshape(const Node& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return Node::make(std::move(out), {a}, [](detail::NodeImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& gp = detail::grad_slot(p);
    for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += self.grad[i];
  });
}

Node custom_grad(const Node& input, const std::function<Tensor(const Tensor&)>& forward) {
  Tensor out = forward(input.value());
  if (out.shape() != input.shape()) {
    throw DimensionError("custom_grad: forward changed shape " + shape_str(input.shape()) +
                         " to " + shape_str(out.shape()));
  }
  return Node::make(std::move(out), {input}, [](detail::NodeImpl& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) detail::accumulate_grad(p, self.grad);
  });
}

void backward(const Node& loss) {
  if (loss.value().numel() != 1 || loss.value().rank() > 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  auto& root = loss.impl();
  if (!root.requires_grad) return;

  // Iterative post-order DFS yields a topological order.
  std::vector<detail::NodeImpl*> order;
  std::unordered_set<detail::NodeImpl*> seen;
  std::vector<std::pair<detail::NodeImpl*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::NodeImpl* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  detail::grad_slot(root)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::NodeImpl* n = *it;
    if (n->backward_rule && n->grad_written) n->backward_rule(*n);
  }
}

}  // namespace qreg
