#include "qreg/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "qreg/errors.hpp"
#include "qreg/qat.hpp"
#include "qreg/regularization.hpp"

namespace qreg {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dropout: return "dropout";
  }
  return "?";
}

std::size_t Layer::channels() const {
  if (parametric()) return weight.shape()[0];
  if (kind == LayerKind::batchnorm) return gamma.shape()[0];
  throw ContractError(std::string("layer kind ") + to_string(kind) + " has no channels");
}

// ---------------------------------------------------------------------------

Node Model::forward(const Node& x, ForwardContext& ctx) {
  const Shape& xs = x.shape();
  if (xs.size() != input_shape_.size() + 1 || xs[0] < 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), xs.begin() + 1)) {
    throw DimensionError("model expects [N x " + shape_str(input_shape_) + "] input, got " +
                         shape_str(xs));
  }
  Node h = x;
  for (auto& layer : layers_) {
    switch (layer.kind) {
      case LayerKind::dense:
      case LayerKind::conv2d:
        if (layer.quant && quant_.enabled) {
          h = quantize_layer_forward(layer, h, quant_, ctx.train, ctx.quant_trace);
        } else if (layer.kind == LayerKind::dense) {
          h = linear(h, layer.weight, &layer.bias);
        } else {
          h = add_channel_bias(conv2d(h, layer.weight, layer.stride, layer.padding), layer.bias);
        }
        break;
      case LayerKind::batchnorm:
        h = batchnorm_forward(h, layer.gamma, layer.beta, layer.running_mean, layer.running_var,
                              layer.bn_momentum, layer.bn_eps, ctx.train);
        break;
      case LayerKind::relu:
        h = relu(h);
        break;
      case LayerKind::flatten: {
        const std::size_t n = h.shape()[0];
        h = reshape(h, Shape{n, h.value().numel() / n});
        break;
      }
      case LayerKind::dropout:
        if (ctx.train && layer.dropout_p > 0.0) {
          if (!ctx.rng) throw ContractError("train-mode dropout requires an rng");
          h = dropout_forward(h, layer.dropout_p, true, *ctx.rng);
        }
        break;
    }
  }
  return h;
}

std::vector<NamedNode> Model::parameters() const {
  std::vector<NamedNode> out;
  for (const auto& l : layers_) {
    if (l.parametric()) {
      out.push_back({l.name + ".weight", l.weight});
      out.push_back({l.name + ".bias", l.bias});
    } else if (l.kind == LayerKind::batchnorm) {
      out.push_back({l.name + ".gamma", l.gamma});
      out.push_back({l.name + ".beta", l.beta});
    }
  }
  return out;
}

std::vector<Node> Model::weights() const {
  std::vector<Node> out;
  for (const auto& l : layers_) {
    if (l.parametric()) out.push_back(l.weight);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.node.value().numel();
  return n;
}

std::size_t Model::task_norm_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) {
    if (l.kind == LayerKind::batchnorm && l.task_norm) n += l.channels();
  }
  return n;
}

namespace {
Node copy_leaf(const Node& n) {
  if (!n.valid()) return {};
  return Node::leaf(n.value(), n.requires_grad(), n.name());
}
}  // namespace

Model Model::clone() const {
  Model m(input_shape_, head_, outputs_);
  m.quant_ = quant_;
  for (const auto& l : layers_) {
    Layer c = l;
    c.weight = copy_leaf(l.weight);
    c.bias = copy_leaf(l.bias);
    c.gamma = copy_leaf(l.gamma);
    c.beta = copy_leaf(l.beta);
    m.layers_.push_back(std::move(c));
  }
  return m;
}

void Model::load_state(const Model& other) { apply_model_state(*this, model_state(other)); }

std::vector<Shape> Model::layer_output_shapes() const {
  std::vector<Shape> out;
  Shape s = input_shape_;
  for (const auto& l : layers_) {
    switch (l.kind) {
      case LayerKind::dense:
        if (s.size() != 1 || s[0] != l.weight.shape()[1]) {
          throw DimensionError(l.name + ": expects " + std::to_string(l.weight.shape()[1]) +
                               " features, receives " + shape_str(s));
        }
        s = {l.weight.shape()[0]};
        break;
      case LayerKind::conv2d: {
        const auto& w = l.weight.shape();
        if (s.size() != 3 || s[0] != w[1] || w[2] > s[1] + 2 * l.padding ||
            w[3] > s[2] + 2 * l.padding) {
          throw DimensionError(l.name + ": kernel " + shape_str(w) + " incompatible with " +
                               shape_str(s));
        }
        s = {w[0], (s[1] + 2 * l.padding - w[2]) / l.stride + 1,
             (s[2] + 2 * l.padding - w[3]) / l.stride + 1};
        break;
      }
      case LayerKind::batchnorm:
        if (s.empty() || s[0] != l.channels()) {
          throw DimensionError(l.name + ": " + std::to_string(l.channels()) +
                               " channels, receives " + shape_str(s));
        }
        break;
      case LayerKind::flatten:
        s = {shape_numel(s)};
        break;
      default:
        break;
    }
    out.push_back(s);
  }
  return out;
}

void Model::validate() const {
  if (layers_.empty()) throw ContractError("model has no layers");
  const Shape last = layer_output_shapes().back();
  if (last != Shape{outputs_}) {
    throw DimensionError("model output " + shape_str(last) + " does not match head size " +
                         std::to_string(outputs_));
  }
}

// ---------------------------------------------------------------------------

namespace {
Node he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng, std::string name) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w(std::move(shape));
  for (auto& v : w.data()) v = dist(rng);
  return Node::leaf(std::move(w), true, std::move(name));
}
}  // namespace

Layer make_dense(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  Layer l;
  l.kind = LayerKind::dense;
  l.weight = he_uniform({out, in}, in, rng, name + ".weight");
  l.bias = Node::leaf(Tensor(Shape{out}), true, name + ".bias");
  l.name = std::move(name);
  return l;
}

Layer make_conv(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t k,
                std::size_t stride, std::size_t padding, std::mt19937_64& rng) {
  Layer l;
  l.kind = LayerKind::conv2d;
  l.weight = he_uniform({out_ch, in_ch, k, k}, in_ch * k * k, rng, name + ".weight");
  l.bias = Node::leaf(Tensor(Shape{out_ch}), true, name + ".bias");
  l.stride = stride;
  l.padding = padding;
  l.name = std::move(name);
  return l;
}

Layer make_batchnorm(std::string name, std::size_t channels, double momentum, double eps) {
  Layer l;
  l.kind = LayerKind::batchnorm;
  l.gamma = Node::leaf(Tensor(Shape{channels}, 1.0), true, name + ".gamma");
  l.beta = Node::leaf(Tensor(Shape{channels}), true, name + ".beta");
  l.running_mean = Tensor(Shape{channels});
  l.running_var = Tensor(Shape{channels}, 1.0);
  l.bn_momentum = momentum;
  l.bn_eps = eps;
  l.name = std::move(name);
  return l;
}

Layer make_relu() {
  Layer l;
  l.kind = LayerKind::relu;
  l.name = "relu";
  return l;
}

Layer make_flatten() {
  Layer l;
  l.kind = LayerKind::flatten;
  l.name = "flatten";
  return l;
}

Layer make_dropout(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout probability must be in [0, 1)");
  Layer l;
  l.kind = LayerKind::dropout;
  l.dropout_p = p;
  l.name = "dropout";
  return l;
}

Model make_mlp(std::size_t in, std::size_t outputs, HeadKind head, const MlpOptions& opts,
               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Model m({in}, head, outputs);
  auto& layers = m.layers();
  std::size_t prev = in;
  for (std::size_t i = 0; i < opts.hidden.size(); ++i) {
    layers.push_back(make_dense("dense" + std::to_string(i), prev, opts.hidden[i], rng));
    if (opts.hidden_batchnorm) {
      layers.push_back(make_batchnorm("bn" + std::to_string(i), opts.hidden[i]));
    }
    layers.push_back(make_relu());
    const bool drop_here =
        opts.dropout_layers.empty() ||
        std::find(opts.dropout_layers.begin(), opts.dropout_layers.end(), i) !=
            opts.dropout_layers.end();
    if (opts.dropout_p > 0.0 && drop_here) layers.push_back(make_dropout(opts.dropout_p));
    prev = opts.hidden[i];
  }
  layers.push_back(make_dense("dense" + std::to_string(opts.hidden.size()), prev, outputs, rng));
  if (opts.task_norm) {
    Layer bn = make_batchnorm("task_norm", outputs);
    bn.task_norm = true;
    layers.push_back(std::move(bn));
  }
  m.validate();
  return m;
}

Model make_mlp_small(std::size_t in, std::size_t outputs, HeadKind head, std::uint64_t seed,
                     double dropout_p) {
  MlpOptions opts;
  opts.dropout_p = dropout_p;
  return make_mlp(in, outputs, head, opts, seed);
}

Model make_cnn_small(const Shape& image, std::size_t outputs, HeadKind head, std::uint64_t seed,
                     double dropout_p, bool task_norm) {
  if (image.size() != 3) throw DimensionError("cnn-small expects a {C, H, W} image shape");
  std::mt19937_64 rng(seed);
  Model m(image, head, outputs);
  auto& layers = m.layers();
  layers.push_back(make_conv("conv0", image[0], 16, 3, 1, 1, rng));
  layers.push_back(make_batchnorm("bn0", 16));
  layers.push_back(make_relu());
  layers.push_back(make_conv("conv1", 16, 32, 3, 2, 1, rng));
  layers.push_back(make_batchnorm("bn1", 32));
  layers.push_back(make_relu());
  layers.push_back(make_flatten());
  const std::size_t h = (image[1] + 2 - 3) / 2 + 1;
  const std::size_t w = (image[2] + 2 - 3) / 2 + 1;
  layers.push_back(make_dense("dense0", 32 * h * w, 64, rng));
  layers.push_back(make_relu());
  if (dropout_p > 0.0) layers.push_back(make_dropout(dropout_p));
  layers.push_back(make_dense("dense1", 64, outputs, rng));
  if (task_norm) {
    Layer bn = make_batchnorm("task_norm", outputs);
    bn.task_norm = true;
    layers.push_back(std::move(bn));
  }
  m.validate();
  return m;
}

Model without_batchnorm(const Model& model) {
  Model copy = model.clone();
  auto& layers = copy.layers();
  std::erase_if(layers, [](const Layer& l) { return l.kind == LayerKind::batchnorm; });
  return copy;
}

// ---------------------------------------------------------------------------

Node batchnorm_forward(const Node& x, const Node& gamma, const Node& beta, Tensor& running_mean,
                       Tensor& running_var, double momentum, double eps, bool train) {
  const Shape& xs = x.shape();
  if (xs.size() != 2 && xs.size() != 4) {
    throw DimensionError("batchnorm expects [N x D] or [N x C x H x W], got " + shape_str(xs));
  }
  const std::size_t n = xs[0], c = xs[1];
  const std::size_t inner = xs.size() == 4 ? xs[2] * xs[3] : 1;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} ||
      running_mean.shape() != Shape{c} || running_var.shape() != Shape{c}) {
    throw DimensionError("batchnorm parameters do not match " + std::to_string(c) + " channels");
  }
  if (train && n < 2) throw ContractError("batchnorm in train mode needs a batch of at least 2");
  const double count = static_cast<double>(n * inner);
  auto idx = [c, inner](std::size_t i, std::size_t ch, std::size_t j) {
    return (i * c + ch) * inner + j;
  };

  std::vector<double> mu(c), invstd(c);
  const Tensor& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (train) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < inner; ++j) s += xv[idx(i, ch, j)];
      const double m = s / count;
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < inner; ++j) {
          const double d = xv[idx(i, ch, j)] - m;
          v += d * d;
        }
      v /= count;
      mu[ch] = m;
      invstd[ch] = 1.0 / std::sqrt(v + eps);
      running_mean[ch] = momentum * running_mean[ch] + (1.0 - momentum) * m;
      running_var[ch] = momentum * running_var[ch] + (1.0 - momentum) * v;
    } else {
      mu[ch] = running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
    }
  }

  Tensor xhat(xs), out(xs);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t k = idx(i, ch, j);
        xhat[k] = (xv[k] - mu[ch]) * invstd[ch];
        out[k] = gamma.value()[ch] * xhat[k] + beta.value()[ch];
      }

  return Node::make(std::move(out), {x, gamma, beta},
                    [n, c, inner, count, train, idx, xhat = std::move(xhat),
                     invstd = std::move(invstd)](detail::NodeImpl& self) {
                      auto& px = *self.parents[0];
                      auto& pg = *self.parents[1];
                      auto& pb = *self.parents[2];
                      const Tensor& g = self.grad;
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        double sum_g = 0.0, sum_gx = 0.0;
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < inner; ++j) {
                            const std::size_t k = idx(i, ch, j);
                            sum_g += g[k];
                            sum_gx += g[k] * xhat[k];
                          }
                        if (pg.requires_grad) detail::grad_slot(pg)[ch] += sum_gx;
                        if (pb.requires_grad) detail::grad_slot(pb)[ch] += sum_g;
                        if (!px.requires_grad) continue;
                        Tensor& gx = detail::grad_slot(px);
                        const double gm = pg.value[ch];
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < inner; ++j) {
                            const std::size_t k = idx(i, ch, j);
                            if (train) {
                              gx[k] += gm * invstd[ch] / count *
                                       (count * g[k] - sum_g - xhat[k] * sum_gx);
                            } else {
                              gx[k] += gm * invstd[ch] * g[k];
                            }
                          }
                      }
                    });
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax expects a matrix, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (p.at(i, j) = std::exp(logits.at(i, j) - mx));
    for (std::size_t j = 0; j < c; ++j) p.at(i, j) /= s;
  }
  return p;
}

Node cross_entropy_loss(const Node& logits, const Tensor& targets) {
  if (logits.value().rank() != 2 || targets.shape() != logits.shape()) {
    throw DimensionError("cross_entropy_loss: logits " + shape_str(logits.shape()) +
                         " vs targets " + shape_str(targets.shape()));
  }
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (c < 2) throw ContractError("cross_entropy_loss needs at least 2 classes");
  std::vector<double> row_sum(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) row_sum[i] += targets.at(i, j);
    if (std::abs(row_sum[i] - 1.0) > 1e-6) {
      throw ContractError("cross_entropy_loss: target row " + std::to_string(i) + " sums to " +
                          std::to_string(row_sum[i]));
    }
  }
  const Tensor& z = logits.value();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = z.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z.at(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) loss -= targets.at(i, j) * (z.at(i, j) - lse);
  }
  loss /= static_cast<double>(n);
  return Node::make(Tensor::scalar(loss), {logits},
                    [targets, row_sum = std::move(row_sum), n, c](detail::NodeImpl& self) {
                      auto& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      const Tensor prob = softmax_rows(p.value);
                      const double scale = self.grad[0] / static_cast<double>(n);
                      Tensor& g = detail::grad_slot(p);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < c; ++j) {
                          g.at(i, j) += scale * (prob.at(i, j) * row_sum[i] - targets.at(i, j));
                        }
                    });
}

Node binary_ce_loss(const Node& logits, const Tensor& targets) {
  if (targets.shape() != logits.shape()) {
    throw DimensionError("binary_ce_loss: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  }
  for (double t : targets.data()) {
    if (!(t >= 0.0 && t <= 1.0)) throw ContractError("binary_ce_loss: target outside [0, 1]");
  }
  const Tensor& z = logits.value();
  const std::size_t total = z.numel();
  double loss = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    loss += std::max(z[i], 0.0) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  loss /= static_cast<double>(total);
  return Node::make(Tensor::scalar(loss), {logits}, [targets, total](detail::NodeImpl& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    const double scale = self.grad[0] / static_cast<double>(total);
    Tensor& g = detail::grad_slot(p);
    for (std::size_t i = 0; i < total; ++i) {
      const double x = p.value[i];
      const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g[i] += scale * (s - targets[i]);
    }
  });
}

// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "binary containers are written in native little-endian order");

void put_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

bool get_u64(std::ifstream& in, std::uint64_t& v) {
  return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof v));
}

}  // namespace

void write_records(const std::filesystem::path& path, std::string_view magic,
                   const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  for (const auto& r : records) {
    put_u64(out, r.name.size());
    out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put_u64(out, r.value.rank());
    for (auto d : r.value.shape()) put_u64(out, d);
    out.write(reinterpret_cast<const char*>(r.value.data().data()),
              static_cast<std::streamsize>(r.value.numel() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<Record> read_records(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string head(magic.size(), '\0');
  if (!in.read(head.data(), static_cast<std::streamsize>(head.size())) || head != magic) {
    throw ParseError(path.string() + ": bad magic, expected " + std::string(magic), 0);
  }
  std::vector<Record> out;
  std::uint64_t name_len = 0;
  while (get_u64(in, name_len)) {
    if (name_len > (1u << 20)) throw ParseError(path.string() + ": corrupt record name", 0);
    Record r;
    r.name.resize(name_len);
    std::uint64_t rank = 0;
    if (!in.read(r.name.data(), static_cast<std::streamsize>(name_len)) || !get_u64(in, rank) ||
        rank > 8) {
      throw ParseError(path.string() + ": truncated record", 0);
    }
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      if (!get_u64(in, v)) throw ParseError(path.string() + ": truncated dims", 0);
      d = v;
    }
    std::vector<double> data(shape_numel(shape));
    if (!in.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      throw ParseError(path.string() + ": truncated data for " + r.name, 0);
    }
    r.value = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Record> model_state(const Model& model) {
  std::vector<Record> out;
  for (const auto& l : model.layers()) {
    if (l.parametric()) {
      out.push_back({l.name + ".weight", l.weight.value()});
      out.push_back({l.name + ".bias", l.bias.value()});
      if (l.quant) {
        const auto& s = l.quant->state;
        std::vector<double> ws = s.weight_scale.empty() ? weight_scales(l.weight.value())
                                                        : s.weight_scale;
        const std::size_t n = ws.size();
        out.push_back({l.name + ".weight_scale", Tensor(Shape{n}, std::move(ws))});
        out.push_back({l.name + ".act_scale", Tensor(Shape{2}, {s.act_scale, s.calibrated ? 1.0 : 0.0})});
      }
    } else if (l.kind == LayerKind::batchnorm) {
      out.push_back({l.name + ".gamma", l.gamma.value()});
      out.push_back({l.name + ".beta", l.beta.value()});
      out.push_back({l.name + ".running_mean", l.running_mean});
      out.push_back({l.name + ".running_var", l.running_var});
    }
  }
  return out;
}

void apply_model_state(Model& model, const std::vector<Record>& records) {
  const auto expected = model_state(model);
  if (expected.size() != records.size()) {
    throw DataError("checkpoint has " + std::to_string(records.size()) + " records, model needs " +
                    std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].name != expected[i].name ||
        records[i].value.shape() != expected[i].value.shape()) {
      throw DataError("checkpoint record " + records[i].name + " " +
                      shape_str(records[i].value.shape()) + " does not match " +
                      expected[i].name + " " + shape_str(expected[i].value.shape()));
    }
  }
  std::size_t k = 0;
  for (auto& l : model.layers()) {
    if (l.parametric()) {
      l.weight.mutable_value() = records[k++].value;
      l.bias.mutable_value() = records[k++].value;
      if (l.quant) {
        const auto& ws = records[k++].value;
        l.quant->state.weight_scale.assign(ws.data().begin(), ws.data().end());
        const auto& as = records[k++].value;
        l.quant->state.act_scale = as[0];
        l.quant->state.calibrated = as[1] != 0.0;
      }
    } else if (l.kind == LayerKind::batchnorm) {
      l.gamma.mutable_value() = records[k++].value;
      l.beta.mutable_value() = records[k++].value;
      l.running_mean = records[k++].value;
      l.running_var = records[k++].value;
    }
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_records(path, kCheckpointMagic, model_state(model));
}

void load_checkpoint(Model& model, const std::filesystem::path& path) {
  apply_model_state(model, read_records(path, kCheckpointMagic));
}

}  // namespace qreg
