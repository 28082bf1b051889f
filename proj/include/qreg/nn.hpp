#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "qreg/autodiff.hpp"
#include "qreg/quantization.hpp"

namespace qreg {

enum class LayerKind { dense, conv2d, batchnorm, relu, flatten, dropout };

const char* to_string(LayerKind kind);

/// Quantization attached to one parametric layer by wrap_model.
struct LayerQuant {
  int weight_bits = 8;
  int act_bits = 8;
  QuantState state;
};

/// One stage of a sequential model.
///
/// Dense weights are stored [out x in]; conv weights [F x C x kh x kw]. Both
/// are per-output-channel along dimension 0.
struct Layer {
  LayerKind kind = LayerKind::relu;
  std::string name;

  Node weight, bias;  // dense, conv2d
  std::size_t stride = 1, padding = 0;

  Node gamma, beta;  // batchnorm
  Tensor running_mean, running_var;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
  bool task_norm = false;  // one independent normalizer per output task

  double dropout_p = 0.0;

  std::optional<LayerQuant> quant;

  bool parametric() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
  /// Output channels of a parametric or batchnorm layer.
  std::size_t channels() const;
};

enum class HeadKind { softmax, sigmoid };

/// Options for a single forward pass.
struct ForwardContext {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // required when train and a dropout layer is active
  // When set, every fake-quantize vertex is recorded as (input, output).
  std::vector<std::pair<Node, Node>>* quant_trace = nullptr;
};

struct NamedNode {
  std::string name;
  Node node;
};

/// Sequential network ending in a classification head. The model produces
/// logits; the head kind selects the loss and prediction rule.
class Model {
 public:
  Model() = default;
  Model(Shape input_shape, HeadKind head, std::size_t outputs)
      : input_shape_(std::move(input_shape)), head_(head), outputs_(outputs) {}

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  HeadKind head() const { return head_; }
  std::size_t outputs() const { return outputs_; }
  /// Shape of one example (without the batch dimension).
  const Shape& input_shape() const { return input_shape_; }

  QuantConfig& quant_config() { return quant_; }
  const QuantConfig& quant_config() const { return quant_; }

  /// Logits [N x outputs]. Throws DimensionError for an incompatible input.
  Node forward(const Node& x, ForwardContext& ctx);
  Node forward(const Tensor& x, ForwardContext& ctx) { return forward(Node::constant(x), ctx); }

  /// Trainable parameters in layer order.
  std::vector<NamedNode> parameters() const;
  /// Dense and conv weight tensors (no biases, no batchnorm parameters).
  std::vector<Node> weights() const;
  std::size_t parameter_count() const;
  /// Number of independent per-task output normalizers.
  std::size_t task_norm_count() const;

  /// Deep copy: the clone shares no vertices with this model.
  Model clone() const;
  /// Copies all values (parameters, running stats, scales) from a model of
  /// identical architecture.
  void load_state(const Model& other);

  /// Per-example output shape of every layer, inferred from input_shape.
  /// Throws DimensionError on an incompatible layer sequence.
  std::vector<Shape> layer_output_shapes() const;

  /// Checks layer shape compatibility and that the output matches the head.
  void validate() const;

 private:
  std::vector<Layer> layers_;
  Shape input_shape_;
  HeadKind head_ = HeadKind::softmax;
  std::size_t outputs_ = 0;
  QuantConfig quant_{.enabled = false};
};

// ---------------------------------------------------------------------------
// Layer construction. Weights use He-uniform initialization from `rng`.

Layer make_dense(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng);
Layer make_conv(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t k,
                std::size_t stride, std::size_t padding, std::mt19937_64& rng);
Layer make_batchnorm(std::string name, std::size_t channels, double momentum = 0.9,
                     double eps = 1e-5);
Layer make_relu();
Layer make_flatten();
Layer make_dropout(double p);

struct MlpOptions {
  std::vector<std::size_t> hidden{256, 128};
  bool hidden_batchnorm = false;
  double dropout_p = 0.0;  // 0 inserts no dropout layers
  // Indices of hidden layers followed by dropout; empty means all of them.
  std::vector<std::size_t> dropout_layers;
  bool task_norm = false;  // per-task batchnorm after a sigmoid head
};

/// in -> hidden... -> outputs with relu between dense layers.
Model make_mlp(std::size_t in, std::size_t outputs, HeadKind head, const MlpOptions& opts,
               std::uint64_t seed);
/// `mlp-small`: in -> 256 -> 128 -> outputs.
Model make_mlp_small(std::size_t in, std::size_t outputs, HeadKind head, std::uint64_t seed,
                     double dropout_p = 0.0);
/// `cnn-small`: two conv(3x3)+batchnorm+relu blocks (the second strided) and
/// two dense layers. `image` is {C, H, W}.
Model make_cnn_small(const Shape& image, std::size_t outputs, HeadKind head, std::uint64_t seed,
                     double dropout_p = 0.0, bool task_norm = false);

/// Strips every batchnorm layer, leaving the rest of the network intact.
Model without_batchnorm(const Model& model);

// ---------------------------------------------------------------------------
// Functional pieces.

/// Normalizes x [N x D] or [N x C x H x W] per feature/channel. In train
/// mode uses batch statistics (biased variance) and updates the running
/// statistics as running = momentum*running + (1-momentum)*batch; in eval
/// mode uses the running statistics. Throws ContractError if train && N < 2.
Node batchnorm_forward(const Node& x, const Node& gamma, const Node& beta, Tensor& running_mean,
                       Tensor& running_var, double momentum, double eps, bool train);

/// Mean over rows of -sum_c target*log_softmax(logits). Rows of `targets`
/// must sum to 1 within 1e-6 and C >= 2.
Node cross_entropy_loss(const Node& logits, const Tensor& targets);

/// Mean over all entries of the binary cross-entropy of sigmoid(logits).
/// Targets must lie in [0, 1].
Node binary_ce_loss(const Node& logits, const Tensor& targets);

/// Row-wise softmax of a logits matrix.
Tensor softmax_rows(const Tensor& logits);

// ---------------------------------------------------------------------------
// Binary containers.
//
// Layout: magic bytes, then records until end of file. Each record is
// name length (u64), name bytes, rank (u64), dims (u64 each), values (f64
// each). All integers and floats are little-endian.

struct Record {
  std::string name;
  Tensor value;
};

inline constexpr std::string_view kCheckpointMagic = "QREG1";
inline constexpr std::string_view kDatasetMagic = "QDAT1";

void write_records(const std::filesystem::path& path, std::string_view magic,
                   const std::vector<Record>& records);
std::vector<Record> read_records(const std::filesystem::path& path, std::string_view magic);

/// All model state: parameters, batchnorm running statistics, quantization scales.
std::vector<Record> model_state(const Model& model);
void apply_model_state(Model& model, const std::vector<Record>& records);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
void load_checkpoint(Model& model, const std::filesystem::path& path);

}  // namespace qreg
