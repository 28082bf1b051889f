#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <iostream>
#include <sstream>

#include "qreg/data.hpp"
#include "qreg/errors.hpp"
#include "qreg/experiment.hpp"
#include "qreg/quantization.hpp"
#include "qreg/regularization.hpp"

namespace py = pybind11;
using namespace qreg;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Array fake_quantize_py(const Array& x, int bits, const py::object& scale) {
  const Tensor t = to_tensor(x);
  if (py::isinstance<py::float_>(scale) || py::isinstance<py::int_>(scale)) {
    return to_array(fake_quantize(t, bits, scale.cast<double>()));
  }
  const auto s = scale.cast<std::vector<double>>();
  return to_array(fake_quantize(t, bits, std::span<const double>(s)));
}

py::tuple blobs_py(std::size_t classes, std::size_t per_class, std::size_t dims, double separation,
                   std::uint64_t seed) {
  const Dataset d = synth_blobs(classes, per_class, dims, separation, seed);
  return py::make_tuple(to_array(d.features), py::array_t<std::int32_t>(d.labels.size(), d.labels.data()));
}

py::tuple noise_py(const std::vector<std::int32_t>& labels, std::size_t classes, double fraction,
                   std::uint64_t seed, bool exclude_original) {
  Dataset d;
  d.features = Tensor(Shape{labels.size(), 1});
  d.num_classes = classes;
  d.labels = labels;
  const NoisyDataset n = inject_noise(d, {fraction, seed, exclude_original});
  return py::make_tuple(py::array_t<std::int32_t>(n.data.labels.size(), n.data.labels.data()),
                        n.corrupted);
}

int run_command(const std::string& name, const std::filesystem::path& config,
                std::optional<std::filesystem::path> out,
                std::optional<std::vector<std::uint64_t>> seeds, bool quiet) {
  CommandOptions opts{config, std::move(out), std::move(seeds), quiet};
  py::gil_scoped_release release;
  if (name == "train") return cmd_train(opts, std::cout, std::cerr);
  if (name == "noise-sweep") return cmd_noise_sweep(opts, std::cout, std::cerr);
  if (name == "stability-sweep") return cmd_stability_sweep(opts, std::cout, std::cerr);
  if (name == "multitask") return cmd_multitask(opts, std::cout, std::cerr);
  throw std::invalid_argument("unknown command '" + name + "'");
}

}  // namespace

PYBIND11_MODULE(_qreg, m) {
  m.doc() = "Quantization as a regularizer: numeric kernels and experiment runner";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);

  m.def("quant_levels", &quant_levels, py::arg("bits"));
  m.def("fake_quantize", &fake_quantize_py, py::arg("x"), py::arg("bits"), py::arg("scale"),
        "Quantize then dequantize; `scale` is a scalar or one value per leading row.");
  m.def("weight_scales", [](const Array& w) { return weight_scales(to_tensor(w)); }, py::arg("w"));
  m.def("smooth_labels",
        [](const Array& y, double alpha, std::size_t classes) {
          return to_array(smooth_labels(to_tensor(y), alpha, classes));
        },
        py::arg("y"), py::arg("alpha"), py::arg("classes"));
  m.def("synth_blobs", &blobs_py, py::arg("classes"), py::arg("per_class"), py::arg("dims"),
        py::arg("separation"), py::arg("seed"), "Returns (features, labels).");
  m.def("inject_noise", &noise_py, py::arg("labels"), py::arg("classes"), py::arg("fraction"),
        py::arg("seed"), py::arg("exclude_original") = false, "Returns (noisy labels, corrupted rows).");
  m.def("check_config", [](const std::string& text) { parse_config(text).validate(); },
        py::arg("text"), "Raises ConfigError when the config text is invalid.");
  m.def("fingerprint",
        [](const std::string& text, const std::string& mode, double noise) {
          const ExperimentConfig cfg = parse_config(text);
          cfg.validate();
          JobSpec job;
          job.mode = parse_mode(mode);
          job.noise = noise;
          return fingerprint(cfg, job);
        },
        py::arg("text"), py::arg("mode") = "none", py::arg("noise") = 0.0);
  m.def("run", &run_command, py::arg("command"), py::arg("config"), py::arg("out") = py::none(),
        py::arg("seeds") = py::none(), py::arg("quiet") = true,
        "Runs a CLI command in process and returns its exit code.");
}
