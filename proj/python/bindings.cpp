#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cbvit/analysis.hpp"
#include "cbvit/context.hpp"
#include "cbvit/dataset.hpp"
#include "cbvit/ops.hpp"
#include "cbvit/train.hpp"

namespace py = pybind11;
using cbvit::Tensor;

namespace {

Tensor<double> tensor_from(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<int> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<std::size_t>(i)] = static_cast<int>(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor<double>(std::move(shape), std::move(data));
}

py::array_t<double> array_from(const Tensor<double>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

std::vector<double> vector_from(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  return std::vector<double>(a.data(), a.data() + a.size());
}

cbvit::Aggregation aggregation_of(const std::string& name) {
  if (name == "mean") return cbvit::Aggregation::mean;
  if (name == "max") return cbvit::Aggregation::max;
  if (name == "class_token") return cbvit::Aggregation::class_token;
  throw std::invalid_argument("unknown aggregation '" + name + "'");
}

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

}  // namespace

PYBIND11_MODULE(_cbvit, m) {
  m.doc() = "Context-broadcasting operators and attention-density diagnostics";

  // context broadcasting family
  m.def(
      "cb", [](const DArray& x, bool exclude_class) { return array_from(cbvit::cb(tensor_from(x), exclude_class)); },
      py::arg("x"), py::arg("exclude_class") = false,
      "(x_i + mean_j x_j) / 2 for every token row");
  m.def(
      "cb_s",
      [](const DArray& x, const DArray& lam, bool exclude_class) {
        return array_from(cbvit::cb_s(tensor_from(x), tensor_from(lam), exclude_class));
      },
      py::arg("x"), py::arg("lambda_vec"), py::arg("exclude_class") = false,
      "x_i + lambda ⊙ mean_j x_j");
  m.def(
      "cb_gate", [](const DArray& x) { return array_from(cbvit::cb_gate(tensor_from(x))); },
      py::arg("x"), "x_i ⊙ (x_0 + 1), class token at row 0");
  m.def(
      "cb_hybrid",
      [](const DArray& x, bool exclude_class) {
        return array_from(cbvit::cb_hybrid(tensor_from(x), exclude_class));
      },
      py::arg("x"), py::arg("exclude_class") = false, "x_i ⊙ x_0 + cb(x)_i");
  m.def(
      "aggregate_context",
      [](const DArray& x, const std::string& method, bool exclude_class) {
        return cbvit::aggregate_context(tensor_from(x), aggregation_of(method), exclude_class);
      },
      py::arg("x"), py::arg("method") = "mean", py::arg("exclude_class") = false,
      "context vector by mean / max / class_token aggregation");

  // numerics
  m.def(
      "softmax_rows",
      [](const DArray& s, double lam) { return array_from(cbvit::softmax_rows(tensor_from(s), lam)); },
      py::arg("s"), py::arg("scale") = 1.0, "row-wise stabilized softmax of scale * s");
  m.def(
      "gelu", [](const DArray& x) { return array_from(cbvit::gelu(tensor_from(x))); }, py::arg("x"),
      "exact erf-form GELU");
  m.def(
      "layer_norm",
      [](const DArray& x, const DArray& gamma, const DArray& beta, double eps) {
        return array_from(cbvit::layer_norm(tensor_from(x), tensor_from(gamma), tensor_from(beta), eps));
      },
      py::arg("x"), py::arg("gamma"), py::arg("beta"), py::arg("eps") = 1e-6);
  m.def("cosine_lr", &cbvit::cosine_lr, py::arg("step"), py::arg("total_steps"),
        py::arg("warmup_steps"), py::arg("base_lr"), py::arg("min_lr") = 0.0,
        "one-cycle cosine schedule with linear warmup");

  // attention-density diagnostics
  m.def(
      "attention_entropy",
      [](const DArray& a) { return cbvit::attention_entropy(vector_from(a)); }, py::arg("a"),
      "-sum a ln a in nats");
  m.def(
      "softmax_jacobian",
      [](const DArray& a, double lam) { return array_from(cbvit::softmax_jacobian(vector_from(a), lam)); },
      py::arg("a"), py::arg("scale") = 1.0, "lambda (diag(a) - a a^T)");
  m.def(
      "nuclear_norm_analytic",
      [](const DArray& a, double lam) { return cbvit::nuclear_norm_analytic(vector_from(a), lam); },
      py::arg("a"), py::arg("scale") = 1.0, "sum_j lambda (a_j - a_j^2)");
  m.def(
      "verify_uniform_maximality",
      [](int n, double lam, long trials, std::uint64_t seed) {
        const auto r = cbvit::verify_uniform_maximality(n, lam, trials, seed);
        py::dict d;
        d["bound"] = r.bound;
        d["max_found"] = r.max_found;
        d["argmax"] = r.argmax;
        d["margin"] = r.margin;
        d["uniform_gap"] = r.uniform_gap;
        d["checked"] = r.checked;
        d["violated"] = r.violated;
        return d;
      },
      py::arg("n"), py::arg("scale") = 1.0, py::arg("trials") = 10000, py::arg("seed") = 0,
      "probe the simplex for nuclear norms above the uniform-attention bound");
  m.def(
      "relative_distance",
      [](const DArray& a, int grid_side, bool renormalize) {
        return cbvit::relative_distance(tensor_from(a), cbvit::TokenPositions::grid(grid_side),
                                        renormalize);
      },
      py::arg("a"), py::arg("grid_side"), py::arg("renormalize") = false,
      "attention-weighted mean L1 token distance, self-interaction excluded");
  m.def(
      "scaling_stats",
      [](const std::vector<std::vector<double>>& lambda_vecs) {
        std::vector<std::pair<int, std::vector<double>>> input;
        for (std::size_t i = 0; i < lambda_vecs.size(); ++i)
          input.emplace_back(static_cast<int>(i), lambda_vecs[i]);
        py::list out;
        for (const auto& s : cbvit::scaling_stats(input)) {
          py::dict d;
          d["layer"] = s.layer;
          d["ratio"] = s.ratio ? py::object(py::float_(*s.ratio)) : py::object(py::none());
          d["mean"] = s.mean;
          out.append(d);
        }
        return out;
      },
      py::arg("lambda_vecs"), "per-layer |quantile| ratio q10/q90 and signed mean");

  // image ops
  m.def(
      "center_occlusion",
      [](const DArray& image, double fraction) {
        return array_from(cbvit::center_occlusion(tensor_from(image), fraction));
      },
      py::arg("image"), py::arg("fraction"), "zero the centered square block of an [H,W,C] image");
}
