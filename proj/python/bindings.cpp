#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "prunekit/checkpoint.hpp"
#include "prunekit/config.hpp"
#include "prunekit/dataset.hpp"
#include "prunekit/error.hpp"
#include "prunekit/groups.hpp"
#include "prunekit/pipeline.hpp"
#include "prunekit/train.hpp"

namespace py = pybind11;
using namespace prunekit;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  if (a.ndim() != 4) throw Error(ErrorCode::kArgument, "expected an (N, C, H, W) array");
  Shape shape;
  for (py::ssize_t d = 0; d < a.ndim(); ++d) shape.push_back(static_cast<int>(a.shape(d)));
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict cost_dict(const CostReport& r) {
  py::list layers;
  for (const auto& l : r.layers) {
    py::dict d;
    d["id"] = l.id;
    d["kind"] = to_string(l.kind);
    d["out_channels"] = l.out_channels;
    d["flops"] = l.flops;
    d["params"] = l.params;
    layers.append(d);
  }
  py::dict d;
  d["flops"] = r.flops;
  d["params"] = r.params;
  d["layers"] = layers;
  return d;
}

py::list records(const RunLog& log) {
  py::list out;
  for (const auto& r : log.records) {
    py::dict d;
    d["phase"] = r.phase;
    d["index"] = r.index;
    d["epochs"] = r.epochs;
    d["loss"] = r.loss;
    d["test_accuracy"] = r.test_accuracy;
    d["alive"] = r.alive;
    d["removed"] = r.removed;
    d["flops"] = r.flops;
    d["params"] = r.params;
    d["mean_abs_phi_before"] = r.mean_abs_phi_before;
    d["mean_abs_phi_after"] = r.mean_abs_phi_after;
    out.append(d);
  }
  return out;
}

std::map<std::string, int> conv_widths(const ModelSpec& spec) {
  std::map<std::string, int> out;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::kConv2d) out[l.id] = l.out_channels;
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_prunekit, m) {
  m.doc() = "Gate-decorated filter pruning for small CNNs.";

  static py::handle error = py::exception<Error>(m, "PrunekitError").release();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error)(py::str(e.what()));
      exc.attr("code") = to_string(e.code());
      PyErr_SetObject(error.ptr(), exc.ptr());
    }
  });

  py::class_<DatasetBundle>(m, "Dataset")
      .def_property_readonly("classes", [](const DatasetBundle& d) { return d.classes; })
      .def_property_readonly("train_size", [](const DatasetBundle& d) { return d.train.size(); })
      .def_property_readonly("test_size", [](const DatasetBundle& d) { return d.test.size(); })
      .def_property_readonly("image_shape",
                             [](const DatasetBundle& d) {
                               const FeatureShape s = d.image_shape();
                               return py::make_tuple(s.channels, s.height, s.width);
                             })
      .def("test_images", [](const DatasetBundle& d) { return to_array(d.test.images); })
      .def("test_labels", [](const DatasetBundle& d) { return d.test.labels; })
      .def("save", [](const DatasetBundle& d, const std::filesystem::path& p) { save_dataset(d, p); });

  m.def(
      "generate_synthetic",
      [](int classes, int per_class, int image_size, std::uint64_t seed, double noise) {
        SyntheticOptions o;
        o.classes = classes;
        o.per_class = per_class;
        o.image_size = image_size;
        o.seed = seed;
        o.noise = noise;
        return generate_synthetic(o);
      },
      py::arg("classes") = 4, py::arg("per_class") = 500, py::arg("image_size") = 16, py::arg("seed") = 7,
      py::arg("noise") = 0.3);
  m.def("load_dataset", [](const std::filesystem::path& p) { return load_dataset(p); });

  py::class_<Network>(m, "Network")
      .def_property_readonly("conv_widths", [](const Network& n) { return conv_widths(n.spec()); })
      .def_property_readonly("layer_ids",
                             [](const Network& n) {
                               std::vector<std::string> ids;
                               for (const auto& l : n.spec().layers) ids.push_back(l.id);
                               return ids;
                             })
      .def_property_readonly("gated_modules", [](const Network& n) { return gated_modules(n.spec()); })
      .def("logits", [](Network& n, const FloatArray& x) { return to_array(n.logits(to_tensor(x))); })
      .def("cost", [](const Network& n) { return cost_dict(cost_report(n.spec())); })
      .def("groups_json", [](const Network& n) { return groups_to_json(discover_groups(n.spec())); })
      .def("decorate", [](const Network& n, const std::string& mode) { return decorate_model(n, parse_gate_mode(mode)); },
           py::arg("mode") = "gbn")
      .def("undecorate", [](const Network& n) { return undecorate_model(n); })
      .def("save",
           [](const Network& n, const std::filesystem::path& p, std::uint64_t seed, double accuracy) {
             CheckpointMeta meta;
             meta.seed = seed;
             meta.accuracy = accuracy;
             save_checkpoint(n, meta, p);
           },
           py::arg("path"), py::arg("seed") = 0, py::arg("accuracy") = 0.0);

  m.def(
      "build_model",
      [](const std::map<std::string, std::string>& config, const DatasetBundle& data, std::uint64_t seed) {
        const TrainConfig c = train_config(config);
        return Network::initialize(build_model(c, data.image_shape(), data.classes), seed);
      },
      py::arg("config"), py::arg("data"), py::arg("seed") = 1);
  m.def("load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p).network; });

  m.def(
      "train",
      [](Network& net, const DatasetBundle& data, const std::map<std::string, std::string>& config) {
        const TrainConfig c = train_config(config);
        py::gil_scoped_release release;
        const auto epochs = train(net, data, data.train, c.train);
        std::vector<double> losses;
        for (const auto& e : epochs) losses.push_back(e.mean_loss);
        return losses;
      },
      py::arg("net"), py::arg("data"), py::arg("config") = std::map<std::string, std::string>{});
  m.def(
      "evaluate",
      [](Network& net, const DatasetBundle& data) {
        py::gil_scoped_release release;
        return evaluate(net, data, data.test);
      },
      py::arg("net"), py::arg("data"));

  m.def(
      "prune",
      [](const Network& baseline, const DatasetBundle& data, const std::map<std::string, std::string>& config) {
        const PipelineConfig c = pipeline_config(config);
        std::optional<PipelineResult> r;
        {
          py::gil_scoped_release release;
          r = run(c, baseline, data);
        }
        py::dict d;
        d["model"] = r->merged;
        d["baseline_accuracy"] = r->baseline_accuracy;
        d["final_accuracy"] = r->final_accuracy;
        d["flops_reduction"] = flops_reduction(r->final_cost, r->baseline_cost);
        d["params_reduction"] = params_reduction(r->final_cost, r->baseline_cost);
        d["merge_max_abs_diff"] = r->merge_max_abs_diff;
        d["partial"] = r->partial;
        d["note"] = r->note;
        d["log"] = records(r->log);
        d["importance_csv"] = r->importance_exports;
        return d;
      },
      py::arg("baseline"), py::arg("data"), py::arg("config") = std::map<std::string, std::string>{});
}
