// Python bindings for the fedtl core.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fedtl/data.hpp"
#include "fedtl/errors.hpp"
#include "fedtl/federation.hpp"
#include "fedtl/gradcheck.hpp"
#include "fedtl/nn.hpp"
#include "fedtl/simulator.hpp"
#include "fedtl/wire.hpp"

namespace py = pybind11;
using namespace fedtl;

namespace {

py::bytes to_bytes(const std::vector<std::uint8_t>& data) {
  return py::bytes(reinterpret_cast<const char*>(data.data()), data.size());
}

std::vector<std::uint8_t> from_bytes(const py::bytes& data) {
  const std::string_view view = data;
  return {view.begin(), view.end()};
}

InitMode init_mode(const std::string& kind, std::uint64_t seed,
                   const std::optional<ModelBlob>& blob) {
  if (kind == "zeros") return init::Zeros{};
  if (kind == "random") return init::Random{seed};
  if (kind == "pretrained") {
    if (!blob) throw UsageError("pretrained init needs a blob");
    return pretrained(*blob);
  }
  throw UsageError("unknown init mode '" + kind + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dense-head federated transfer learning core";

  auto base = py::register_exception<Error>(m, "FedtlError", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<UsageError>(m, "UsageError", base);
  py::register_exception<IndexError>(m, "IndexError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<EncodingError>(m, "EncodingError", base);
  py::register_exception<ProtocolError>(m, "ProtocolError", base);
  py::register_exception<TruncationError>(m, "TruncationError", base);
  py::register_exception<CorruptionError>(m, "CorruptionError", base);
  py::register_exception<SequencingError>(m, "SequencingError", base);
  py::register_exception<IncompleteStreamError>(m, "IncompleteStreamError", base);
  py::register_exception<DataExhaustedError>(m, "DataExhaustedError", base);
  py::register_exception<ParseError>(m, "ParseError", base);
  py::register_exception<IoError>(m, "IoError", base);

  py::class_<EmbeddingSample>(m, "EmbeddingSample")
      .def(py::init<std::vector<double>, std::size_t>(), py::arg("features"),
           py::arg("label"))
      .def_readwrite("features", &EmbeddingSample::features)
      .def_readwrite("label", &EmbeddingSample::label)
      .def("__eq__", [](const EmbeddingSample& a, const EmbeddingSample& b) { return a == b; });

  py::class_<DenseHead>(m, "DenseHead")
      .def(py::init<std::size_t, std::size_t>(), py::arg("embedding_dim"),
           py::arg("num_classes"))
      .def_property_readonly("embedding_dim", &DenseHead::embedding_dim)
      .def_property_readonly("num_classes", &DenseHead::num_classes)
      .def_property_readonly("parameter_count", &DenseHead::parameter_count)
      .def_property_readonly("weights", [](const DenseHead& h) {
        return std::vector<double>(h.weights().begin(), h.weights().end());
      })
      .def_property_readonly("bias", [](const DenseHead& h) {
        return std::vector<double>(h.bias().begin(), h.bias().end());
      })
      .def("__eq__", [](const DenseHead& a, const DenseHead& b) { return a == b; });

  py::class_<Gradients>(m, "Gradients")
      .def_readonly("d_weights", &Gradients::d_weights)
      .def_readonly("d_bias", &Gradients::d_bias);

  py::class_<ModelBlob>(m, "ModelBlob")
      .def(py::init([](std::size_t e, std::size_t c, std::vector<double> values) {
             ModelBlob b{e, c, std::move(values)};
             b.validate();
             return b;
           }),
           py::arg("embedding_dim"), py::arg("num_classes"), py::arg("values"))
      .def_readonly("embedding_dim", &ModelBlob::embedding_dim)
      .def_readonly("num_classes", &ModelBlob::num_classes)
      .def_readonly("values", &ModelBlob::values)
      .def("__eq__", [](const ModelBlob& a, const ModelBlob& b) { return a == b; })
      .def("__repr__", [](const ModelBlob& b) {
        return "<ModelBlob " + std::to_string(b.num_classes) + "x" +
               std::to_string(b.embedding_dim) + ">";
      });

  m.def("init_head", [](std::size_t e, std::size_t c, const std::string& mode,
                        std::uint64_t seed, const std::optional<ModelBlob>& blob) {
          return init_head(e, c, init_mode(mode, seed, blob));
        },
        py::arg("embedding_dim"), py::arg("num_classes"), py::arg("mode") = "zeros",
        py::arg("seed") = 0, py::arg("blob") = std::nullopt);
  m.def("forward", [](const DenseHead& h, const std::vector<double>& x) { return forward(h, x); });
  m.def("softmax", [](const std::vector<double>& z) { return softmax(z); });
  m.def("cross_entropy", [](const std::vector<double>& p, std::size_t label) {
    return cross_entropy(p, label);
  });
  m.def("backward", [](const DenseHead& h, const std::vector<double>& x,
                       const std::vector<double>& p, std::size_t label) {
    return backward(h, x, p, label);
  });
  m.def("sgd_step", &sgd_step, py::arg("head"), py::arg("gradients"), py::arg("lr"));
  m.def("train_batch", [](const DenseHead& h, const std::vector<EmbeddingSample>& batch,
                          double lr, std::size_t episodes) {
          return train_batch(h, batch, lr, episodes);
        },
        py::arg("head"), py::arg("batch"), py::arg("lr") = kDefaultLearningRate,
        py::arg("local_episodes") = 1);
  m.def("predict", [](const DenseHead& h, const std::vector<double>& x) { return predict(h, x); });
  m.def("footprint_bytes", &footprint_bytes);

  m.def("to_blob", &to_blob);
  m.def("to_head", &to_head);
  m.def("average_blobs", [](const std::vector<ModelBlob>& blobs) { return average_blobs(blobs); });
  m.def("evaluate", [](const ModelBlob& b, const std::vector<EmbeddingSample>& s) {
    return evaluate(b, s);
  });

  m.def("crc32", [](const py::bytes& data) { return crc32(from_bytes(data)); });
  m.def("encode_model", [](const ModelBlob& b) { return to_bytes(encode_model(b)); });
  m.def("decode_model", [](const py::bytes& data) { return decode_model(from_bytes(data)); });
  m.def("pack_model", [](const ModelBlob& b) { return to_bytes(pack_model(b)); });
  m.def("unpack_model", [](const py::bytes& data) { return unpack_model(from_bytes(data)); });
  m.def("frame_bytes", [](const py::bytes& data) {
    return to_bytes(serialize_frames(frame_stream(from_bytes(data))));
  });
  m.def("unframe_bytes", [](const py::bytes& data) {
    return to_bytes(unframe_stream(parse_frames(from_bytes(data))));
  });
  m.def("encoded_size", &encoded_size);

  py::enum_<Split>(m, "Split")
      .value("train", Split::train)
      .value("validation", Split::validation);

  py::class_<EmbeddingDataset>(m, "EmbeddingDataset")
      .def_readonly("name", &EmbeddingDataset::name)
      .def_readonly("embedding_dim", &EmbeddingDataset::embedding_dim)
      .def_readonly("num_classes", &EmbeddingDataset::num_classes)
      .def_readonly("samples", &EmbeddingDataset::samples)
      .def_readonly("splits", &EmbeddingDataset::splits)
      .def("__len__", &EmbeddingDataset::size)
      .def("subset", &EmbeddingDataset::subset)
      .def("indices", &EmbeddingDataset::indices);

  m.def("synth_separable", &synth_separable, py::arg("embedding_dim"),
        py::arg("num_classes"), py::arg("count"), py::arg("margin") = 1.0,
        py::arg("seed") = 0);
  m.def("synth_sparse", &synth_sparse, py::arg("embedding_dim"), py::arg("active_dims"),
        py::arg("num_classes"), py::arg("count"), py::arg("seed") = 0,
        py::arg("margin") = 1.0);
  m.def("hold_out_tail", [](EmbeddingDataset ds, std::size_t count) {
    hold_out_tail(ds, count);
    return ds;
  });
  m.def("active_dimensions", &active_dimensions);
  m.def("partition", [](const EmbeddingDataset& ds, std::size_t n, std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> shards;
    for (const auto& s : partition(ds, n, seed)) {
      shards.emplace_back(s.indices().begin(), s.indices().end());
    }
    return shards;
  });
  m.def("save_dataset", &save_dataset);
  m.def("load_dataset", &load_dataset);

  m.def("preset_names", [] {
    std::vector<std::string> names;
    for (const auto& [name, cfg] : default_presets()) names.push_back(name);
    return names;
  });
  m.def("describe_preset", [](const std::string& name) {
    return describe(default_presets().at(name));
  });
  m.def("run_sweep_csv",
        [](const std::string& config_text, const std::string& preset) {
          ExperimentConfig base;
          if (!preset.empty()) {
            const auto presets = default_presets();
            const auto it = presets.find(preset);
            if (it == presets.end()) throw UsageError("unknown preset '" + preset + "'");
            base = it->second;
          }
          const auto cfg = parse_config(config_text, base);
          py::gil_scoped_release release;
          return format_csv(run_sweep(cfg));
        },
        py::arg("config") = "", py::arg("preset") = "",
        "Runs a sweep from key = value settings (optionally on top of a preset) "
        "and returns the CSV text.");

  m.def("gradcheck", [](std::size_t trials, std::uint64_t seed) {
          GradcheckOptions o;
          o.trials = trials;
          o.seed = seed;
          const auto r = gradcheck(o);
          return py::dict(py::arg("trials") = r.trials,
                          py::arg("coordinates") = r.coordinates,
                          py::arg("max_relative_error") = r.max_relative_error);
        },
        py::arg("trials") = 100, py::arg("seed") = 7);
}
