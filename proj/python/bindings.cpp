#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "rtcnn/data.hpp"
#include "rtcnn/pipeline.hpp"
#include "rtcnn/saliency.hpp"
#include "rtcnn/serialize.hpp"
#include "rtcnn/training.hpp"

namespace py = pybind11;
using namespace rtcnn;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    Shape s;
    switch (a.ndim()) {
        case 2: s = {1, 1, static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))}; break;
        case 3:
            s = {static_cast<std::size_t>(a.shape(0)), 1, static_cast<std::size_t>(a.shape(1)),
                 static_cast<std::size_t>(a.shape(2))};
            break;
        case 4:
            s = {static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                 static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3))};
            break;
        default: throw py::value_error("expected a 2-D (h, w), 3-D (n, h, w) or 4-D (n, c, h, w) array");
    }
    return Tensor(s, std::vector<float>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const BasicTensor<T>& t) {
    const Shape s = t.shape();
    py::array_t<T> out({s.n, s.c, s.h, s.w});
    std::memcpy(out.mutable_data(), t.data().data(), t.size() * sizeof(T));
    return out;
}

py::array_t<std::uint8_t> image_to_array(const Image& img) {
    std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(img.height), static_cast<py::ssize_t>(img.width)};
    if (img.channels != 1) shape.push_back(static_cast<py::ssize_t>(img.channels));
    py::array_t<std::uint8_t> out(shape);
    std::memcpy(out.mutable_data(), img.pixels.data(), img.pixels.size());
    return out;
}

Image array_to_image(const ByteArray& a) {
    if (a.ndim() != 2 && !(a.ndim() == 3 && (a.shape(2) == 1 || a.shape(2) == 3)))
        throw py::value_error("expected an (h, w) or (h, w, channels) uint8 array");
    Image img(static_cast<std::size_t>(a.shape(1)), static_cast<std::size_t>(a.shape(0)),
              a.ndim() == 3 ? static_cast<std::size_t>(a.shape(2)) : 1);
    std::memcpy(img.pixels.data(), a.data(), img.pixels.size());
    return img;
}

py::dict history_entry(const EpochRecord& r) {
    py::dict d;
    d["epoch"] = r.epoch;
    d["train_loss"] = r.train_loss;
    d["train_acc"] = r.train_acc;
    d["val_acc"] = r.val_acc ? py::cast(*r.val_acc) : py::none();
    d["lr"] = r.lr;
    return d;
}

}  // namespace

PYBIND11_MODULE(_rtcnn, m) {
    m.doc() = "Bindings for the rtcnn C++ library";

    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

    py::class_<Model>(m, "Model")
        .def_property_readonly("architecture", [](const Model& self) { return self.metadata().architecture; })
        .def_property_readonly("class_names", [](const Model& self) { return self.metadata().class_names; })
        .def_property_readonly("input_size", [](const Model& self) { return self.metadata().input.h; })
        .def_property_readonly("num_classes", &Model::num_classes)
        .def_property_readonly("fully_connected", [](const Model& self) { return fully_connected_nodes(self); })
        .def("predict", [](const Model& self, const FloatArray& x) { return to_array(predict(self, to_tensor(x))); },
             py::arg("x"), "Class probabilities, shape (n, classes), for inputs scaled to [-1, 1].")
        .def(
            "predict_image",
            [](const Model& self, const ByteArray& img) {
                return to_array(predict(self, preprocess(array_to_image(img), self.metadata().input.h)));
            },
            py::arg("image"))
        .def("save", [](const Model& self, const std::filesystem::path& p) { return save_weights(self, p); })
        .def("layers",
             [](const Model& self) {
                 py::list out;
                 for (const auto& r : summarize(self)) {
                     py::dict d;
                     d["name"] = r.name;
                     d["kind"] = to_string(r.kind);
                     d["output"] = py::make_tuple(r.output.c, r.output.h, r.output.w);
                     d["params"] = r.params;
                     d["macs"] = r.macs;
                     out.append(d);
                 }
                 return out;
             })
        .def("__repr__", [](const Model& self) {
            return "<rtcnn.Model " + self.metadata().architecture + " classes=" + std::to_string(self.num_classes()) +
                   " params=" + std::to_string(count_parameters(self)) + ">";
        });

    m.def("build", [](const std::string& arch, std::size_t classes, std::size_t input, std::uint64_t seed) {
        return build_architecture<float>(arch, classes, input, seed);
    }, py::arg("arch") = kMiniXception, py::arg("classes") = 7, py::arg("input") = 48, py::arg("seed") = 1);
    m.def("count_parameters", [](const Model& model) { return count_parameters(model); });
    m.def("load_weights", [](const std::filesystem::path& p) { return load_weights(p); });
    m.def("crc32", [](py::bytes b) {
        const std::string s = b;
        return crc32(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    });
    m.def(
        "separable_cost_ratio",
        [](std::size_t kernel, std::size_t in_channels, std::size_t out_channels) {
            const Rational r = separable_cost_ratio({kernel, in_channels, out_channels, 1, Padding::Same, false}, 1, 1);
            return py::make_tuple(r.num, r.den);
        },
        py::arg("kernel"), py::arg("in_channels"), py::arg("out_channels"),
        "Separable over standard multiply count as a reduced (numerator, denominator) pair.");

    py::class_<Dataset>(m, "Dataset")
        .def("__len__", &Dataset::size)
        .def_readonly("class_names", &Dataset::class_names)
        .def_property_readonly("labels",
                               [](const Dataset& self) {
                                   std::vector<std::size_t> out;
                                   for (const auto& s : self.samples) out.push_back(s.label);
                                   return out;
                               })
        .def_property_readonly("images", [](const Dataset& self) {
            std::vector<std::size_t> all(self.size());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
            return to_array(self.batch(all));
        });

    m.def(
        "load_fer2013",
        [](const std::filesystem::path& p, std::optional<std::string> usage, std::size_t limit, bool lenient) {
            FerOptions opts;
            opts.usage = std::move(usage);
            opts.limit = limit;
            opts.lenient = lenient;
            return load_fer2013(p, opts);
        },
        py::arg("path"), py::arg("usage") = py::none(), py::arg("limit") = 0, py::arg("lenient") = false);
    m.def("load_manifest", &load_manifest, py::arg("path"), py::arg("class_names"), py::arg("target") = 48);

    m.def(
        "train",
        [](Model& model, const Dataset& data, std::size_t epochs, std::size_t batch_size, double lr,
           std::uint64_t seed, double validation_fraction, std::optional<double> target_accuracy,
           std::optional<std::filesystem::path> checkpoint) {
            TrainConfig cfg;
            cfg.epochs = epochs;
            cfg.batch_size = batch_size;
            cfg.lr = lr;
            cfg.seed = seed;
            cfg.validation_fraction = validation_fraction;
            cfg.target_train_accuracy = target_accuracy;
            cfg.checkpoint = std::move(checkpoint);
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = train(model, data, cfg);
            }
            py::list history;
            for (const auto& e : r.history) history.append(history_entry(e));
            return history;
        },
        py::arg("model"), py::arg("data"), py::arg("epochs") = 10, py::arg("batch_size") = 32, py::arg("lr") = 1e-3,
        py::arg("seed") = 1, py::arg("validation_fraction") = 0.2, py::arg("target_accuracy") = py::none(),
        py::arg("checkpoint") = py::none(), "Trains in place and returns the per-epoch history.");

    m.def(
        "evaluate",
        [](const Model& model, const Dataset& data) {
            const EvalResult r = evaluate(model, data);
            const std::size_t k = r.cm.size();
            py::array_t<std::uint64_t> counts({k, k});
            std::memcpy(counts.mutable_data(), r.cm.counts.data(), r.cm.counts.size() * sizeof(std::uint64_t));
            return py::make_tuple(r.accuracy, counts);
        },
        "(accuracy, confusion counts with rows = true class)");

    m.def(
        "saliency",
        [](const Model& model, const FloatArray& x, const std::string& mode, const std::string& layer) {
            const auto map = saliency(model, to_tensor(x), relu_mode_from_string(mode), layer);
            return py::make_tuple(to_array(map.R), map.target.layer,
                                  py::make_tuple(map.target.at.c, map.target.at.y, map.target.at.x));
        },
        py::arg("model"), py::arg("x"), py::arg("mode") = "guided", py::arg("layer") = "",
        "(map shaped like x, target layer, (channel, y, x) of the target activation)");

    m.def(
        "preprocess",
        [](const ByteArray& img, std::size_t target) { return to_array(preprocess(array_to_image(img), target)); },
        py::arg("image"), py::arg("target") = 48);
    m.def("read_pgm", [](const std::filesystem::path& p) { return image_to_array(read_pgm(p)); });
    m.def("write_pgm", [](const ByteArray& img, const std::filesystem::path& p) { write_pgm(array_to_image(img), p); });

    py::class_<LatencyStats>(m, "LatencyStats")
        .def_readonly("mean_us", &LatencyStats::mean_us)
        .def_readonly("stddev_us", &LatencyStats::stddev_us)
        .def_readonly("min_us", &LatencyStats::min_us)
        .def_readonly("max_us", &LatencyStats::max_us)
        .def_readonly("iterations", &LatencyStats::iterations);
    m.def("time_forward", &time_forward, py::arg("model"), py::arg("iterations") = 100, py::arg("warmup") = 3,
          py::call_guard<py::gil_scoped_release>());
}
