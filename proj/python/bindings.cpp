#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "semnerf/inference_service.hpp"

namespace py = pybind11;
using namespace semnerf;

namespace {

using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

SemanticMask mask_from(const ByteArray& labels) {
  if (labels.ndim() != 2) throw py::value_error("mask must be a 2-D uint8 array");
  SemanticMask m{ByteGrid(static_cast<int>(labels.shape(0)), static_cast<int>(labels.shape(1))), LabelTable::synthetic()};
  std::memcpy(m.labels.data.data(), labels.data(), m.labels.data.size());
  m.validate();
  return m;
}

ByteArray to_array(const ByteGrid& g) {
  ByteArray out({g.height, g.width});
  std::memcpy(out.mutable_data(), g.data.data(), g.data.size());
  return out;
}

FloatArray to_array(const Image& img) {
  FloatArray out({img.height, img.width, img.channels});
  std::memcpy(out.mutable_data(), img.data.data(), img.data.size() * sizeof(float));
  return out;
}

Image image_from(const FloatArray& a) {
  if (a.ndim() != 3) throw py::value_error("image must be (H, W, C)");
  Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
  std::memcpy(img.data.data(), a.data(), img.data.size() * sizeof(float));
  return img;
}

ByteGrid contour_of(const ByteArray& labels, int thickness) {
  return build_contour(one_hot(mask_from(labels), LabelTable::synthetic().size()), thickness);
}

FloatArray style_array(const StyleCode<float>& s) {
  FloatArray out({s.layers(), 2, s.width()});
  std::memcpy(out.mutable_data(), s.flat().data(), static_cast<std::size_t>(s.flat().size()) * sizeof(float));
  return out;
}

StyleCode<float> style_from(const Model& m, const FloatArray& a) {
  const int layers = m.field.config().layers, width = m.field.config().width;
  if (a.size() != 2 * layers * width) throw py::value_error("style has the wrong size");
  StyleCode<float> s(layers, width);
  std::memcpy(s.flat().data(), a.data(), static_cast<std::size_t>(a.size()) * sizeof(float));
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.attr("__version__") = kServiceVersion;

  static py::exception<Error> semnerf_error(m, "SemnerfError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::kInput || e.kind() == ErrorKind::kData || e.kind() == ErrorKind::kRequest)
        PyErr_SetString(PyExc_ValueError, e.what());
      else
        semnerf_error(e.what());
    }
  });

  py::class_<CameraPose>(m, "CameraPose")
      .def(py::init([](double yaw, double pitch, double roll) {
             CameraPose p;
             p.yaw = yaw, p.pitch = pitch, p.roll = roll;
             p.validate();
             return p;
           }),
           py::arg("yaw") = CameraPose{}.yaw, py::arg("pitch") = CameraPose{}.pitch, py::arg("roll") = 0.0)
      .def_readwrite("yaw", &CameraPose::yaw)
      .def_readwrite("pitch", &CameraPose::pitch)
      .def_readwrite("roll", &CameraPose::roll)
      .def_readwrite("fov_degrees", &CameraPose::fov_degrees)
      .def("__repr__", [](const CameraPose& p) {
        return "CameraPose(yaw=" + std::to_string(p.yaw) + ", pitch=" + std::to_string(p.pitch) +
               ", roll=" + std::to_string(p.roll) + ")";
      });

  m.def("label_names", [] { return LabelTable::synthetic().names; });
  m.def("read_mask", [](const std::filesystem::path& p) { return to_array(read_png_gray(p)); });
  m.def("build_contour", [](const ByteArray& labels, int thickness) { return to_array(contour_of(labels, thickness)); }, py::arg("labels"), py::arg("thickness") = kDefaultContourThickness);
  m.def("squared_distance_transform", [](const ByteArray& contour) {
    if (contour.ndim() != 2) throw py::value_error("contour must be 2-D");
    ByteGrid g(static_cast<int>(contour.shape(0)), static_cast<int>(contour.shape(1)));
    std::memcpy(g.data.data(), contour.data(), g.data.size());
    const auto d = squared_distance_transform(g);
    py::array_t<std::int64_t> out({g.height, g.width});
    std::memcpy(out.mutable_data(), d.data(), d.size() * sizeof(std::int64_t));
    return out;
  });
  m.def("distance_field", [](const ByteArray& labels, int thickness) {
    const DistanceField f = build_distance_field(contour_of(labels, thickness));
    FloatArray out({f.height, f.width});
    std::memcpy(out.mutable_data(), f.values.data(), f.values.size() * sizeof(float));
    return out;
  }, py::arg("labels"), py::arg("thickness") = kDefaultContourThickness);
  m.def("psnr", [](const FloatArray& a, const FloatArray& b) { return psnr(image_from(a), image_from(b)); });

  m.def("render_homogeneous", [](double sigma, int samples) {
    const Ray ray{Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitZ(), 0.0, 1.0};
    const auto depths = stratified_depths(ray, samples, nullptr);
    const std::vector<double> dens(samples, sigma);
    const std::vector<Eigen::Vector3d> color(samples, Eigen::Vector3d(1, 1, 1));
    return composite(depths, dens, color, 1.0).pixel.x();
  }, py::arg("sigma"), py::arg("samples"), "Opacity of a unit-length homogeneous white medium.");

  m.def("build_dataset", [](const std::filesystem::path& out, int n_train, int n_test, std::uint64_t seed, int size) {
    DatasetConfig c;
    c.n_train = n_train, c.n_test = n_test, c.seed = seed;
    if (size > 0) c.render.image_size = size;
    py::gil_scoped_release release;
    return build_dataset(c, out).dump();
  }, py::arg("out"), py::arg("n_train"), py::arg("n_test"), py::arg("seed") = 0, py::arg("size") = 0,
        "Writes a synthetic dataset; returns the manifest as JSON text.");

  py::class_<Model, std::shared_ptr<Model>>(m, "Model")
      .def_static("load", [](const std::filesystem::path& p) { return std::make_shared<Model>(Model::load(p)); })
      .def_readonly("checkpoint_hash", &Model::checkpoint_hash)
      .def_property_readonly("style_shape", [](const Model& self) {
        return py::make_tuple(self.field.config().layers, 2, self.field.config().width);
      })
      .def("encode", [](const Model& self, const ByteArray& labels) {
        return style_array(encode_mask(self, mask_from(labels)));
      })
      .def("render", [](const Model& self, const FloatArray& style, const std::vector<CameraPose>& poses, int size,
                        int steps, bool hierarchical) {
        ViewOptions v;
        v.size = size, v.steps = steps, v.hierarchical = hierarchical;
        const StyleCode<float> s = style_from(self, style);
        std::vector<RenderedImage> out;
        {
          py::gil_scoped_release release;
          out = render_views(self, s, poses, v);
        }
        py::list images;
        for (const auto& r : out) images.append(to_array(r.color));
        return images;
      }, py::arg("style"), py::arg("poses"), py::arg("size") = 32, py::arg("steps") = 72,
           py::arg("hierarchical") = false)
      .def("mix", [](const Model& self, const FloatArray& style, std::uint64_t seed, int layer, double t, double psi) {
        StyleMixSpec spec;
        spec.seed = seed, spec.layer = layer, spec.t = t, spec.psi = psi;
        return style_array(style_mix(style_from(self, style), spec, self.averages, self.field));
      }, py::arg("style"), py::arg("seed"), py::arg("layer") = 0, py::arg("t") = 1.0, py::arg("psi") = 1.0);
}
