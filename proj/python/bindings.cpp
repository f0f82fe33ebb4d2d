#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cli.hpp"
#include "smvit/config_json.hpp"
#include "smvit/dataset.hpp"
#include "smvit/gradsuite.hpp"
#include "smvit/model.hpp"
#include "smvit/view.hpp"

namespace py = pybind11;
using namespace smvit;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

data::Image to_image(const FloatArray& a) {
  if (a.ndim() != 2) throw py::value_error("image must be 2-D");
  data::Image img(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

FloatArray from_image(const data::Image& img) {
  FloatArray out({img.height, img.width});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

view::FeatureBatch to_batch(const DoubleArray& a, int view_angle) {
  if (a.ndim() != 2) throw py::value_error("features must be 2-D [rows, dim]");
  view::FeatureBatch b;
  b.view = view_angle;
  b.feat_dim = a.shape(1);
  b.rows.assign(a.data(), a.data() + a.size());
  b.keys.resize(a.shape(0));
  for (std::size_t i = 0; i < b.keys.size(); ++i) b.keys[i].frame = static_cast<std::uint32_t>(i);
  return b;
}

DoubleArray to_array(const std::vector<double>& v) {
  DoubleArray out(v.size());
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Tensor<float> frames_from(const FloatArray& a) {
  if (a.ndim() != 3) throw py::value_error("frames must be 3-D [N, H, W]");
  std::vector<float> v(a.data(), a.data() + a.size());
  return Tensor<float>::from({static_cast<std::size_t>(a.shape(0)), 1, static_cast<std::size_t>(a.shape(1)),
                              static_cast<std::size_t>(a.shape(2))},
                             std::move(v));
}

model::SmvitConfig preset(const std::string& name, std::size_t subjects) {
  if (name == "desk") return model::SmvitConfig::desk(subjects);
  if (name == "compact") return model::SmvitConfig::compact(subjects);
  if (name == "miniature") return model::SmvitConfig::miniature(subjects);
  throw py::value_error("unknown preset '" + name + "' (desk, compact, miniature)");
}

/// Float32 model with its frames given as numpy arrays.
class PyModel {
 public:
  PyModel(const model::SmvitConfig& cfg, std::uint64_t seed) : model_(cfg, seed) {}

  py::array_t<float> embed(const FloatArray& frames) {
    Tensor<float> e;
    {
      NoGradGuard g;
      e = model_.embed(frames_from(frames), BnMode::Infer);
    }
    py::array_t<float> out({e.shape()[0], e.shape()[1]});
    std::copy(e.data().begin(), e.data().end(), out.mutable_data());
    return out;
  }

  py::array_t<float> logits(const FloatArray& frames, int view_angle, const view::FactorRegistry* registry) {
    const auto l = model_.logits(frames_from(frames), view_angle, registry);
    py::array_t<float> out({l.shape()[0], l.shape()[1]});
    std::copy(l.data().begin(), l.data().end(), out.mutable_data());
    return out;
  }

  std::vector<std::size_t> predict(const FloatArray& frames, int view_angle, const view::FactorRegistry* registry) {
    return model_.predict(frames_from(frames), view_angle, registry);
  }

  model::SmvitModel<float>& get() { return model_; }

 private:
  model::SmvitModel<float> model_;
};

}  // namespace

PYBIND11_MODULE(_smvit, m) {
  m.doc() = "Siamese mobile vision transformer for multi-view gait recognition";

  py::register_exception<Error>(m, "SmvitError", PyExc_RuntimeError);

  m.def(
      "synth",
      [](std::size_t n_subjects, std::vector<int> views, std::size_t frames_per_sequence, std::size_t height,
         std::size_t width, std::uint64_t seed, std::vector<std::string> conditions, double occlusion_strength) {
        data::SynthSpec s;
        s.n_subjects = n_subjects;
        s.views = std::move(views);
        s.frames_per_sequence = frames_per_sequence;
        s.height = height;
        s.width = width;
        s.seed = seed;
        s.occlusion_strength = occlusion_strength;
        s.conditions.clear();
        for (const auto& c : conditions) {
          Condition k;
          if (!parse_condition(c, k)) throw py::value_error("unknown condition '" + c + "'");
          s.conditions.push_back(k);
        }
        const auto frames = data::synth_generate(s);
        py::array_t<float> images({frames.size(), height, width});
        std::vector<std::size_t> labels;
        std::vector<int> frame_views;
        std::vector<std::string> subjects, conds;
        float* dst = images.mutable_data();
        for (const auto& f : frames) {
          dst = std::copy(f.image.pixels.begin(), f.image.pixels.end(), dst);
          labels.push_back(f.label);
          frame_views.push_back(f.view);
          subjects.push_back(f.key.subject);
          conds.emplace_back(condition_name(f.key.condition));
        }
        py::dict out;
        out["images"] = images;
        out["labels"] = labels;
        out["views"] = frame_views;
        out["subjects"] = subjects;
        out["conditions"] = conds;
        return out;
      },
      py::arg("n_subjects") = 4, py::arg("views") = std::vector<int>{0, 54, 90}, py::arg("frames_per_sequence") = 40,
      py::arg("height") = 64, py::arg("width") = 64, py::arg("seed") = 1,
      py::arg("conditions") = std::vector<std::string>{"nm"}, py::arg("occlusion_strength") = 0.6,
      "Procedural silhouettes as a dict of images [N,H,W], labels, views, subjects, conditions.");

  m.def(
      "preprocess",
      [](const FloatArray& image, std::size_t height, std::size_t width, float threshold) {
        return from_image(data::preprocess_frame(to_image(image), {height, width, threshold}));
      },
      py::arg("image"), py::arg("height") = 64, py::arg("width") = 64, py::arg("threshold") = 0.5f);

  m.def(
      "compute_pfc",
      [](const DoubleArray& x, const DoubleArray& y) {
        return to_array(view::compute_pfc(to_batch(x, 0), to_batch(y, 90), view::Pairing::ByIndex).factor);
      },
      py::arg("x"), py::arg("y"), "Mean row difference x_i - y_i, pairing rows by index.");

  m.def(
      "apply_it",
      [](const DoubleArray& x, const DoubleArray& factor) {
        view::ViewConversionFactor f;
        f.factor.assign(factor.data(), factor.data() + factor.size());
        const auto b = to_batch(x, 0);
        DoubleArray out({b.size(), b.feat_dim});
        double* dst = out.mutable_data();
        for (std::size_t i = 0; i < b.size(); ++i) {
          const auto row = view::apply_it(b.row(i), f);
          dst = std::copy(row.begin(), row.end(), dst);
        }
        return out;
      },
      py::arg("x"), py::arg("factor"));

  py::class_<view::FactorRegistry>(m, "FactorRegistry")
      .def(py::init<>())
      .def_readwrite("standard_view", &view::FactorRegistry::standard_view)
      .def_readwrite("feat_dim", &view::FactorRegistry::feat_dim)
      .def_property_readonly("factors",
                             [](const view::FactorRegistry& r) {
                               py::dict d;
                               for (const auto& [v, f] : r.entries) d[py::int_(v)] = to_array(f.factor);
                               return d;
                             })
      .def("complete", &view::FactorRegistry::complete)
      .def("to_json", &view::FactorRegistry::to_json)
      .def_static("from_json", &view::FactorRegistry::from_json)
      .def("save", &view::FactorRegistry::save)
      .def_static("load", &view::FactorRegistry::load);

  m.def(
      "build_registry",
      [](const std::map<int, DoubleArray>& by_view, int standard_view) {
        std::map<int, view::FeatureBatch> batches;
        for (const auto& [v, a] : by_view) batches.emplace(v, to_batch(a, v));
        return view::build_registry(batches, standard_view, view::Pairing::ByIndex);
      },
      py::arg("features_by_view"), py::arg("standard_view") = kDefaultStandardView);

  py::class_<PyModel>(m, "Model")
      .def(py::init([](const std::string& name, std::size_t subjects, std::uint64_t seed) {
             return PyModel(preset(name, subjects), seed);
           }),
           py::arg("preset") = "compact", py::arg("num_subjects") = 4, py::arg("seed") = 1)
      .def_static(
          "from_config_json",
          [](const std::string& text, std::uint64_t seed) {
            model::SmvitConfig c;
            parse_json(text, "model config").get_to(c);
            return PyModel(c, seed);
          },
          py::arg("text"), py::arg("seed") = 1)
      .def_property_readonly("config_json",
                             [](PyModel& p) { return json(p.get().config()).dump(); })
      .def_property_readonly("feat_dim", [](PyModel& p) { return p.get().feat_dim(); })
      .def_property_readonly("parameter_count", [](PyModel& p) { return p.get().parameter_count(); })
      .def("embed", &PyModel::embed, py::arg("frames"))
      .def("logits", &PyModel::logits, py::arg("frames"), py::arg("view"), py::arg("registry") = nullptr)
      .def("predict", &PyModel::predict, py::arg("frames"), py::arg("view"), py::arg("registry") = nullptr)
      .def("parameter_checksum", [](PyModel& p, int branch) { return p.get().parameter_checksum(branch); })
      .def(
          "save",
          [](PyModel& p, const std::string& path, std::uint64_t seed, std::size_t stage) {
            model::save_checkpoint(path, p.get(), seed, stage);
          },
          py::arg("path"), py::arg("seed") = 1, py::arg("stage") = 0)
      .def("load", [](PyModel& p, const std::string& path) { model::load_checkpoint(path, p.get()); });

  m.def(
      "gradcheck",
      [](int precision, std::uint64_t seed, std::size_t instances) {
        GradSuiteOptions o;
        o.seed = seed;
        o.instances = instances;
        const auto reports = precision == 32 ? run_gradcheck_suite<float>(o) : run_gradcheck_suite<double>(o);
        py::list out;
        for (const auto& r : reports) {
          py::dict d;
          d["op"] = r.op_name;
          d["max_rel_error"] = r.max_rel_error;
          d["tolerance"] = r.tolerance;
          d["passed"] = r.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("precision") = 64, py::arg("seed") = 7, py::arg("instances") = 20);

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "smvit");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command line with `args`; returns (exit_code, stdout, stderr).");
}
