// Python bindings. Configs cross the boundary as JSON text; the thin
// package in python/mapseg turns them into dicts.

#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mapseg/ablation.hpp"
#include "mapseg/error.hpp"
#include "mapseg/evaluation.hpp"
#include "mapseg/gradcheck.hpp"
#include "mapseg/io.hpp"
#include "mapseg/losses.hpp"
#include "mapseg/matching.hpp"
#include "mapseg/train.hpp"

namespace py = pybind11;
using namespace mapseg;

namespace {

Config config_of(const std::string& text) {
    const json tree = text.empty() ? json::object() : json::parse(text, nullptr, false);
    if (tree.is_discarded()) throw ConfigError("config is not valid JSON");
    return config_from_json(tree);
}

std::string dump(const Config& c) {
    json j;
    to_json(j, c);
    return j.dump();
}

py::array_t<std::uint8_t> raster_array(const Raster& r) {
    py::array_t<std::uint8_t> out({r.channels, r.height, r.width});
    std::copy(r.data.begin(), r.data.end(), out.mutable_data());
    return out;
}

py::array_t<std::uint8_t> stack(const std::vector<Raster>& rs) {
    if (rs.empty()) return py::array_t<std::uint8_t>(std::vector<py::ssize_t>{0});
    const Raster& f = rs.front();
    py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(rs.size()), py::ssize_t(f.channels),
                                   py::ssize_t(f.height), py::ssize_t(f.width)});
    std::uint8_t* p = out.mutable_data();
    for (const auto& r : rs) p = std::copy(r.data.begin(), r.data.end(), p);
    return out;
}

Raster mask_of(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw ShapeError("mask must be 2-D");
    Raster r(1, static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), r.data.begin());
    return r;
}

template <typename T>
Tensor<T> tensor_of(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
    Shape s;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) s.push_back(static_cast<int>(a.shape(i)));
    return Tensor<T>(s, std::vector<T>(a.data(), a.data() + a.size()));
}

py::array_t<double> array_of(const Tensor<double>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

std::vector<Vec2> points_of(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2 || a.shape(1) != 2) throw ShapeError("points must have shape [N, 2]");
    std::vector<Vec2> pts(static_cast<std::size_t>(a.shape(0)));
    for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {a.data()[2 * i], a.data()[2 * i + 1]};
    return pts;
}

py::array_t<double> points_array(const std::vector<Vec2>& pts) {
    py::array_t<double> out({static_cast<py::ssize_t>(pts.size()), py::ssize_t(2)});
    double* p = out.mutable_data();
    for (const auto& v : pts) {
        *p++ = v.x;
        *p++ = v.y;
    }
    return out;
}

py::dict element_dict(const MapElement& e) {
    py::dict d;
    d["cls"] = class_key(e.cls);
    d["points"] = points_array(e.points);
    d["closed"] = e.closed;
    return d;
}

MapElement element_of(const py::handle& h) {
    const py::dict d = py::reinterpret_borrow<py::dict>(h);
    MapElement e;
    e.cls = class_from_key(d["cls"].cast<std::string>());
    e.points = points_of(d["points"].cast<py::array_t<double, py::array::c_style | py::array::forcecast>>());
    e.closed = d.contains("closed") ? d["closed"].cast<bool>() : e.cls == ElementClass::ped_crossing;
    return e;
}

std::vector<MapElement> elements_of(const py::list& l) {
    std::vector<MapElement> out;
    for (const auto& h : l) out.push_back(element_of(h));
    return out;
}

py::dict loss_dict(const LossReport& r) {
    py::dict d;
    d["usm"] = r.usm;
    d["bsm"] = r.bsm;
    d["seg"] = r.seg;
    d["maptr_cls"] = r.maptr_cls;
    d["maptr_pts"] = r.maptr_pts;
    d["maptr"] = r.maptr;
    d["total"] = r.total;
    return d;
}

py::dict record_dict(const StepRecord& r) {
    py::dict d;
    d["step"] = r.step;
    d["epoch"] = r.epoch;
    d["lr"] = r.lr;
    d["grad_norm"] = r.grad_norm;
    d["loss"] = loss_dict(r.loss);
    return d;
}

py::dict eval_dict(const EvalResult& r) {
    py::dict d;
    py::dict per_class;
    py::dict per_thr;
    py::dict n_gt;
    py::dict n_pred;
    for (int c = 0; c < kNumClasses; ++c) {
        const char* k = class_key(static_cast<ElementClass>(c));
        per_class[k] = r.per_class_ap[c];
        per_thr[k] = r.per_threshold_ap[c];
        n_gt[k] = r.n_gt[c];
        n_pred[k] = r.n_pred[c];
    }
    d["per_class_ap"] = per_class;
    d["per_threshold_ap"] = per_thr;
    d["n_gt"] = n_gt;
    d["n_pred"] = n_pred;
    d["map"] = r.map;
    return d;
}

struct PyModel {
    MapSegModel<float> model;

    explicit PyModel(const std::string& cfg) : model(config_of(cfg)) {}

    py::dict forward(const SurroundFrame& frame) const {
        ad::NoGradGuard guard;
        const auto out = model.forward(frame, {.run_usm = false});
        const MapPrediction p = out.layers.back().values();
        py::dict d;
        d["scores"] = array_of(p.scores);
        d["points"] = array_of(p.points);
        if (out.bsm_logits.data.defined()) {
            const auto& l = out.bsm_logits.data.value();
            Tensor<double> t(l.shape());
            std::copy(l.values().begin(), l.values().end(), t.values().begin());
            d["bsm_logits"] = array_of(t);
        }
        return d;
    }
};

}  // namespace

PYBIND11_MODULE(_mapseg, m) {
    m.doc() = "Native core of the mapseg package";

    static py::exception<Error> base(m, "MapSegError");
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<FrameMismatchError>(m, "FrameMismatchError", base.ptr());
    py::register_exception<DomainError>(m, "DomainError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());
    py::register_exception<OutOfRangeError>(m, "OutOfRangeError", base.ptr());
    py::register_exception<DegenerateGeometryError>(m, "DegenerateGeometryError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<CheckpointIncompatibleError>(m, "CheckpointIncompatibleError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());

    m.def("default_config", [] { return dump(Config{}); });
    m.def("normalize_config", [](const std::string& text) { return dump(config_of(text)); },
          "Merge onto the defaults and validate.");
    m.def("config_schema", [] { return config_schema().dump(); });

    py::class_<SurroundFrame>(m, "Frame")
        .def_property_readonly("images", [](const SurroundFrame& f) { return stack(f.images); })
        .def_property_readonly("uv_masks", [](const SurroundFrame& f) { return stack(f.uv_masks); })
        .def_property_readonly("bev_mask", [](const SurroundFrame& f) { return raster_array(f.bev_mask); })
        .def_property_readonly("elements",
                               [](const SurroundFrame& f) {
                                   py::list l;
                                   for (const auto& e : f.elements) l.append(element_dict(e));
                                   return l;
                               })
        .def_property_readonly("n_cameras", [](const SurroundFrame& f) { return f.rig.cameras.size(); })
        .def_readonly("seed", &SurroundFrame::seed)
        .def("mirrored", &mirror_frame)
        .def(py::self == py::self);

    m.def("generate_scene",
          [](std::uint64_t seed, const std::string& cfg) { return generate_scene(seed, config_of(cfg).scene); },
          py::arg("seed"), py::arg("config") = "");
    m.def("generate_dataset", [](const std::string& cfg) { return generate_dataset(config_of(cfg).scene); },
          py::arg("config") = "");
    m.def("save_dataset",
          [](const std::vector<SurroundFrame>& frames, const std::string& cfg, const std::filesystem::path& dir) {
              save_dataset(frames, config_of(cfg).scene, dir);
          });
    m.def("load_dataset", [](const std::filesystem::path& dir) {
        Dataset d = load_dataset(dir);
        json j;
        to_json(j, d.config);
        return py::make_tuple(j.dump(), d.frames);
    });

    m.def("resample_element",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pts, bool closed, int n) {
              return points_array(resample_element({ElementClass::divider, points_of(pts), closed}, n));
          },
          py::arg("points"), py::arg("closed"), py::arg("n_points"));
    m.def("equivalent_orderings",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pts, bool closed) {
              const auto p = points_of(pts);
              py::list out;
              for (const auto& o : equivalent_orderings(p, closed)) out.append(points_array(o));
              return out;
          });
    m.def("hungarian_match",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& scores,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& points, const py::list& gt,
             double w_cls, double w_pts) {
              MapPrediction p{tensor_of<double>(scores), tensor_of<double>(points)};
              if (p.scores.ndim() != 2 || p.points.ndim() != 3 || p.points.dim(0) != p.scores.dim(0)) {
                  throw ShapeError("scores must be [N, K] and points [N, P, 2]");
              }
              const auto r = hungarian_match(p, elements_of(gt), MatchWeights{w_cls, w_pts}, BevRange{});
              py::dict d;
              d["pairs"] = r.pairs;
              d["unmatched_preds"] = r.unmatched_preds;
              d["total_cost"] = r.total_cost;
              return d;
          },
          py::arg("scores"), py::arg("points"), py::arg("gt"), py::arg("w_cls") = 2.0, py::arg("w_pts") = 5.0);
    m.def("solve_assignment", &solve_assignment);

    m.def("dice_loss",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& probs,
             const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& gt, double eps,
             const std::string& mode) {
              if (mode != "dice" && mode != "literal_union") throw ConfigError("unknown dice mode '" + mode + "'");
              const auto dm = mode == "dice" ? ad::DiceMode::dice : ad::DiceMode::literal_union;
              return dice_loss(ad::constant(tensor_of<double>(probs)), mask_of(gt), eps, dm).item();
          },
          py::arg("probs"), py::arg("gt"), py::arg("eps") = 1.0, py::arg("mode") = "dice");
    m.def("seg_ce_loss",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& logits,
             const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& gt) {
              const SegLogits<double> l{ad::constant(tensor_of<double>(logits)), FeatureFrame::bev, 1};
              return seg_ce_loss(l, mask_of(gt)).item();
          });
    m.def("seg_loss",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& logits,
             const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& gt, double lambda1,
             double lambda2) {
              const SegLogits<double> l{ad::constant(tensor_of<double>(logits)), FeatureFrame::bev, 1};
              LossWeights w;
              w.lambda1 = lambda1;
              w.lambda2 = lambda2;
              return seg_loss(l, mask_of(gt), w).item();
          },
          py::arg("logits"), py::arg("gt"), py::arg("lambda1") = 15.0, py::arg("lambda2") = 0.5);
    m.def("total_loss", [](double usm, double bsm, double maptr) { return loss_dict(total_loss(usm, bsm, maptr)); });

    m.def("chamfer_distance",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
              return chamfer_distance(points_of(a), points_of(b));
          });
    m.def("average_precision",
          [](const std::vector<bool>& hits, int n_gt, const std::string& interpolation) {
              const std::vector<char> h(hits.begin(), hits.end());
              return average_precision(h, n_gt, interpolation);
          },
          py::arg("hits"), py::arg("n_gt"), py::arg("interpolation") = "all_point");
    m.def("evaluate",
          [](const py::list& detections, const py::list& gts, const std::string& cfg) {
              std::vector<std::vector<ScoredElement>> dets;
              for (const auto& frame : detections) {
                  dets.emplace_back();
                  for (const auto& h : frame) {
                      const py::dict d = py::reinterpret_borrow<py::dict>(h);
                      dets.back().push_back({element_of(h), d["score"].cast<double>()});
                  }
              }
              std::vector<std::vector<MapElement>> g;
              for (const auto& frame : gts) g.push_back(elements_of(py::reinterpret_borrow<py::list>(frame)));
              return eval_dict(evaluate(dets, g, config_of(cfg).eval));
          },
          py::arg("detections"), py::arg("gts"), py::arg("config") = "");

    py::class_<PyModel>(m, "Model")
        .def(py::init<const std::string&>(), py::arg("config") = "")
        .def("forward", &PyModel::forward)
        .def_property_readonly("param_names", [](const PyModel& p) { return p.model.params().names(); })
        .def_property_readonly("num_parameters", [](const PyModel& p) { return p.model.params().numel(); });

    py::class_<Trainer>(m, "Trainer")
        .def(py::init([](const std::string& cfg, std::vector<SurroundFrame> frames) {
                 return std::make_unique<Trainer>(config_of(cfg), std::move(frames));
             }),
             py::arg("config"), py::arg("frames"))
        .def_static("resume",
                    [](const std::filesystem::path& ckpt, std::vector<SurroundFrame> frames) {
                        return std::make_unique<Trainer>(load_checkpoint(ckpt), std::move(frames));
                    })
        .def("train_step", [](Trainer& t) { return record_dict(t.train_step()); })
        .def(
            "run",
            [](Trainer& t, std::int64_t max_steps) {
                py::list out;
                t.run(max_steps, [&](const StepRecord& r) { out.append(record_dict(r)); });
                return out;
            },
            py::arg("max_steps") = -1)
        .def("save", [](const Trainer& t, const std::filesystem::path& p) { save_checkpoint(p, t.checkpoint()); })
        .def_property_readonly("step", &Trainer::step)
        .def_property_readonly("total_steps", &Trainer::total_steps)
        .def_property_readonly("done", &Trainer::done)
        .def_property_readonly("config", [](const Trainer& t) { return dump(t.config()); })
        .def("evaluate", [](const Trainer& t, const std::vector<SurroundFrame>& frames) {
            ad::NoGradGuard guard;
            std::vector<MapPrediction> preds;
            std::vector<std::vector<MapElement>> gts;
            for (const auto& f : frames) {
                preds.push_back(t.model().forward(f, {.run_usm = false}).layers.back().values());
                gts.push_back(f.elements);
            }
            return eval_dict(evaluate(preds, gts, t.config().eval));
        });

    m.def("run_gradcheck", [](std::uint64_t seed) {
        py::list out;
        for (const auto& r : run_gradcheck_suite(seed)) {
            py::dict d;
            d["op"] = r.op;
            d["max_rel_error"] = r.max_rel_error;
            d["n_checked"] = r.n_checked;
            d["passed"] = r.passed();
            out.append(d);
        }
        return out;
    }, py::arg("seed") = 0);
}
