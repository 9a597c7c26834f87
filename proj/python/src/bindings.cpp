#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <optional>

#include "ldpet/dcs.hpp"
#include "ldpet/diffusion.hpp"
#include "ldpet/gradient_suite.hpp"
#include "ldpet/io/checkpoint.hpp"
#include "ldpet/io/tensor_file.hpp"
#include "ldpet/metrics.hpp"
#include "ldpet/phantom.hpp"
#include "ldpet/pipeline.hpp"

namespace py = pybind11;
using namespace ldpet;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

ImageGrid to_grid(const FloatArray& a, double pixel_mm) {
    if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
    const auto h = static_cast<std::size_t>(a.shape(0)), w = static_cast<std::size_t>(a.shape(1));
    return ImageGrid(h, w, pixel_mm, std::vector<float>(a.data(), a.data() + h * w));
}

FloatArray to_array(const ImageGrid& g) {
    FloatArray out({g.height(), g.width()});
    std::memcpy(out.mutable_data(), g.values().data(), g.size() * sizeof(float));
    return out;
}

FloatArray tensor_array(const numeric::Tensor<float>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    FloatArray out(shape);
    std::memcpy(out.mutable_data(), t.data().data(), t.size() * sizeof(float));
    return out;
}

numeric::Tensor<float> array_tensor(const FloatArray& a) {
    numeric::Shape shape;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<std::size_t>(a.shape(i)));
    numeric::Tensor<float> t(shape);
    std::memcpy(t.mutable_data().data(), a.data(), t.size() * sizeof(float));
    return t;
}

pipeline::RunConfig run_config(const std::string& text) {
    auto cfg = nlohmann::json::parse(text).get<pipeline::RunConfig>();
    cfg.validate();
    return cfg;
}

template <typename T>
T parse_or_default(const std::string& text) {
    return text.empty() ? T{} : nlohmann::json::parse(text).get<T>();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Low-dose PET restoration core";

    py::register_exception<phantom::PhantomError>(m, "PhantomError", PyExc_ValueError);
    py::register_exception<metrics::MetricsError>(m, "MetricsError", PyExc_ValueError);
    py::register_exception<dcs::DcsError>(m, "DcsError", PyExc_RuntimeError);
    py::register_exception<diffusion::DiffusionError>(m, "DiffusionError", PyExc_RuntimeError);
    py::register_exception<io::TensorFileError>(m, "TensorFileError", PyExc_IOError);
    py::register_exception<io::CheckpointError>(m, "CheckpointError", PyExc_IOError);
    py::register_exception<pipeline::PipelineError>(m, "PipelineError", PyExc_RuntimeError);

    // Phantoms and dose simulation.
    m.def(
        "nema_spec", [] { return nlohmann::json(phantom::PhantomSpec::nema_default()).dump(); },
        "Default NEMA body phantom spec as JSON.");
    m.def(
        "generate_phantom",
        [](const std::string& spec) {
            const auto s = parse_or_default<phantom::PhantomSpec>(spec);
            return to_array(phantom::generate_phantom(spec.empty() ? phantom::PhantomSpec::nema_default() : s));
        },
        py::arg("spec") = "");
    m.def(
        "simulate_lowdose",
        [](const FloatArray& truth, double fraction, double counts_scale, std::uint64_t seed, std::uint64_t stream) {
            phantom::DoseModel dm;
            dm.fraction = fraction;
            dm.counts_scale = counts_scale;
            dm.seed = seed;
            return to_array(phantom::simulate_lowdose(to_grid(truth, 1.0), dm, stream));
        },
        py::arg("truth"), py::arg("fraction"), py::arg("counts_scale") = 20.0, py::arg("seed") = 0,
        py::arg("stream") = 0);

    // Metrics.
    m.def("psnr", [](const FloatArray& x, const FloatArray& y) { return metrics::psnr(to_grid(x, 1), to_grid(y, 1)); });
    m.def("psnr_conventional", [](const FloatArray& x, const FloatArray& y) {
        return metrics::psnr_conventional(to_grid(x, 1), to_grid(y, 1));
    });
    m.def("ssim", [](const FloatArray& x, const FloatArray& y) { return metrics::ssim(to_grid(x, 1), to_grid(y, 1)); });
    m.def("nrmse", [](const FloatArray& x, const FloatArray& y) { return metrics::nrmse(to_grid(x, 1), to_grid(y, 1)); });
    m.def(
        "evaluate",
        [](const FloatArray& x, const FloatArray& truth, const std::string& spec, double pixel_mm, double dose,
           const std::string& method) {
            const auto s = spec.empty() ? phantom::PhantomSpec::nema_default()
                                        : nlohmann::json::parse(spec).get<phantom::PhantomSpec>();
            return nlohmann::json(metrics::evaluate(to_grid(x, pixel_mm), to_grid(truth, pixel_mm), s, dose, method))
                .dump();
        },
        py::arg("x"), py::arg("truth"), py::arg("spec") = "", py::arg("pixel_mm") = 2.0, py::arg("dose") = 1.0,
        py::arg("method") = "");

    // Tensor files.
    m.def("save_tensor", [](const FloatArray& a, const std::string& path) { io::save_tensor(array_tensor(a), path); });
    m.def("load_tensor", [](const std::string& path) { return tensor_array(io::load_tensor(path)); });

    // Diffusion.
    m.def(
        "make_schedule",
        [](std::size_t T, double beta_start, double beta_end) {
            diffusion::BetaSpec b;
            b.beta_min = beta_start;
            b.beta_max = beta_end;
            const auto s = diffusion::make_schedule(T, b);
            py::dict d;
            d["T"] = s.T;
            d["beta"] = s.beta;
            d["alpha"] = s.alpha;
            d["alpha_bar"] = s.alpha_bar;
            return d;
        },
        py::arg("T") = 4, py::arg("beta_start") = 0.1, py::arg("beta_end") = 0.99);
    m.def(
        "diffuse_forward",
        [](const std::vector<double>& j, std::size_t t, const std::vector<double>& noise, std::size_t T) {
            return diffusion::diffuse_forward<double>(j, diffusion::make_schedule(T), t, noise);
        },
        py::arg("j"), py::arg("t"), py::arg("noise"), py::arg("T") = 4);
    m.def(
        "denoise_step",
        [](const std::vector<double>& jt, const std::vector<double>& eps, std::size_t t, std::size_t T) {
            return diffusion::denoise_step<double>(jt, eps, diffusion::make_schedule(T), t);
        },
        py::arg("jt"), py::arg("eps"), py::arg("t"), py::arg("T") = 4);

    // Data-consistency stage.
    m.def(
        "extract_lesion_mask",
        [](const FloatArray& x, double q, std::optional<double> background_multiple, std::size_t min_component) {
            dcs::MaskPolicy policy;
            policy.q = q;
            policy.min_component = min_component;
            if (background_multiple) {
                policy.kind = dcs::ThresholdKind::background_multiple;
                policy.m = *background_multiple;
            }
            const auto mask = dcs::extract_lesion_mask(to_grid(x, 1.0), policy);
            py::array_t<std::uint8_t> M({x.shape(0), x.shape(1)});
            std::memcpy(M.mutable_data(), mask.M.data(), mask.M.size());
            return py::make_tuple(M, to_array(mask.v), mask.threshold);
        },
        py::arg("x"), py::arg("q") = 0.98, py::arg("background_multiple") = py::none(), py::arg("min_component") = 2);
    m.def(
        "run_dcs",
        [](const FloatArray& x0, const FloatArray& f_hat, double dose, double counts_scale, const std::string& cfg) {
            dcs::DcsModel model;
            model.dose_fraction = dose;
            model.counts_scale = counts_scale;
            dcs::DcsReport rep;
            const auto out =
                dcs::run_dcs(to_grid(x0, 1.0), to_grid(f_hat, 1.0), model, parse_or_default<dcs::DcsConfig>(cfg), &rep);
            return py::make_tuple(to_array(out), nlohmann::json(rep).dump());
        },
        py::arg("x0"), py::arg("f_hat"), py::arg("dose"), py::arg("counts_scale") = 20.0, py::arg("config") = "");

    // Gradient suite.
    m.def(
        "gradient_suite",
        [](std::uint64_t seed) {
            py::list out;
            for (const auto& e : run_gradient_suite(seed)) {
                py::dict d;
                d["name"] = e.name;
                d["max_relative_error"] = e.max_relative_error;
                d["tolerance"] = e.tolerance;
                d["checked"] = e.checked;
                d["passed"] = e.passed;
                out.append(d);
            }
            return out;
        },
        py::arg("seed") = 0);

    // Pipeline.
    m.def("default_run_config", [] { return nlohmann::json(pipeline::RunConfig{}).dump(); });
    m.def("load_run_config", [](const std::string& path) {
        return nlohmann::json(pipeline::load_run_config(path)).dump();
    });
    m.def("write_dataset", [](const std::string& cfg, const std::string& dir) {
        const auto c = run_config(cfg);
        pipeline::write_phantoms(c, dir);
        pipeline::write_lowdose(c, dir);
    });
    m.def("train_stage1", [](const std::string& cfg, const std::string& data, const std::string& out) {
        const auto c = run_config(cfg);
        py::gil_scoped_release release;
        const auto r = pipeline::train_stage1(c, pipeline::load_dataset(c, data));
        pipeline::save_stage(out, r, pipeline::kStage1Tag, c.stage1_section(), c);
        return r.loss_curve;
    });
    m.def("train_stage2",
          [](const std::string& cfg, const std::string& data, const std::string& stage1, const std::string& out) {
              const auto c = run_config(cfg);
              py::gil_scoped_release release;
              const auto r = pipeline::train_stage2(c, pipeline::load_dataset(c, data), pipeline::load_stage1(c, stage1));
              pipeline::save_stage(out, r, pipeline::kStage2Tag, c.stage2_section(), c);
              return r.loss_curve;
          });
    m.def(
        "reconstruct",
        [](const std::string& cfg, const std::string& stage1, const std::string& stage2, const FloatArray& low,
           double dose, bool use_dcs, std::uint64_t stream) {
            const auto c = run_config(cfg);
            const auto r = pipeline::reconstruct(c, pipeline::load_stage1(c, stage1), pipeline::load_stage2(c, stage2),
                                                 to_grid(low, c.dataset.base.pixel_mm), dose, use_dcs, stream);
            py::dict d;
            d["prior"] = r.prior.values;
            d["f_hat"] = to_array(r.f_hat);
            d["dcs"] = r.dcs ? py::object(to_array(*r.dcs)) : py::none();
            return d;
        },
        py::arg("config"), py::arg("stage1"), py::arg("stage2"), py::arg("low"), py::arg("dose"),
        py::arg("use_dcs") = true, py::arg("stream") = 0);
}
