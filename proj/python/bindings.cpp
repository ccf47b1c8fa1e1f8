// Python module: numpy in, numpy out over the C++ core.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "csifall/checkpoint.hpp"
#include "csifall/cli.hpp"
#include "csifall/config.hpp"
#include "csifall/dvg.hpp"
#include "csifall/errors.hpp"
#include "csifall/stream.hpp"
#include "csifall/synthcsi.hpp"
#include "csifall/training.hpp"

namespace py = pybind11;
using namespace csifall;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

nn::Tensor to_tensor(const Array& a) {
    nn::Shape shape(a.shape(), a.shape() + a.ndim());
    return nn::Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const nn::Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

CsiTensor staged(const Array& a, TensorStage stage) {
    if (a.ndim() != 3) throw ShapeError("expected a C x T x S array");
    return {to_tensor(a), stage};
}

PreprocessOptions preprocess_options(bool lowpass) {
    PreprocessOptions p;
    p.lowpass.enabled = lowpass;
    return p;
}

CsiWindow window_from(const Array& matrix) {
    if (matrix.ndim() != 2) throw ShapeError("expected a T x 90 array");
    CsiWindow w;
    w.data = to_tensor(matrix);
    return w;
}

py::dict frames_dict(const std::vector<CsiFrame>& frames) {
    const auto n = static_cast<py::ssize_t>(frames.size());
    py::array_t<std::uint64_t> ts(n);
    py::array_t<std::uint8_t> perm({n, py::ssize_t{kNumRx}});
    py::array_t<float> amp({n, py::ssize_t{kNumStreams}});
    for (py::ssize_t i = 0; i < n; ++i) {
        const CsiFrame& f = frames[static_cast<std::size_t>(i)];
        ts.mutable_at(i) = f.timestamp_us;
        std::copy(f.perm.begin(), f.perm.end(), perm.mutable_data(i, 0));
        std::copy(f.amplitude.begin(), f.amplitude.end(), amp.mutable_data(i, 0));
    }
    py::dict d;
    d["timestamp_us"] = ts;
    d["perm"] = perm;
    d["amplitude"] = amp;
    return d;
}

class Model {
public:
    explicit Model(FallDetector m) : m_(std::move(m)) {}

    static Model load(const std::string& path) { return Model(load_checkpoint(path)); }
    static Model create(const std::string& config_json, std::uint64_t seed) {
        return Model(FallDetector(model_config_from_json(nlohmann::json::parse(config_json)), seed));
    }

    double predict(const Array& standardized) const {
        return m_.forward(staged(standardized, TensorStage::standardized)).probs.p_fall;
    }

    py::dict diagnostics(const Array& standardized) const {
        ForwardOptions o;
        o.keep_diagnostics = true;
        const ForwardResult r = m_.forward(staged(standardized, TensorStage::standardized), o);
        py::dict d;
        d["p_fall"] = r.probs.p_fall;
        d["dvg_mask"] = to_array(r.diag.dvg_mask);
        d["channel_mask"] = to_array(r.diag.channel_mask);
        d["spatial_mask"] = to_array(r.diag.spatial_mask);
        py::list att;
        for (const auto& a : r.diag.attention) att.append(to_array(a));
        d["attention"] = att;
        py::list shapes;
        for (const auto& [name, s] : r.diag.shapes) shapes.append(py::make_tuple(name, s));
        d["shapes"] = shapes;
        return d;
    }

    std::string config_json() const { return to_json(m_.config()).dump(); }
    void save(const std::string& path) const { save_checkpoint(m_, path); }

    const FallDetector& get() const { return m_; }

private:
    FallDetector m_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "CSI fall detection core";

    // Registered base first: translators are tried newest first.
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);

    m.def("reorganize", [](const Array& matrix) { return to_array(reorganize(to_tensor(matrix)).data); },
          "T x 90 amplitudes -> 3 x T x 30");
    m.def("instance_normalize",
          [](const Array& t) { return to_array(instance_normalize(staged(t, TensorStage::reorganized)).data); });
    m.def("channel_standardize",
          [](const Array& t) { return to_array(channel_standardize(staged(t, TensorStage::instance_normalized)).data); });
    m.def("channel_destandardize",
          [](const Array& t) { return to_array(channel_destandardize(staged(t, TensorStage::standardized)).data); });
    m.def(
        "preprocess_window",
        [](const Array& matrix, bool lowpass) {
            return to_array(preprocess_window(window_from(matrix), preprocess_options(lowpass)).data);
        },
        py::arg("matrix"), py::arg("lowpass") = false, "5000 x 90 window -> instance-normalized 3 x 625 x 30");
    m.def(
        "live_window_tensor",
        [](const Array& matrix) {
            return to_array(live_window_tensor(window_from(matrix), StreamConfig{}.preprocess).data);
        },
        "The streaming path: causal low-pass, preprocess, standardize");

    m.def(
        "local_variance",
        [](const Array& t, int window) {
            return to_array(local_variance(staged(t, TensorStage::standardized), window).data);
        },
        py::arg("tensor"), py::arg("window") = kVarianceWindow);
    m.def(
        "gate",
        [](const Array& t, double alpha) {
            const GateOutput g = gate_forward(staged(t, TensorStage::standardized), init_gate(alpha));
            return py::make_tuple(to_array(g.gated.data), to_array(g.mask));
        },
        py::arg("tensor"), py::arg("alpha") = kDefaultGateAlpha, "Gate at its initial weights: (gated, mask)");

    m.def(
        "focal_loss",
        [](double p_fall, int label, double gamma, double alpha, bool symmetric) {
            return focal_loss({p_fall, 1.0 - p_fall}, label, gamma, alpha, symmetric);
        },
        py::arg("p_fall"), py::arg("label"), py::arg("gamma") = 2.0, py::arg("alpha") = 3.0,
        py::arg("symmetric") = false);

    m.def(
        "alert_trace",
        [](const std::vector<double>& probs, int history, double threshold, bool strict) {
            SmootherConfig cfg;
            cfg.history_size = history;
            cfg.threshold = threshold;
            cfg.strict = strict;
            cfg.validate();
            std::vector<std::string> out;
            AlertState s;
            for (double p : probs) {
                s = update_alert(s, p, cfg);
                out.emplace_back(alert_name(s.state));
            }
            return out;
        },
        py::arg("probs"), py::arg("history") = 3, py::arg("threshold") = 0.5, py::arg("strict") = false);

    m.def(
        "synth_dataset",
        [](const std::string& out_dir, int n_env, int n_nlos, int falls, int nonfalls, std::uint64_t seed,
           double background_strength) {
            SynthSpec spec = make_synth_spec(n_env, n_nlos, falls, nonfalls, seed);
            spec.background_strength = background_strength;
            const DatasetIndex idx = generate_dataset(spec, out_dir);
            py::list out;
            for (const auto& s : idx.samples) {
                py::dict d;
                d["sample_id"] = s.sample_id;
                d["file"] = idx.resolve(s).string();
                d["label"] = s.label;
                d["environment_id"] = s.environment_id;
                out.append(d);
            }
            return out;
        },
        py::arg("out_dir"), py::arg("n_env") = 4, py::arg("n_nlos") = 1, py::arg("falls") = 40,
        py::arg("nonfalls") = 40, py::arg("seed") = 0, py::arg("background_strength") = 1.0,
        "Writes a synthetic dataset and returns its sample records");
    m.def(
        "synth_recording",
        [](const std::string& kind, double duration_s, double event_at_s, std::uint64_t seed) {
            const SynthSpec spec = make_synth_spec(1, 0, 1, 1, seed);
            const Recording r = generate_recording(parse_event(kind), spec.environments[0], spec, duration_s,
                                                   event_at_s, seed);
            py::dict d = frames_dict(r.frames);
            d["event_start_s"] = r.event_start_s;
            d["event_end_s"] = r.event_end_s;
            return d;
        },
        py::arg("kind"), py::arg("duration_s") = 12.0, py::arg("event_at_s") = 6.0, py::arg("seed") = 0);

    m.def("read_tensor_file", [](const std::string& path) { return to_array(read_tensor_file(path).data); });
    m.def("read_replay", [](const std::string& path) { return frames_dict(read_replay(path)); });

    py::class_<Model>(m, "Model")
        .def_static("load", &Model::load, py::arg("path"))
        .def_static("create", &Model::create, py::arg("config_json"), py::arg("seed") = 0)
        .def("predict", &Model::predict, py::arg("standardized"), "p_fall for one 3 x T x 30 standardized tensor")
        .def("diagnostics", &Model::diagnostics, py::arg("standardized"))
        .def("config_json", &Model::config_json)
        .def("save", &Model::save, py::arg("path"));
    m.def("desk_model_config", [] { return to_json(desk_model_config()).dump(); });

    m.def(
        "stream_replay",
        [](const Model& model, const std::string& path, int history, bool strict) {
            StreamConfig cfg;
            cfg.smoother.history_size = history;
            cfg.smoother.strict = strict;
            cfg.validate();
            const auto frames = read_replay(path);
            py::list out;
            run_live(vector_source(frames), model.get(), cfg, [&](const StreamRecord& r) {
                py::dict d;
                d["window_id"] = r.window_id;
                d["t_end_us"] = r.t_end_us;
                d["p_fall"] = r.p_fall;
                d["state"] = alert_name(r.state.state);
                out.append(d);
            });
            return out;
        },
        py::arg("model"), py::arg("path"), py::arg("history") = 3, py::arg("strict") = false);

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code;
            {
                py::gil_scoped_release release;
                code = run_command(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a csifall subcommand in-process: (exit_code, stdout, stderr)");
}
