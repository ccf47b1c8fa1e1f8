#include "csifall/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "csifall/errors.hpp"

namespace csifall {

using nlohmann::json;

namespace {

// Reads keys out of one JSON object and rejects anything it was not asked about.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("config section \"" + name_ + "\" must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(name_ + "." + key + ": " + e.what());
        }
    }

    const json* sub(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError("unknown config key \"" + name_ + "." + it.key() + "\"");
        }
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

json to_json(const PreprocessOptions& p) {
    return {{"window", p.window},
            {"downsample", p.downsample},
            {"method", p.method == DownsampleMethod::block_mean ? "block_mean" : "stride"},
            {"lowpass",
             {{"enabled", p.lowpass.enabled},
              {"order", p.lowpass.order},
              {"cutoff_hz", p.lowpass.cutoff_hz},
              {"rate_hz", p.lowpass.rate_hz},
              {"mode", p.lowpass.mode == FilterMode::causal ? "causal" : "zero_phase"}}}};
}

PreprocessOptions preprocess_from_json(const json& j, PreprocessOptions p) {
    Section s(j, "preprocess");
    s.get("window", p.window);
    s.get("downsample", p.downsample);
    std::string method = p.method == DownsampleMethod::block_mean ? "block_mean" : "stride";
    s.get("method", method);
    if (method == "block_mean") p.method = DownsampleMethod::block_mean;
    else if (method == "stride") p.method = DownsampleMethod::stride;
    else throw ConfigError("preprocess.method must be block_mean or stride");
    if (const json* lp = s.sub("lowpass")) {
        Section l(*lp, "preprocess.lowpass");
        l.get("enabled", p.lowpass.enabled);
        l.get("order", p.lowpass.order);
        l.get("cutoff_hz", p.lowpass.cutoff_hz);
        l.get("rate_hz", p.lowpass.rate_hz);
        std::string mode = p.lowpass.mode == FilterMode::causal ? "causal" : "zero_phase";
        l.get("mode", mode);
        if (mode == "causal") p.lowpass.mode = FilterMode::causal;
        else if (mode == "zero_phase") p.lowpass.mode = FilterMode::zero_phase;
        else throw ConfigError("preprocess.lowpass.mode must be causal or zero_phase");
        l.finish();
    }
    s.finish();
    return p;
}

void validate_preprocess(const PreprocessOptions& p) {
    if (p.downsample < 1) throw ConfigError("preprocess.downsample must be >= 1");
    if (p.window < p.downsample || p.window % p.downsample != 0) {
        throw ConfigError("preprocess.window must be a positive multiple of preprocess.downsample");
    }
    if (p.lowpass.order < 1) throw ConfigError("preprocess.lowpass.order must be >= 1");
    if (!(p.lowpass.rate_hz > 0.0)) throw ConfigError("preprocess.lowpass.rate_hz must be > 0");
    if (!(p.lowpass.cutoff_hz > 0.0 && p.lowpass.cutoff_hz < p.lowpass.rate_hz / 2)) {
        throw ConfigError("preprocess.lowpass.cutoff_hz must lie in (0, rate_hz / 2)");
    }
}

json dvg_to_json(const DvgConfig& d) {
    return {{"enabled", d.enabled},
            {"alpha", d.alpha},
            {"window", d.window},
            {"learnable", d.learnable},
            {"learn_alpha", d.learn_alpha},
            {"topology", d.topology == GateTopology::depthwise ? "depthwise" : "dense"}};
}

DvgConfig dvg_from_json(const json& j, DvgConfig d) {
    Section s(j, "dvg");
    s.get("enabled", d.enabled);
    s.get("alpha", d.alpha);
    s.get("window", d.window);
    s.get("learnable", d.learnable);
    s.get("learn_alpha", d.learn_alpha);
    std::string topo = d.topology == GateTopology::depthwise ? "depthwise" : "dense";
    s.get("topology", topo);
    if (topo == "depthwise") d.topology = GateTopology::depthwise;
    else if (topo == "dense") d.topology = GateTopology::dense;
    else throw ConfigError("dvg.topology must be depthwise or dense");
    s.finish();
    return d;
}

json model_body(const ModelConfig& c) {
    return {{"backbone", backbone_name(c.backbone)},
            {"pretrained", c.pretrained},
            {"pretrained_path", c.pretrained_path},
            {"d_model", c.d_model},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"dropout", c.dropout},
            {"encoder_dropout", c.encoder_dropout},
            {"ff_mult", c.ff_mult},
            {"n_classes", c.n_classes},
            {"cbam_reduction", c.cbam_reduction},
            {"cbam_enabled", c.cbam_enabled},
            {"transformer_enabled", c.transformer_enabled},
            {"tiny_channels", c.tiny_channels}};
}

ModelConfig model_body_from_json(const json& j, ModelConfig c, bool allow_dvg) {
    Section s(j, "model");
    std::string backbone = backbone_name(c.backbone);
    s.get("backbone", backbone);
    c.backbone = parse_backbone(backbone);
    s.get("pretrained", c.pretrained);
    s.get("pretrained_path", c.pretrained_path);
    s.get("d_model", c.d_model);
    s.get("n_layers", c.n_layers);
    s.get("n_heads", c.n_heads);
    s.get("dropout", c.dropout);
    s.get("encoder_dropout", c.encoder_dropout);
    s.get("ff_mult", c.ff_mult);
    s.get("n_classes", c.n_classes);
    s.get("cbam_reduction", c.cbam_reduction);
    s.get("cbam_enabled", c.cbam_enabled);
    s.get("transformer_enabled", c.transformer_enabled);
    s.get("tiny_channels", c.tiny_channels);
    if (allow_dvg) {
        if (const json* d = s.sub("dvg")) c.dvg = dvg_from_json(*d, c.dvg);
    }
    s.finish();
    return c;
}

json smoother_stream_json(const StreamConfig& c) {
    return {{"threshold", c.smoother.threshold},
            {"history_size", c.smoother.history_size},
            {"strict", c.smoother.strict},
            {"step", c.step},
            {"threaded", c.threaded},
            {"queue_capacity", c.queue_capacity}};
}

StreamConfig stream_from_json(const json& j, StreamConfig c) {
    Section s(j, "stream");
    s.get("threshold", c.smoother.threshold);
    s.get("history_size", c.smoother.history_size);
    s.get("strict", c.smoother.strict);
    s.get("step", c.step);
    s.get("threaded", c.threaded);
    s.get("queue_capacity", c.queue_capacity);
    s.finish();
    return c;
}

}  // namespace

json to_json(const ModelConfig& c) {
    json j = model_body(c);
    j["dvg"] = dvg_to_json(c.dvg);
    return j;
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c = model_body_from_json(j, ModelConfig{}, true);
    c.validate();
    return c;
}

json to_json(const AugmentPolicy& p) {
    return {{"p_noise", p.p_noise},     {"p_scale", p.p_scale},     {"p_shift", p.p_shift},
            {"p_nlos", p.p_nlos},       {"sigma", p.sigma},         {"scale_lo", p.scale_lo},
            {"scale_hi", p.scale_hi},   {"shift_max", p.shift_max}, {"nlos_scale", p.nlos_scale},
            {"rng_seed", p.rng_seed}};
}

AugmentPolicy augment_policy_from_json(const json& j) {
    AugmentPolicy p;
    Section s(j, "augment");
    s.get("p_noise", p.p_noise);
    s.get("p_scale", p.p_scale);
    s.get("p_shift", p.p_shift);
    s.get("p_nlos", p.p_nlos);
    s.get("sigma", p.sigma);
    s.get("scale_lo", p.scale_lo);
    s.get("scale_hi", p.scale_hi);
    s.get("shift_max", p.shift_max);
    s.get("nlos_scale", p.nlos_scale);
    s.get("rng_seed", p.rng_seed);
    s.finish();
    try {
        p.validate();
    } catch (const ParameterError& e) {
        throw ConfigError(std::string("augment: ") + e.what());
    }
    return p;
}

json to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"min_lr", c.min_lr},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"focal_gamma", c.focal_gamma},
            {"focal_alpha", c.focal_alpha},
            {"symmetric_alpha", c.symmetric_alpha},
            {"seed", c.seed},
            {"augment_enabled", c.augment_enabled},
            {"tta_k", c.tta_k},
            {"tta_noise_sigma", c.tta_noise_sigma},
            {"tta_shift_max", c.tta_shift_max},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    Section s(j, "training");
    s.get("lr", c.lr);
    s.get("min_lr", c.min_lr);
    s.get("epochs", c.epochs);
    s.get("batch_size", c.batch_size);
    s.get("focal_gamma", c.focal_gamma);
    s.get("focal_alpha", c.focal_alpha);
    s.get("symmetric_alpha", c.symmetric_alpha);
    s.get("seed", c.seed);
    s.get("augment_enabled", c.augment_enabled);
    s.get("tta_k", c.tta_k);
    s.get("tta_noise_sigma", c.tta_noise_sigma);
    s.get("tta_shift_max", c.tta_shift_max);
    s.get("adam_beta1", c.adam_beta1);
    s.get("adam_beta2", c.adam_beta2);
    s.get("adam_eps", c.adam_eps);
    s.finish();
    c.validate();
    return c;
}

json to_json(const SynthSpec& s) {
    json envs = json::array();
    for (const auto& e : s.environments) {
        envs.push_back({{"id", e.id}, {"background_seed", e.background_seed}, {"nlos", e.nlos}});
    }
    return {{"environments", envs},
            {"falls_per_env", s.falls_per_env},
            {"nonfalls_per_env", s.nonfalls_per_env},
            {"window", s.window},
            {"rate_hz", s.rate_hz},
            {"seed", s.seed},
            {"sensor_noise", s.sensor_noise},
            {"background_level", s.background_level},
            {"background_strength", s.background_strength},
            {"nlos_attenuation", s.nlos_attenuation},
            {"nlos_smoothing", s.nlos_smoothing}};
}

SynthSpec synth_spec_from_json(const json& j) {
    SynthSpec spec = make_synth_spec(4, 1, 40, 40, 0);
    Section s(j, "synth");
    if (const json* envs = s.sub("environments")) {
        if (!envs->is_array()) throw ConfigError("synth.environments must be an array");
        spec.environments.clear();
        for (const auto& e : *envs) {
            SynthEnvironment env;
            Section es(e, "synth.environments[]");
            es.get("id", env.id);
            es.get("background_seed", env.background_seed);
            es.get("nlos", env.nlos);
            es.finish();
            spec.environments.push_back(env);
        }
    }
    s.get("falls_per_env", spec.falls_per_env);
    s.get("nonfalls_per_env", spec.nonfalls_per_env);
    s.get("window", spec.window);
    s.get("rate_hz", spec.rate_hz);
    s.get("seed", spec.seed);
    s.get("sensor_noise", spec.sensor_noise);
    s.get("background_level", spec.background_level);
    s.get("background_strength", spec.background_strength);
    s.get("nlos_attenuation", spec.nlos_attenuation);
    s.get("nlos_smoothing", spec.nlos_smoothing);
    s.finish();
    spec.validate();
    return spec;
}

void RunConfig::validate() const {
    validate_preprocess(preprocess);
    model.validate();
    training.validate();
    try {
        training.augment.validate();
    } catch (const ParameterError& e) {
        throw ConfigError(std::string("augment: ") + e.what());
    }
    stream.validate();
    synth.validate();
    if (synth.window != preprocess.window) throw ConfigError("synth.window must equal preprocess.window");
}

void RunConfig::apply_seed(std::uint64_t s) {
    training.seed = s;
    training.augment.rng_seed = s;
    synth.seed = s;
}

json to_json(const RunConfig& c) {
    json training = to_json(c.training);
    return {{"preprocess", to_json(c.preprocess)},
            {"augment", to_json(c.training.augment)},
            {"dvg", dvg_to_json(c.model.dvg)},
            {"model", model_body(c.model)},
            {"training", training},
            {"stream", smoother_stream_json(c.stream)},
            {"synth", to_json(c.synth)}};
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    Section s(j, "config");
    if (const json* p = s.sub("preprocess")) c.preprocess = preprocess_from_json(*p, c.preprocess);
    if (const json* m = s.sub("model")) c.model = model_body_from_json(*m, c.model, false);
    if (const json* d = s.sub("dvg")) c.model.dvg = dvg_from_json(*d, c.model.dvg);
    if (const json* t = s.sub("training")) c.training = train_config_from_json(*t);
    if (const json* a = s.sub("augment")) c.training.augment = augment_policy_from_json(*a);
    if (const json* st = s.sub("stream")) c.stream = stream_from_json(*st, c.stream);
    if (const json* sy = s.sub("synth")) c.synth = synth_spec_from_json(*sy);
    std::optional<std::uint64_t> seed;
    if (const json* sd = s.sub("seed")) {
        if (!sd->is_number_unsigned() && !sd->is_number_integer()) throw ConfigError("seed must be an integer");
        seed = sd->get<std::uint64_t>();
    }
    s.finish();
    c.synth.preprocess = c.preprocess;
    c.stream.preprocess = c.preprocess;
    c.stream.window = c.preprocess.window;
    if (seed) c.apply_seed(*seed);
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

std::string config_hash(const json& j) {
    const std::uint64_t h = hash_string(j.dump());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace csifall
