#include "csifall/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "csifall/checkpoint.hpp"
#include "csifall/config.hpp"
#include "csifall/errors.hpp"
#include "csifall/net.hpp"

namespace csifall {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string run_dir;
};

struct Options {
    Common common;
    // synth
    std::string out_dir;
    std::string replay_out;
    std::string replay_kind = "fall_front";
    std::string replay_env;
    double duration_s = 12.0;
    double event_at_s = 6.0;
    bool replay_csv = false;
    // train / eval / loeo / inspect
    std::string index_path;
    std::string checkpoint;
    std::string test_env;
    bool random_split = false;
    double train_fraction = 0.8;
    bool tta = false;
    std::vector<std::string> envs;
    std::string sample_id;
    std::string tensor_path;
    std::string inspect_out;
    // stream
    std::string input;
    std::string input_tcp;
    std::string output_tcp;
    std::optional<int> listen_port;
    bool threaded = false;
    std::optional<double> threshold;
    std::optional<int> history;
};

RunConfig effective_config(const Options& o) {
    RunConfig cfg = o.common.config_path.empty() ? RunConfig{} : load_run_config(o.common.config_path);
    if (const char* env = std::getenv("CSIFALL_SEED")) {
        try {
            cfg.apply_seed(std::stoull(env));
        } catch (const std::exception&) {
            throw ConfigError(std::string("CSIFALL_SEED is not an unsigned integer: ") + env);
        }
    }
    if (o.common.seed) cfg.apply_seed(*o.common.seed);
    if (o.threshold) cfg.stream.smoother.threshold = *o.threshold;
    if (o.history) cfg.stream.smoother.history_size = *o.history;
    if (o.threaded) cfg.stream.threaded = true;
    cfg.validate();
    return cfg;
}

std::string timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

fs::path resolve_run_dir(const Options& o, const std::string& command, const RunConfig& cfg) {
    fs::path dir;
    if (!o.common.run_dir.empty()) dir = o.common.run_dir;
    else if (const char* env = std::getenv("CSIFALL_RUN_DIR")) dir = env;
    else dir = fs::path("runs") / (command + "-" + config_hash(to_json(cfg)) + "-" + timestamp());
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

void write_effective_config(const fs::path& dir, const RunConfig& cfg) {
    write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
}

void write_matrix_csv(const fs::path& path, const nn::Tensor& t, int rows, int cols, std::size_t offset = 0) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    char buf[32];
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            std::snprintf(buf, sizeof buf, "%.9g", t[offset + static_cast<std::size_t>(r) * cols + c]);
            out << (c ? "," : "") << buf;
        }
        out << "\n";
    }
}

DatasetIndex require_index(const Options& o) {
    if (o.index_path.empty()) throw ConfigError("--index is required");
    return load_index(o.index_path);
}

// ---------------------------------------------------------------- subcommands

int cmd_synth(const Options& o, std::ostream& out) {
    RunConfig cfg = effective_config(o);
    if (!o.replay_out.empty()) {
        const EventKind kind = parse_event(o.replay_kind);
        const SynthEnvironment* env = nullptr;
        for (const auto& e : cfg.synth.environments)
            if (o.replay_env.empty() || e.id == o.replay_env) {
                env = &e;
                break;
            }
        if (!env) throw ConfigError("no synthetic environment \"" + o.replay_env + "\"");
        const std::uint64_t seed = derive_seed(cfg.synth.seed, hash_string("recording:" + o.replay_kind + ":" + env->id));
        const Recording rec = generate_recording(kind, *env, cfg.synth, o.duration_s, o.event_at_s, seed);
        if (o.replay_csv) {
            std::ofstream f(o.replay_out);
            if (!f) throw IoError("cannot write " + o.replay_out);
            write_replay_csv(f, rec.frames);
        } else {
            write_replay(o.replay_out, rec.frames, static_cast<std::uint32_t>(cfg.synth.rate_hz));
        }
        const json j = {{"replay", o.replay_out},
                        {"kind", o.replay_kind},
                        {"environment", env->id},
                        {"frames", rec.frames.size()},
                        {"event_start_s", rec.event_start_s},
                        {"event_end_s", rec.event_end_s}};
        out << j.dump() << "\n";
        return kExitOk;
    }
    if (o.out_dir.empty()) throw ConfigError("synth needs --out (dataset) or --replay-out (recording)");
    const DatasetIndex index = generate_dataset(cfg.synth, o.out_dir);
    write_effective_config(o.out_dir, cfg);
    out << json{{"index", (fs::path(o.out_dir) / "index.json").string()},
                {"samples", index.samples.size()},
                {"environments", index.environments.size()}}
               .dump()
        << "\n";
    return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
    const RunConfig cfg = effective_config(o);
    const DatasetIndex index = require_index(o);
    std::vector<std::string> train_ids;
    if (o.random_split) {
        train_ids = random_split(index, o.train_fraction, cfg.training.seed).train_ids;
    } else {
        for (const auto& s : index.samples)
            if (s.environment_id != o.test_env) train_ids.push_back(s.sample_id);
    }
    const fs::path dir = resolve_run_dir(o, "train", cfg);
    write_effective_config(dir, cfg);
    FallDetector model = make_model(cfg.model, cfg.training.seed);
    TensorCache cache(index);
    const auto log = train_model(model, cfg.training, train_ids, index, cache);
    const fs::path ckpt = o.checkpoint.empty() ? dir / "checkpoint.csfk" : fs::path(o.checkpoint);
    save_checkpoint(model, ckpt);
    write_loss_log(dir / "loss_log.csv", log);
    out << json{{"checkpoint", ckpt.string()},
                {"run_dir", dir.string()},
                {"train_samples", train_ids.size()},
                {"final_train_loss", log.empty() ? json(nullptr) : json(log.back().train_loss)}}
               .dump()
        << "\n";
    return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
    const RunConfig cfg = effective_config(o);
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    const DatasetIndex index = require_index(o);
    const FallDetector model = load_checkpoint(o.checkpoint);
    std::vector<std::string> ids;
    if (o.random_split) {
        ids = random_split(index, o.train_fraction, cfg.training.seed).test_ids;
    } else {
        for (const auto& s : index.samples)
            if (o.test_env.empty() || s.environment_id == o.test_env) ids.push_back(s.sample_id);
    }
    if (ids.empty()) throw ConfigError("no samples selected for evaluation");
    TensorCache cache(index);
    const EvalResult r = evaluate(model, ids, index, cache, o.tta, cfg.training);
    const fs::path dir = resolve_run_dir(o, "eval", cfg);
    write_effective_config(dir, cfg);
    json j = json::parse(metrics_json(r.metrics));
    j["tta"] = o.tta;
    j["tta_k"] = o.tta ? cfg.training.tta_k : 1;
    j["n_samples"] = ids.size();
    write_text(dir / "metrics.json", j.dump(2) + "\n");
    std::ofstream preds(dir / "predictions.csv");
    preds << "sample_id,label,p_fall\n";
    for (const auto& p : r.predictions) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", p.p_fall);
        preds << p.sample_id << "," << p.label << "," << buf << "\n";
    }
    out << j.dump() << "\n";
    return kExitOk;
}

int cmd_loeo(const Options& o, std::ostream& out) {
    const RunConfig cfg = effective_config(o);
    const DatasetIndex index = require_index(o);
    const fs::path dir = resolve_run_dir(o, "loeo", cfg);
    write_effective_config(dir, cfg);
    LoeoOptions lo;
    lo.tta = o.tta;
    lo.run_dir = dir;
    lo.model_seed = cfg.training.seed;
    lo.only_environments = o.envs;
    const LoeoResult r = run_loeo(cfg.model, cfg.training, index, lo);
    const std::string text = loeo_json(r);
    write_text(dir / "metrics.json", text + "\n");
    out << json{{"run_dir", dir.string()}, {"folds", r.folds.size()}, {"mean_accuracy", r.mean_accuracy}}.dump()
        << "\n";
    return kExitOk;
}

int cmd_stream(const Options& o, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = effective_config(o);
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    const int inputs = !o.input.empty() + !o.input_tcp.empty() + o.listen_port.has_value();
    if (inputs != 1) throw ConfigError("give exactly one of --input, --input-tcp, --listen");
    const FallDetector model = load_checkpoint(o.checkpoint);

    int out_fd = -1;
    if (!o.output_tcp.empty()) out_fd = tcp_connect(o.output_tcp);
    RecordSink sink = [&](const StreamRecord& r) {
        const std::string line = to_ndjson(r) + "\n";
        if (out_fd >= 0) write_all(out_fd, line);
        else out << line << std::flush;
    };

    StreamSummary summary;
    int in_fd = -1, listen_fd = -1;
    try {
        if (!o.input.empty()) {
            std::ifstream in(o.input, std::ios::binary);
            if (!in) throw IoError("cannot open replay " + o.input);
            char magic[4] = {};
            in.read(magic, 4);
            in.seekg(0);
            if (std::string(magic, 4) == "CSIR") {
                summary = run_live(replay_source(in), model, cfg.stream, sink);
            } else {
                const auto frames = read_replay(o.input);
                summary = run_live(vector_source(frames), model, cfg.stream, sink);
            }
        } else {
            if (o.listen_port) {
                int port = 0;
                listen_fd = tcp_listen(*o.listen_port, &port);
                err << json{{"listening", port}}.dump() << std::endl;
                in_fd = tcp_accept(listen_fd);
            } else {
                in_fd = tcp_connect(o.input_tcp);
            }
            FdInBuf buf(in_fd);
            std::istream in(&buf);
            summary = run_live(replay_source(in), model, cfg.stream, sink);
        }
    } catch (...) {
        close_fd(in_fd);
        close_fd(listen_fd);
        close_fd(out_fd);
        throw;
    }
    close_fd(in_fd);
    close_fd(listen_fd);
    close_fd(out_fd);
    err << json{{"frames", summary.frames},
                {"windows", summary.windows},
                {"drops", summary.drops},
                {"mean_latency_ms", summary.mean_latency_ms}}
               .dump()
        << std::endl;
    return kExitOk;
}

int cmd_inspect(const Options& o, std::ostream& out) {
    const RunConfig cfg = effective_config(o);
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    const FallDetector model = load_checkpoint(o.checkpoint);
    CsiTensor x;
    if (!o.tensor_path.empty()) {
        x = read_tensor_file(o.tensor_path);
    } else {
        if (o.sample_id.empty()) throw ConfigError("inspect needs --sample (with --index) or --tensor");
        const DatasetIndex index = require_index(o);
        x = read_tensor_file(index.resolve(index.sample(o.sample_id)));
    }
    if (x.stage == TensorStage::instance_normalized) x = channel_standardize(x);
    ForwardOptions fo;
    fo.keep_diagnostics = true;
    const ForwardResult r = model.forward(x, fo);
    const fs::path dir = o.inspect_out.empty() ? resolve_run_dir(o, "inspect", cfg) : fs::path(o.inspect_out);
    fs::create_directories(dir);
    const auto& d = r.diag;
    if (!d.dvg_mask.empty()) {
        const int T = d.dvg_mask.dim(1), S = d.dvg_mask.dim(2);
        for (int c = 0; c < d.dvg_mask.dim(0); ++c) {
            write_matrix_csv(dir / ("dvg_mask_rx" + std::to_string(c) + ".csv"), d.dvg_mask, T, S,
                             static_cast<std::size_t>(c) * T * S);
        }
    }
    if (!d.channel_mask.empty()) write_matrix_csv(dir / "cbam_channel.csv", d.channel_mask, d.channel_mask.dim(0), 1);
    if (!d.spatial_mask.empty()) {
        write_matrix_csv(dir / "cbam_spatial.csv", d.spatial_mask, d.spatial_mask.dim(1), d.spatial_mask.dim(2));
    }
    const int heads = model.config().n_heads;
    for (std::size_t i = 0; i < d.attention.size(); ++i) {
        const auto& a = d.attention[i];
        write_matrix_csv(dir / ("attention_l" + std::to_string(i / heads) + "_h" + std::to_string(i % heads) + ".csv"),
                         a, a.dim(0), a.dim(1));
    }
    std::ofstream shapes(dir / "shapes.csv");
    shapes << "stage,shape\n";
    for (const auto& [name, s] : d.shapes) shapes << name << "," << nn::shape_str(s) << "\n";
    out << json{{"out", dir.string()}, {"p_fall", r.probs.p_fall}, {"p_nonfall", r.probs.p_nonfall}}.dump() << "\n";
    return kExitOk;
}

void add_common(CLI::App* sub, Options& o) {
    sub->add_option("--config", o.common.config_path, "Run configuration JSON")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.common.seed, "Seed for every random stream");
    sub->add_option("--run-dir", o.common.run_dir, "Output directory (default runs/<cmd>-<hash>-<time>)");
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"WiFi CSI fall detection toolkit", "csifall"};
    app.require_subcommand(1);
    Options o;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset or a replay recording");
    add_common(synth, o);
    synth->add_option("--out", o.out_dir, "Dataset output directory");
    synth->add_option("--replay-out", o.replay_out, "Write one continuous recording instead of a dataset");
    synth->add_option("--replay-kind", o.replay_kind, "Event kind for the recording");
    synth->add_option("--replay-env", o.replay_env, "Environment id for the recording (default: first)");
    synth->add_option("--duration", o.duration_s, "Recording length in seconds");
    synth->add_option("--event-at", o.event_at_s, "Event onset in seconds");
    synth->add_flag("--csv", o.replay_csv, "Write the recording as CSV");

    auto* train = app.add_subcommand("train", "Train on a dataset index");
    add_common(train, o);
    train->add_option("--index", o.index_path, "Dataset index.json");
    train->add_option("--exclude-env", o.test_env, "Hold this environment out of training");
    train->add_flag("--random-split", o.random_split, "Train on a random split instead");
    train->add_option("--train-fraction", o.train_fraction, "Fraction used by --random-split");
    train->add_option("--checkpoint", o.checkpoint, "Checkpoint output path");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    add_common(eval, o);
    eval->add_option("--index", o.index_path, "Dataset index.json");
    eval->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate");
    eval->add_option("--env", o.test_env, "Only samples of this environment");
    eval->add_flag("--random-split", o.random_split, "Evaluate the held-out part of a random split");
    eval->add_option("--train-fraction", o.train_fraction, "Fraction used by --random-split");
    eval->add_flag("--tta", o.tta, "Average predictions over test-time perturbations");

    auto* loeo = app.add_subcommand("loeo", "Leave-one-environment-out sweep");
    add_common(loeo, o);
    loeo->add_option("--index", o.index_path, "Dataset index.json");
    loeo->add_flag("--tta", o.tta, "Also report test-time-augmented metrics");
    loeo->add_option("--env", o.envs, "Only hold out these environments");

    auto* stream = app.add_subcommand("stream", "Live inference over a replay file or TCP stream");
    add_common(stream, o);
    stream->add_option("--checkpoint", o.checkpoint, "Checkpoint to run");
    stream->add_option("--input", o.input, "Replay file (binary or CSV)");
    stream->add_option("--input-tcp", o.input_tcp, "Read the binary replay format from host:port");
    stream->add_option("--listen", o.listen_port, "Accept one producer on 127.0.0.1:<port>");
    stream->add_option("--output-tcp", o.output_tcp, "Send NDJSON records to host:port instead of stdout");
    stream->add_flag("--threaded", o.threaded, "Producer/consumer pipeline with a bounded queue");
    stream->add_option("--threshold", o.threshold, "Alarm threshold on p_fall");
    stream->add_option("--history", o.history, "Consecutive alarms needed for Alert");

    auto* inspect = app.add_subcommand("inspect", "Dump DVG mask, CBAM maps and attention as CSV");
    add_common(inspect, o);
    inspect->add_option("--checkpoint", o.checkpoint, "Checkpoint to inspect");
    inspect->add_option("--index", o.index_path, "Dataset index.json");
    inspect->add_option("--sample", o.sample_id, "Sample id from the index");
    inspect->add_option("--tensor", o.tensor_path, "Sample tensor file");
    inspect->add_option("--out", o.inspect_out, "Output directory");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kExitOk;
        }
        err << "error: " << e.what() << "\n" << "run with --help for usage\n";
        return kExitUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth(o, out);
        if (train->parsed()) return cmd_train(o, out);
        if (eval->parsed()) return cmd_eval(o, out);
        if (loeo->parsed()) return cmd_loeo(o, out);
        if (stream->parsed()) return cmd_stream(o, out, err);
        if (inspect->parsed()) return cmd_inspect(o, out);
    } catch (const ConfigError& e) {
        err << "invalid configuration: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

int run_command(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_command(args, std::cout, std::cerr);
}

}  // namespace csifall
