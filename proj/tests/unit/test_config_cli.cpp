#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "csifall/checkpoint.hpp"
#include "csifall/cli.hpp"
#include "csifall/config.hpp"
#include "csifall/errors.hpp"
#include "test_util.hpp"

using namespace csifall;
using nlohmann::json;

namespace {

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    Run r;
    r.code = run_command(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

json read_json(const std::filesystem::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Tiny model, two environments, one short epoch.
std::filesystem::path small_config(const std::filesystem::path& dir) {
    RunConfig c;
    c.model = desk_model_config();
    c.training.epochs = 1;
    c.training.batch_size = 4;
    c.synth = make_synth_spec(2, 1, 2, 2, 0);
    json j = to_json(c);
    const auto path = dir / "config.json";
    std::ofstream(path) << j.dump(2);
    return path;
}

}  // namespace

TEST_SUITE("config_cli") {
    TEST_CASE("run config survives a JSON round trip") {
        RunConfig c;
        c.model = desk_model_config();
        c.model.dvg.alpha = 42.0;
        c.training.focal_alpha = 2.5;
        c.training.augment.p_nlos = 0.1;
        c.stream.smoother.history_size = 5;
        c.synth = make_synth_spec(3, 1, 5, 6, 9);
        c.preprocess.lowpass.order = 6;
        const RunConfig back = run_config_from_json(to_json(c));
        CHECK(to_json(back) == to_json(c));
        CHECK(back.model == c.model);
        CHECK(back.stream.preprocess.lowpass.order == 6);
        CHECK(back.synth.preprocess.lowpass.order == 6);
        CHECK(config_hash(to_json(back)) == config_hash(to_json(c)));
        c.training.lr = 1e-3;
        CHECK(config_hash(to_json(back)) != config_hash(to_json(c)));
    }

    TEST_CASE("unknown keys and bad values are configuration errors") {
        CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"model": {"dmodel": 64}})")), ConfigError);
        CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"bogus": {}})")), ConfigError);
        CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"model": {"d_model": 30}})")), ConfigError);
        CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"training": {"lr": "fast"}})")), ConfigError);
        CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"stream": {"threshold": 1.2}})")), ConfigError);
        const RunConfig s = run_config_from_json(json::parse(R"({"seed": 17})"));
        CHECK(s.training.seed == 17);
        CHECK(s.synth.seed == 17);
        CHECK(s.training.augment.rng_seed == 17);
    }

    TEST_CASE("exit codes") {
        CHECK(cli({}).code == kExitUsage);
        CHECK(cli({"frobnicate"}).code == kExitUsage);
        CHECK(cli({"train", "--no-such-flag"}).code == kExitUsage);
        const auto dir = testutil::temp_dir("cli_codes");
        std::ofstream(dir / "bad.json") << R"({"model": {"n_heads": 0}})";
        const Run bad = cli({"synth", "--config", (dir / "bad.json").string(), "--out", (dir / "ds").string()});
        CHECK(bad.code == kExitUsage);
        CHECK(bad.err.find("n_heads") != std::string::npos);
        const Run missing = cli({"eval", "--run-dir", (dir / "r").string(), "--index", (dir / "none.json").string(),
                                 "--checkpoint", (dir / "none.csfk").string()});
        CHECK(missing.code == kExitRuntime);
        CHECK(cli({"stream", "--checkpoint", "x.csfk"}).code == kExitUsage);
    }

    TEST_CASE("synth output is byte-identical across runs and honours --seed") {
        const auto dir = testutil::temp_dir("cli_synth");
        const auto cfg = small_config(dir);
        REQUIRE(cli({"synth", "--config", cfg.string(), "--out", (dir / "a").string()}).code == kExitOk);
        REQUIRE(cli({"synth", "--config", cfg.string(), "--out", (dir / "b").string()}).code == kExitOk);
        REQUIRE(cli({"synth", "--config", cfg.string(), "--seed", "5", "--out", (dir / "c").string()}).code == kExitOk);
        const auto idx = read_json(dir / "a" / "index.json");
        REQUIRE(idx["samples"].size() == 8);
        const std::string first = idx["samples"][0]["file"];
        CHECK(slurp(dir / "a" / first) == slurp(dir / "b" / first));
        CHECK(slurp(dir / "a" / first) != slurp(dir / "c" / first));
        CHECK(read_json(dir / "c" / "config.json")["synth"]["seed"] == 5);

        setenv("CSIFALL_SEED", "7", 1);
        REQUIRE(cli({"synth", "--config", cfg.string(), "--out", (dir / "d").string()}).code == kExitOk);
        REQUIRE(cli({"synth", "--config", cfg.string(), "--seed", "8", "--out", (dir / "e").string()}).code == kExitOk);
        unsetenv("CSIFALL_SEED");
        CHECK(read_json(dir / "d" / "config.json")["training"]["seed"] == 7);
        CHECK(read_json(dir / "e" / "config.json")["training"]["seed"] == 8);

        const Run rec = cli({"synth", "--config", cfg.string(), "--replay-out", (dir / "r.csir").string(),
                             "--replay-kind", "still", "--duration", "6"});
        REQUIRE(rec.code == kExitOk);
        CHECK(json::parse(rec.out)["frames"] == 6000);
        CHECK(read_replay(dir / "r.csir").size() == 6000);
    }

    TEST_CASE("train, eval, loeo, stream and inspect run end to end") {
        const auto dir = testutil::temp_dir("cli_e2e");
        const auto cfg = small_config(dir);
        const std::string c = cfg.string();
        REQUIRE(cli({"synth", "--config", c, "--out", (dir / "ds").string()}).code == kExitOk);
        const std::string index = (dir / "ds" / "index.json").string();

        const Run train = cli({"train", "--config", c, "--index", index, "--exclude-env", "B", "--run-dir",
                               (dir / "train").string()});
        REQUIRE(train.code == kExitOk);
        CHECK(json::parse(train.out)["train_samples"] == 4);
        const auto ckpt = dir / "train" / "checkpoint.csfk";
        CHECK(std::filesystem::exists(ckpt));
        CHECK(std::filesystem::exists(dir / "train" / "loss_log.csv"));
        CHECK(read_json(dir / "train" / "config.json")["model"]["backbone"] == "tiny_cnn");

        const Run ev = cli({"eval", "--config", c, "--index", index, "--checkpoint", ckpt.string(), "--env", "B",
                            "--run-dir", (dir / "eval").string()});
        REQUIRE(ev.code == kExitOk);
        const auto m = read_json(dir / "eval" / "metrics.json");
        CHECK(m.contains("accuracy"));
        CHECK(std::filesystem::exists(dir / "eval" / "predictions.csv"));

        setenv("CSIFALL_RUN_DIR", (dir / "loeo").string().c_str(), 1);
        const Run lo = cli({"loeo", "--config", c, "--index", index, "--env", "A"});
        unsetenv("CSIFALL_RUN_DIR");
        REQUIRE(lo.code == kExitOk);
        CHECK(read_json(dir / "loeo" / "metrics.json")["folds"].size() == 1);

        REQUIRE(cli({"synth", "--config", c, "--replay-out", (dir / "fall.csv").string(), "--replay-kind",
                     "fall_front", "--duration", "7", "--event-at", "3", "--csv"})
                    .code == kExitOk);
        const Run st = cli({"stream", "--config", c, "--checkpoint", ckpt.string(), "--input",
                            (dir / "fall.csv").string(), "--run-dir", (dir / "stream").string()});
        REQUIRE(st.code == kExitOk);
        std::istringstream lines(st.out);
        std::string line;
        int n = 0;
        while (std::getline(lines, line)) {
            const auto j = json::parse(line);
            CHECK(j["window_id"] == n);
            ++n;
        }
        CHECK(n == 5);

        const Run in = cli({"inspect", "--checkpoint", ckpt.string(), "--index", index, "--sample",
                            json::parse(slurp(index))["samples"][0]["sample_id"].get<std::string>(), "--out",
                            (dir / "inspect").string()});
        REQUIRE(in.code == kExitOk);
        for (const char* f : {"dvg_mask_rx0.csv", "cbam_channel.csv", "cbam_spatial.csv", "attention_l0_h0.csv",
                              "shapes.csv"})
            CHECK(std::filesystem::exists(dir / "inspect" / f));
    }
}
