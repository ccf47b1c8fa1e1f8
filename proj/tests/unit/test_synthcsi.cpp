#include <doctest.h>

#include <fstream>
#include <numbers>

#include "csifall/errors.hpp"
#include "csifall/synthcsi.hpp"
#include "test_util.hpp"

using namespace csifall;

namespace {

double column_variance(const nn::Tensor& w, int col, int t0, int t1) {
    double m = 0.0;
    for (int t = t0; t < t1; ++t) m += w.at(t, col);
    m /= (t1 - t0);
    double v = 0.0;
    for (int t = t0; t < t1; ++t) v += (w.at(t, col) - m) * (w.at(t, col) - m);
    return v / (t1 - t0);
}

double mean_column_variance(const nn::Tensor& w, int t0, int t1) {
    double s = 0.0;
    for (int c = 0; c < w.dim(1); ++c) s += column_variance(w, c, t0, t1);
    return s / w.dim(1);
}

// Largest two-pass variance over any 15-sample run of any column.
double max_local_variance(const nn::Tensor& w) {
    double best = 0.0;
    for (int c = 0; c < w.dim(1); ++c)
        for (int t = 0; t + 15 <= w.dim(0); t += 3) best = std::max(best, column_variance(w, c, t, t + 15));
    return best;
}

// Power of one column in [f_lo, f_hi) Hz by direct DFT.
double band_power(const nn::Tensor& w, int col, double rate, double f_lo, double f_hi) {
    const int n = w.dim(0);
    double mean = 0.0;
    for (int t = 0; t < n; ++t) mean += w.at(t, col);
    mean /= n;
    double p = 0.0;
    for (int k = static_cast<int>(std::ceil(f_lo * n / rate)); k < f_hi * n / rate; ++k) {
        double re = 0.0, im = 0.0;
        for (int t = 0; t < n; ++t) {
            const double a = 2.0 * std::numbers::pi * k * t / n;
            re += (w.at(t, col) - mean) * std::cos(a);
            im -= (w.at(t, col) - mean) * std::sin(a);
        }
        p += re * re + im * im;
    }
    return p;
}

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("synthcsi") {
    TEST_CASE("event kinds and labels") {
        for (EventKind k : kFallKinds) CHECK(event_label(k) == kFallClass);
        for (EventKind k : kNonfallKinds) CHECK(event_label(k) == kNonfallClass);
        CHECK(parse_event("fall_left") == EventKind::fall_left);
        CHECK(std::string(event_name(EventKind::wave)) == "wave");
        CHECK_THROWS(parse_event("jump"));
    }

    TEST_CASE("still windows carry only sensor noise") {
        const SynthSpec spec = make_synth_spec(2, 1, 1, 1, 3);
        for (const auto& env : spec.environments) {
            Rng rng(7);
            const SynthEvent e = generate_event(EventKind::still, env, spec, rng);
            CHECK(e.label == kNonfallClass);
            for (int c = 0; c < 90; ++c)
                CHECK(column_variance(e.window.data, c, 0, 5000) < 3.0 * spec.sensor_noise * spec.sensor_noise);
        }
    }

    TEST_CASE("fall bursts stand far above the background") {
        const SynthSpec spec = make_synth_spec(2, 1, 1, 1, 4);
        Rng still_rng(1);
        const double background =
            mean_column_variance(generate_event(EventKind::still, spec.environments[0], spec, still_rng).window.data, 0, 5000);
        for (EventKind k : kFallKinds) {
            for (int i = 0; i < 3; ++i) {
                Rng rng(100 + i);
                const SynthEvent e = generate_event(k, spec.environments[0], spec, rng);
                const double len = e.burst_end_s - e.burst_start_s;
                CHECK(len >= 0.3 - 1e-9);
                CHECK(len <= 0.5 + 1e-9);
                const int t0 = static_cast<int>(e.burst_start_s * 1000), t1 = static_cast<int>(e.burst_end_s * 1000);
                CHECK(mean_column_variance(e.window.data, t0, t1) > 10.0 * background);
            }
        }
    }

    TEST_CASE("generation is deterministic") {
        const SynthSpec spec = make_synth_spec(1, 0, 1, 1, 5);
        Rng a(9), b(9);
        const SynthEvent x = generate_event(EventKind::pick, spec.environments[0], spec, a);
        const SynthEvent y = generate_event(EventKind::pick, spec.environments[0], spec, b);
        CHECK(nn::max_abs_diff(x.window.data, y.window.data) == 0.0);
    }

    TEST_CASE("every fall out-varies every still window by at least 5x") {
        const SynthSpec spec = make_synth_spec(2, 1, 1, 1, 6);
        double min_fall = 1e300, max_still = 0.0;
        for (int i = 0; i < 8; ++i) {
            const auto& env = spec.environments[i % 2];
            Rng rf(200 + i), rs(300 + i);
            min_fall = std::min(min_fall, max_local_variance(generate_event(kFallKinds[i % 4], env, spec, rf).window.data));
            max_still = std::max(max_still, max_local_variance(generate_event(EventKind::still, env, spec, rs).window.data));
        }
        CHECK(min_fall >= 5.0 * max_still);
    }

    TEST_CASE("NLoS halves the high-frequency burst power at matched seeds") {
        SynthSpec spec = make_synth_spec(1, 0, 1, 1, 7);
        SynthEnvironment los = spec.environments[0];
        SynthEnvironment nlos = los;
        nlos.nlos = true;
        double p_los = 0.0, p_nlos = 0.0;
        for (int i = 0; i < 3; ++i) {
            Rng a(400 + i), b(400 + i);
            const SynthEvent el = generate_event(EventKind::fall_front, los, spec, a);
            const SynthEvent en = generate_event(EventKind::fall_front, nlos, spec, b);
            for (int c : {0, 17, 45, 89}) {
                p_los += band_power(el.window.data, c, 1000.0, 5.0, 50.0);
                p_nlos += band_power(en.window.data, c, 1000.0, 5.0, 50.0);
            }
        }
        CHECK(p_nlos <= 0.5 * p_los);
    }

    TEST_CASE("environments get distinct static backgrounds") {
        const SynthSpec spec = make_synth_spec(4, 1, 1, 1, 8);
        for (std::size_t i = 0; i < spec.environments.size(); ++i)
            for (std::size_t j = i + 1; j < spec.environments.size(); ++j) {
                const auto a = environment_background(spec.environments[i], spec);
                const auto b = environment_background(spec.environments[j], spec);
                int differ = 0;
                for (std::size_t k = 0; k < a.size(); ++k) differ += std::abs(a[k] - b[k]) > spec.sensor_noise;
                CHECK(differ >= 0.9 * static_cast<double>(a.size()));
            }
    }

    TEST_CASE("dataset counts and byte-level reproducibility") {
        const SynthSpec spec = make_synth_spec(4, 1, 10, 10, 9);
        const auto d1 = testutil::temp_dir("synth_a");
        const DatasetIndex idx = generate_dataset(spec, d1);
        CHECK(idx.samples.size() == 80);
        CHECK(idx.environment_ids().size() == 4);
        int falls = 0;
        for (const auto& s : idx.samples) falls += s.label == kFallClass;
        CHECK(falls == 40);
        CHECK(idx.is_nlos("D"));
        const DatasetIndex back = load_index(d1 / "index.json");
        CHECK(back.samples.size() == 80);
        const CsiTensor t = read_tensor_file(back.resolve(back.samples[0]));
        CHECK(t.data.shape() == nn::Shape{3, 625, 30});
        CHECK(t.stage == TensorStage::instance_normalized);

        SynthSpec small = make_synth_spec(2, 1, 2, 2, 10);
        const auto d2 = testutil::temp_dir("synth_b"), d3 = testutil::temp_dir("synth_c");
        const DatasetIndex x = generate_dataset(small, d2), y = generate_dataset(small, d3);
        REQUIRE(x.samples.size() == y.samples.size());
        CHECK(file_bytes(d2 / "index.json") == file_bytes(d3 / "index.json"));
        for (std::size_t i = 0; i < x.samples.size(); ++i)
            CHECK(file_bytes(x.resolve(x.samples[i])) == file_bytes(y.resolve(y.samples[i])));

        SynthSpec none = make_synth_spec(2, 0, 0, 0, 1);
        CHECK(generate_dataset(none, testutil::temp_dir("synth_empty")).samples.empty());
        none.falls_per_env = -1;
        CHECK_THROWS_AS(none.validate(), ConfigError);
    }

    TEST_CASE("recordings carry one random PERM and the event inside the duration") {
        const SynthSpec spec = make_synth_spec(1, 0, 1, 1, 11);
        const Recording r = generate_recording(EventKind::fall_back, spec.environments[0], spec, 8.0, 4.0, 12);
        REQUIRE(r.frames.size() == 8000);
        for (const auto& f : r.frames) CHECK(f.perm == r.frames[0].perm);
        CHECK(is_valid_perm(r.frames[0].perm));
        CHECK(r.event_start_s >= 4.0 - 1e-9);
        CHECK(r.event_end_s <= 8.0);
        CHECK(r.frames[1].timestamp_us - r.frames[0].timestamp_us == 1000);
        // Undoing the PERM recovers the same logical background as a still recording.
        const Recording s = generate_recording(EventKind::still, spec.environments[0], spec, 1.0, 0.5, 13);
        const CsiFrame a = apply_perm(r.frames[0]), b = apply_perm(s.frames[0]);
        for (int k = 0; k < 90; ++k) CHECK(std::abs(a.amplitude[k] - b.amplitude[k]) < 1.0);
    }
}
