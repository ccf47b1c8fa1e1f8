#include "csifall/synthcsi.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "csifall/errors.hpp"

namespace csifall {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct KindName {
    EventKind kind;
    const char* name;
};

constexpr KindName kKindNames[] = {
    {EventKind::fall_front, "fall_front"}, {EventKind::fall_back, "fall_back"}, {EventKind::fall_left, "fall_left"},
    {EventKind::fall_right, "fall_right"}, {EventKind::sit, "sit"},             {EventKind::stand, "stand"},
    {EventKind::walk, "walk"},             {EventKind::pick, "pick"},           {EventKind::wave, "wave"},
    {EventKind::still, "still"}};

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

using StreamWeights = std::array<double, kNumStreams>;

enum class Shape { half_sine, tukey };

double envelope(Shape shape, double u) {
    if (u < 0.0 || u > 1.0) return 0.0;
    if (shape == Shape::half_sine) return std::sin(std::numbers::pi * u);
    constexpr double ramp = 0.15;
    if (u < ramp) return 0.5 * (1.0 - std::cos(std::numbers::pi * u / ramp));
    if (u > 1.0 - ramp) return 0.5 * (1.0 - std::cos(std::numbers::pi * (1.0 - u) / ramp));
    return 1.0;
}

// Per-stream motion sensitivity: antenna weight times a smooth subcarrier pattern.
StreamWeights sensitivity(const std::array<double, kNumRx>& antenna, Rng& rng) {
    StreamWeights w{};
    for (int a = 0; a < kNumRx; ++a) {
        const double f = uniform(rng, 0.03, 0.15);
        const double phase = uniform(rng, 0.0, kTwoPi);
        for (int s = 0; s < kNumSub; ++s) {
            w[static_cast<std::size_t>(a * kNumSub + s)] = antenna[a] * (0.6 + 0.4 * std::abs(std::sin(kTwoPi * f * s + phase)));
        }
    }
    return w;
}

// Adds amp * envelope * (unit-RMS sum of tones in [f_lo, f_hi]) over [t0, t1) seconds.
void add_burst(nn::Tensor& dyn, double rate, const StreamWeights& sens, double t0, double t1, double amp, double f_lo,
               double f_hi, Shape shape, Rng& rng, int tones = 4) {
    const int frames = dyn.dim(0);
    const int i0 = std::max(0, static_cast<int>(std::ceil(t0 * rate)));
    const int i1 = std::min(frames, static_cast<int>(std::ceil(t1 * rate)));
    if (i1 <= i0 || t1 <= t0) return;
    std::vector<double> freqs(static_cast<std::size_t>(tones));
    for (auto& f : freqs) f = uniform(rng, f_lo, f_hi);
    std::vector<double> phases(static_cast<std::size_t>(tones * kNumStreams));
    for (auto& p : phases) p = uniform(rng, 0.0, kTwoPi);
    const double tone_amp = std::sqrt(2.0 / tones);
    for (int i = i0; i < i1; ++i) {
        const double t = i / rate;
        const double e = amp * envelope(shape, (t - t0) / (t1 - t0));
        if (e == 0.0) continue;
        for (int k = 0; k < kNumStreams; ++k) {
            double v = 0.0;
            for (int j = 0; j < tones; ++j) v += std::sin(kTwoPi * freqs[j] * t + phases[static_cast<std::size_t>(j * kNumStreams + k)]);
            dyn.at(i, k) += e * sens[static_cast<std::size_t>(k)] * tone_amp * v;
        }
    }
}

// Static level change ramping in over [t0, t1] and held to the end of the window.
void add_level_shift(nn::Tensor& dyn, double rate, const StreamWeights& sens, double t0, double t1, double sd, Rng& rng) {
    std::normal_distribution<double> nd(0.0, sd);
    StreamWeights shift{};
    for (int k = 0; k < kNumStreams; ++k) shift[static_cast<std::size_t>(k)] = nd(rng) * sens[static_cast<std::size_t>(k)];
    const int frames = dyn.dim(0);
    for (int i = std::max(0, static_cast<int>(t0 * rate)); i < frames; ++i) {
        const double t = i / rate;
        const double u = t >= t1 ? 1.0 : 0.5 * (1.0 - std::cos(std::numbers::pi * (t - t0) / (t1 - t0)));
        for (int k = 0; k < kNumStreams; ++k) dyn.at(i, k) += u * shift[static_cast<std::size_t>(k)];
    }
}

// Short broadband transient (body impact).
void add_impact(nn::Tensor& dyn, double rate, const StreamWeights& sens, double t0, double amp, Rng& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    const int frames = dyn.dim(0);
    const int i0 = std::max(0, static_cast<int>(t0 * rate));
    const int len = static_cast<int>(0.05 * rate);
    for (int i = i0; i < std::min(frames, i0 + len); ++i) {
        const double decay = amp * std::exp(-3.0 * (i - i0) / static_cast<double>(len));
        for (int k = 0; k < kNumStreams; ++k) dyn.at(i, k) += decay * sens[static_cast<std::size_t>(k)] * nd(rng);
    }
}

std::array<double, kNumRx> fall_direction(EventKind k) {
    switch (k) {
        case EventKind::fall_front: return {1.0, 0.8, 0.6};
        case EventKind::fall_back: return {0.6, 0.8, 1.0};
        case EventKind::fall_left: return {1.0, 0.6, 0.8};
        default: return {0.8, 1.0, 0.6};
    }
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Background + dynamic + sensor noise, clamped at zero amplitude.
nn::Tensor compose(const std::vector<double>& background, const nn::Tensor& dynamic, double noise, Rng& rng) {
    std::normal_distribution<double> nd(0.0, noise);
    nn::Tensor out(dynamic.shape());
    for (int i = 0; i < dynamic.dim(0); ++i)
        for (int k = 0; k < kNumStreams; ++k) {
            const double v = background[static_cast<std::size_t>(k)] + dynamic.at(i, k) + nd(rng);
            out.at(i, k) = std::max(0.0, v);
        }
    return out;
}

}  // namespace

const char* event_name(EventKind k) {
    for (const auto& kn : kKindNames)
        if (kn.kind == k) return kn.name;
    return "unknown";
}

EventKind parse_event(const std::string& s) {
    for (const auto& kn : kKindNames)
        if (s == kn.name) return kn.kind;
    throw ParameterError("unknown event kind \"" + s + "\"");
}

bool is_fall(EventKind k) {
    return k == EventKind::fall_front || k == EventKind::fall_back || k == EventKind::fall_left ||
           k == EventKind::fall_right;
}

int event_label(EventKind k) { return is_fall(k) ? kFallClass : kNonfallClass; }

void SynthSpec::validate() const {
    if (falls_per_env < 0 || nonfalls_per_env < 0) throw ConfigError("synth counts must be >= 0");
    if (window < 1) throw ConfigError("synth.window must be >= 1");
    if (!(rate_hz > 0.0)) throw ConfigError("synth.rate_hz must be > 0");
    if (!(sensor_noise >= 0.0)) throw ConfigError("synth.sensor_noise must be >= 0");
    if (!(background_level > 0.0)) throw ConfigError("synth.background_level must be > 0");
    if (!(background_strength > 0.0)) throw ConfigError("synth.background_strength must be > 0");
    if (!(nlos_attenuation > 0.0 && nlos_attenuation <= 1.0)) throw ConfigError("synth.nlos_attenuation must lie in (0, 1]");
    if (nlos_smoothing < 1) throw ConfigError("synth.nlos_smoothing must be >= 1");
    std::vector<std::string> ids;
    for (const auto& e : environments) {
        if (e.id.empty()) throw ConfigError("synth environment ids must be nonempty");
        ids.push_back(e.id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ConfigError("synth environment ids must be unique");
}

SynthSpec make_synth_spec(int n_env, int n_nlos, int falls_per_env, int nonfalls_per_env, std::uint64_t seed) {
    if (n_env < 0 || n_env > 26 || n_nlos < 0 || n_nlos > n_env) throw ConfigError("invalid environment counts");
    SynthSpec s;
    s.seed = seed;
    s.falls_per_env = falls_per_env;
    s.nonfalls_per_env = nonfalls_per_env;
    for (int i = 0; i < n_env; ++i) {
        SynthEnvironment e;
        e.id = std::string(1, static_cast<char>('A' + i));
        e.background_seed = splitmix64(seed * 0x100 + static_cast<std::uint64_t>(i));
        e.nlos = i >= n_env - n_nlos;
        s.environments.push_back(e);
    }
    return s;
}

std::vector<double> environment_background(const SynthEnvironment& env, const SynthSpec& spec) {
    Rng rng(env.background_seed);
    std::vector<double> b(kNumStreams);
    for (int a = 0; a < kNumRx; ++a) {
        const double offset = uniform(rng, -3.0, 3.0);
        double amp[3], freq[3], phase[3];
        for (int j = 0; j < 3; ++j) {
            amp[j] = uniform(rng, 1.0, 2.0);
            freq[j] = uniform(rng, 0.02, 0.2);
            phase[j] = uniform(rng, 0.0, kTwoPi);
        }
        for (int s = 0; s < kNumSub; ++s) {
            double profile = offset;
            for (int j = 0; j < 3; ++j) profile += amp[j] * std::sin(kTwoPi * freq[j] * s + phase[j]);
            b[static_cast<std::size_t>(a * kNumSub + s)] = spec.background_strength * (spec.background_level + profile);
        }
    }
    return b;
}

Motion generate_motion(EventKind kind, int frames, double rate, double onset, Rng& rng) {
    Motion m;
    m.dynamic = nn::Tensor({frames, kNumStreams});
    nn::Tensor& d = m.dynamic;
    const double duration = frames / rate;

    if (is_fall(kind)) {
        const StreamWeights sens = sensitivity(fall_direction(kind), rng);
        const double pre = uniform(rng, 0.5, 1.5);
        add_burst(d, rate, sens, std::max(0.0, onset - pre), onset, 0.15, 1.0, 3.0, Shape::tukey, rng);
        const double len = uniform(rng, 0.3, 0.5);
        const double amp = uniform(rng, 2.0, 3.0);
        add_burst(d, rate, sens, onset, onset + len, amp, 3.0, 12.0, Shape::half_sine, rng);
        add_impact(d, rate, sens, onset + 0.8 * len, 1.5 * amp, rng);
        add_level_shift(d, rate, sens, onset, onset + len, 0.6, rng);
        m.burst_start_s = onset;
        m.burst_end_s = onset + len;
        return m;
    }

    std::array<double, kNumRx> antenna{};
    for (auto& a : antenna) a = uniform(rng, 0.6, 1.0);
    const StreamWeights sens = sensitivity(antenna, rng);
    switch (kind) {
        case EventKind::sit:
        case EventKind::stand: {
            const double len = uniform(rng, 1.0, 1.6);
            add_burst(d, rate, sens, onset, onset + len, uniform(rng, 0.6, 1.0), 0.5, 3.0, Shape::half_sine, rng);
            add_level_shift(d, rate, sens, onset, onset + len, 0.3, rng);
            m.burst_start_s = onset;
            m.burst_end_s = onset + len;
            break;
        }
        case EventKind::pick: {
            const double a = uniform(rng, 0.6, 0.8), gap = uniform(rng, 0.3, 0.6), b = uniform(rng, 0.6, 0.8);
            add_burst(d, rate, sens, onset, onset + a, uniform(rng, 0.6, 0.9), 0.5, 3.0, Shape::half_sine, rng);
            add_burst(d, rate, sens, onset + a + gap, onset + a + gap + b, uniform(rng, 0.6, 0.9), 0.5, 3.0,
                      Shape::half_sine, rng);
            m.burst_start_s = onset;
            m.burst_end_s = onset + a + gap + b;
            break;
        }
        case EventKind::walk: {
            const double start = std::max(0.0, onset - 1.0);
            const double len = uniform(rng, 3.0, 4.5);
            const double amp = uniform(rng, 0.5, 0.8);
            const double gait = uniform(rng, 1.5, 2.0);
            nn::Tensor carrier({frames, kNumStreams});
            add_burst(carrier, rate, sens, start, start + len, amp, 0.5, 2.5, Shape::tukey, rng);
            for (int i = 0; i < frames; ++i) {
                const double mod = 0.6 + 0.4 * std::sin(kTwoPi * gait * i / rate);
                for (int k = 0; k < kNumStreams; ++k) d.at(i, k) += mod * carrier.at(i, k);
            }
            m.burst_start_s = start;
            m.burst_end_s = std::min(duration, start + len);
            break;
        }
        case EventKind::wave: {
            StreamWeights local{};
            for (int a = 0; a < kNumRx; ++a) {
                const int first = std::uniform_int_distribution<int>(0, kNumSub - 8)(rng);
                for (int s = 0; s < kNumSub; ++s) {
                    const bool inside = s >= first && s < first + 8;
                    const auto k = static_cast<std::size_t>(a * kNumSub + s);
                    local[k] = sens[k] * (inside ? 1.0 : 0.1);
                }
            }
            const double len = uniform(rng, 2.0, 3.0);
            add_burst(d, rate, local, onset, onset + len, uniform(rng, 0.8, 1.2), 1.0, 2.0, Shape::tukey, rng);
            m.burst_start_s = onset;
            m.burst_end_s = onset + len;
            break;
        }
        default:
            break;
    }
    return m;
}

nn::Tensor nlos_filter(const nn::Tensor& dynamic, const SynthSpec& spec) {
    const int frames = dynamic.dim(0);
    nn::Tensor out(dynamic.shape());
    std::vector<double> column(static_cast<std::size_t>(frames));
    for (int k = 0; k < kNumStreams; ++k) {
        for (int i = 0; i < frames; ++i) column[static_cast<std::size_t>(i)] = dynamic.at(i, k);
        const std::vector<double> smooth = smooth_series(column, std::min(spec.nlos_smoothing, frames));
        for (int i = 0; i < frames; ++i) out.at(i, k) = spec.nlos_attenuation * smooth[static_cast<std::size_t>(i)];
    }
    return out;
}

SynthEvent generate_event(EventKind kind, const SynthEnvironment& env, const SynthSpec& spec, Rng& rng) {
    const double duration = spec.window / spec.rate_hz;
    // Event start somewhere in the window, leaving room for the burst to finish.
    const double onset = uniform(rng, 0.1 * duration, 0.76 * duration);
    Motion m = generate_motion(kind, spec.window, spec.rate_hz, onset, rng);
    if (env.nlos) m.dynamic = nlos_filter(m.dynamic, spec);
    SynthEvent ev;
    ev.kind = kind;
    ev.label = event_label(kind);
    ev.burst_start_s = m.burst_start_s;
    ev.burst_end_s = m.burst_end_s;
    ev.window.data = compose(environment_background(env, spec), m.dynamic, spec.sensor_noise, rng);
    ev.window.start_timestamp_us = 0;
    ev.window.end_timestamp_us = static_cast<std::uint64_t>(std::llround((spec.window - 1) * 1e6 / spec.rate_hz));
    return ev;
}

DatasetIndex generate_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    DatasetIndex index;
    index.root = out_dir;
    const auto sample_dir = out_dir / "samples";
    std::error_code ec;
    std::filesystem::create_directories(sample_dir, ec);
    if (ec) throw IoError("cannot create " + sample_dir.string() + ": " + ec.message());
    for (const auto& env : spec.environments) {
        index.environments.push_back({env.id, env.nlos});
        auto emit = [&](EventKind kind, int n) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "_%04d_", n);
            const std::string id = env.id + buf + event_name(kind);
            Rng rng(derive_seed(spec.seed, hash_string(id)));
            const SynthEvent ev = generate_event(kind, env, spec, rng);
            const CsiTensor t = preprocess_window(ev.window, spec.preprocess);
            const std::string file = "samples/" + id + ".csit";
            write_tensor_file(out_dir / file, t);
            index.samples.push_back({id, file, ev.label, env.id});
        };
        int n = 0;
        for (int i = 0; i < spec.falls_per_env; ++i) emit(kFallKinds[i % 4], n++);
        for (int i = 0; i < spec.nonfalls_per_env; ++i) emit(kNonfallKinds[i % 6], n++);
    }
    save_index(index, out_dir / "index.json");
    return index;
}

Recording generate_recording(EventKind kind, const SynthEnvironment& env, const SynthSpec& spec, double duration_s,
                             double event_at_s, std::uint64_t seed) {
    const int frames = static_cast<int>(std::llround(duration_s * spec.rate_hz));
    if (frames < 1) throw ParameterError("recording duration must cover at least one frame");
    Rng rng(seed);
    Motion m = generate_motion(kind, frames, spec.rate_hz, event_at_s, rng);
    if (env.nlos) m.dynamic = nlos_filter(m.dynamic, spec);
    const nn::Tensor amp = compose(environment_background(env, spec), m.dynamic, spec.sensor_noise, rng);

    std::array<std::uint8_t, kNumRx> perm{0, 1, 2};
    std::shuffle(perm.begin(), perm.end(), rng);
    Recording rec;
    rec.event_start_s = m.burst_start_s;
    rec.event_end_s = m.burst_end_s;
    rec.frames.resize(static_cast<std::size_t>(frames));
    for (int i = 0; i < frames; ++i) {
        CsiFrame& f = rec.frames[static_cast<std::size_t>(i)];
        f.timestamp_us = static_cast<std::uint64_t>(std::llround(i * 1e6 / spec.rate_hz));
        f.perm = perm;
        // Logical antenna r is stored at physical row perm[r].
        for (int r = 0; r < kNumRx; ++r)
            for (int s = 0; s < kNumSub; ++s) f.at(perm[static_cast<std::size_t>(r)], s) = static_cast<float>(amp.at(i, r * kNumSub + s));
    }
    return rec;
}

}  // namespace csifall
