#pragma once

// Deterministic synthetic CSI: static per-environment multipath background, motion
// envelopes per activity kind, sensor noise and NLoS smoothing of the dynamic part.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "csifall/augment.hpp"
#include "csifall/preprocess.hpp"
#include "csifall/training.hpp"

namespace csifall {

enum class EventKind { fall_front, fall_back, fall_left, fall_right, sit, stand, walk, pick, wave, still };

inline constexpr EventKind kFallKinds[] = {EventKind::fall_front, EventKind::fall_back, EventKind::fall_left,
                                           EventKind::fall_right};
inline constexpr EventKind kNonfallKinds[] = {EventKind::sit,  EventKind::stand, EventKind::walk,
                                              EventKind::pick, EventKind::wave,  EventKind::still};

const char* event_name(EventKind k);
EventKind parse_event(const std::string& s);
bool is_fall(EventKind k);
int event_label(EventKind k);

struct SynthEnvironment {
    std::string id;
    std::uint64_t background_seed = 0;
    bool nlos = false;
};

struct SynthSpec {
    std::vector<SynthEnvironment> environments;
    // Per environment; kinds are cycled through in enum order.
    int falls_per_env = 40;
    int nonfalls_per_env = 40;
    int window = kWindowFrames;
    double rate_hz = kNominalRateHz;
    std::uint64_t seed = 0;
    double sensor_noise = 0.05;
    double background_level = 20.0;
    double background_strength = 1.0;
    double nlos_attenuation = 0.7;
    int nlos_smoothing = 32;
    // Same causal low-pass as the live path so offline and streamed tensors match.
    PreprocessOptions preprocess = [] {
        PreprocessOptions p;
        p.lowpass.enabled = true;
        return p;
    }();

    // Throws ConfigError.
    void validate() const;
};

// n_env environments named A, B, C, ...; the last n_nlos of them are NLoS.
SynthSpec make_synth_spec(int n_env, int n_nlos, int falls_per_env, int nonfalls_per_env, std::uint64_t seed);

// Static amplitude per stream (90 values, antenna-major).
std::vector<double> environment_background(const SynthEnvironment& env, const SynthSpec& spec);

struct SynthEvent {
    CsiWindow window;
    EventKind kind = EventKind::still;
    int label = kNonfallClass;
    // Main burst interval in seconds from the window start (zero length for still).
    double burst_start_s = 0.0;
    double burst_end_s = 0.0;
};

// Motion-only component for `frames` samples (frames x 90), before NLoS processing.
struct Motion {
    nn::Tensor dynamic;
    double burst_start_s = 0.0;
    double burst_end_s = 0.0;
};
Motion generate_motion(EventKind kind, int frames, double rate_hz, double onset_s, Rng& rng);

// Applies the NLoS smoother and attenuation to a frames x 90 dynamic component.
nn::Tensor nlos_filter(const nn::Tensor& dynamic, const SynthSpec& spec);

SynthEvent generate_event(EventKind kind, const SynthEnvironment& env, const SynthSpec& spec, Rng& rng);

// Writes <out_dir>/samples/<id>.csit and <out_dir>/index.json; returns the index.
DatasetIndex generate_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir);

struct Recording {
    std::vector<CsiFrame> frames;  // physical antenna order with a random PERM per recording
    double event_start_s = 0.0;
    double event_end_s = 0.0;
};

// Continuous recording of `duration_s` seconds with one event placed at `event_at_s`.
Recording generate_recording(EventKind kind, const SynthEnvironment& env, const SynthSpec& spec, double duration_s,
                             double event_at_s, std::uint64_t seed);

}  // namespace csifall
