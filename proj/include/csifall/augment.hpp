#pragma once

// Training-time augmentations on instance-normalized CSI tensors: Gaussian noise,
// per-antenna amplitude scaling, circular time shift and NLoS spectral smoothing.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "csifall/preprocess.hpp"

namespace csifall {

using Rng = std::mt19937_64;

struct AugmentPolicy {
    double p_noise = 0.5;
    double p_scale = 0.5;
    double p_shift = 0.5;
    double p_nlos = 0.3;
    double sigma = 0.02;
    double scale_lo = 0.5;
    double scale_hi = 1.5;
    int shift_max = 50;
    double nlos_scale = 0.5;
    std::uint64_t rng_seed = 0;

    // Throws ParameterError when an invariant does not hold.
    void validate() const;
};

CsiTensor inject_noise(const CsiTensor& t, double sigma, Rng& rng);

struct ScaleResult {
    CsiTensor tensor;
    std::array<double, 3> lambdas{};
};

// out[c] = lambda_c * in[c], lambda_c ~ U(lo, hi) unless `forced` is given.
ScaleResult scale_amplitude(const CsiTensor& t, Rng& rng, double lo = 0.5, double hi = 1.5,
                            std::optional<std::array<double, 3>> forced = std::nullopt);

// out(t) = in((t - delta) mod T), same delta for every channel and subcarrier.
CsiTensor time_shift(const CsiTensor& t, int delta);

// Averages blocks of `factor` adjacent samples, then linearly interpolates between block
// centres back to the original length. The temporal mean is preserved.
std::vector<double> smooth_series(std::span<const double> x, int factor);

// Down-sample by `scale` (0.5: pairwise mean) then interpolate back to T along the time axis.
// An odd T leaves a one-sample final block.
CsiTensor simulate_nlos(const CsiTensor& t, double scale = 0.5);

// noise -> scale -> shift -> nlos, each applied with its policy probability.
CsiTensor augment_sample(const CsiTensor& t, const AugmentPolicy& policy, Rng& rng);

// Per-sample stream derivation: base_seed xor a hash of the sample id.
std::uint64_t derive_seed(std::uint64_t base_seed, std::uint64_t sample_key);
std::uint64_t hash_string(std::string_view s);

}  // namespace csifall
