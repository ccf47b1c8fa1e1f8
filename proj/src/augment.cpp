#include "csifall/augment.hpp"

#include <algorithm>
#include <cmath>

#include "csifall/errors.hpp"

namespace csifall {

void AugmentPolicy::validate() const {
    for (double p : {p_noise, p_scale, p_shift, p_nlos}) {
        if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("augment probabilities must lie in [0, 1]");
    }
    if (!(sigma >= 0.0)) throw ParameterError("augment sigma must be >= 0");
    if (!(scale_lo < scale_hi)) throw ParameterError("augment scale_lo must be < scale_hi");
    if (shift_max < 0) throw ParameterError("augment shift_max must be >= 0");
    if (!(nlos_scale > 0.0 && nlos_scale < 1.0)) throw ParameterError("augment nlos_scale must lie in (0, 1)");
}

CsiTensor inject_noise(const CsiTensor& t, double sigma, Rng& rng) {
    if (!(sigma >= 0.0)) throw ParameterError("inject_noise: sigma must be >= 0");
    CsiTensor out = t;
    if (sigma == 0.0) return out;
    std::normal_distribution<double> n(0.0, sigma);
    for (double& v : out.data.values()) v += n(rng);
    return out;
}

ScaleResult scale_amplitude(const CsiTensor& t, Rng& rng, double lo, double hi,
                            std::optional<std::array<double, 3>> forced) {
    if (t.data.ndim() != 3 || t.channels() != 3) throw ShapeError("scale_amplitude expects a 3-channel tensor");
    ScaleResult r{t, {}};
    if (forced) {
        r.lambdas = *forced;
    } else {
        std::uniform_real_distribution<double> u(lo, hi);
        for (double& l : r.lambdas) l = u(rng);
    }
    const std::size_t plane = static_cast<std::size_t>(t.time()) * t.subcarriers();
    for (int c = 0; c < 3; ++c) {
        double* p = r.tensor.data.data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] *= r.lambdas[c];
    }
    return r;
}

CsiTensor time_shift(const CsiTensor& t, int delta) {
    const int C = t.channels(), T = t.time(), S = t.subcarriers();
    CsiTensor out = t;
    const int d = ((delta % T) + T) % T;
    if (d == 0) return out;
    for (int c = 0; c < C; ++c)
        for (int k = 0; k < T; ++k) {
            const int src = ((k - d) % T + T) % T;
            for (int s = 0; s < S; ++s) out.data.at(c, k, s) = t.data.at(c, src, s);
        }
    return out;
}

std::vector<double> smooth_series(std::span<const double> x, int factor) {
    if (factor < 1) throw ParameterError("smooth_series: factor must be >= 1");
    const std::size_t n = x.size();
    if (n < static_cast<std::size_t>(factor)) {
        throw ParameterError("smooth_series: length " + std::to_string(n) + " is shorter than factor " +
                             std::to_string(factor));
    }
    // Block means; a trailing partial block is averaged over its own members.
    const std::size_t m = (n + factor - 1) / factor;
    std::vector<double> down(m), centre(m);
    for (std::size_t k = 0; k < m; ++k) {
        const std::size_t lo = k * factor;
        const std::size_t hi = std::min(n, lo + factor);
        double acc = 0.0;
        for (std::size_t j = lo; j < hi; ++j) acc += x[j];
        down[k] = acc / static_cast<double>(hi - lo);
        centre[k] = 0.5 * static_cast<double>(lo + hi - 1);
    }
    // Linear interpolation between block centres, clamped to the edge blocks.
    std::vector<double> out(n);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pos = static_cast<double>(i);
        if (m == 1 || pos <= centre[0]) {
            out[i] = down[0];
            continue;
        }
        if (pos >= centre[m - 1]) {
            out[i] = down[m - 1];
            continue;
        }
        while (centre[k + 1] < pos) ++k;
        const double w = (pos - centre[k]) / (centre[k + 1] - centre[k]);
        out[i] = (1.0 - w) * down[k] + w * down[k + 1];
    }
    if (n % static_cast<std::size_t>(factor) != 0) {
        // Uneven blocks break the exact DC balance of the interpolation; restore the mean.
        double sx = 0.0, sy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sx += x[i];
            sy += out[i];
        }
        const double shift = (sx - sy) / static_cast<double>(n);
        for (double& v : out) v += shift;
    }
    return out;
}

CsiTensor simulate_nlos(const CsiTensor& t, double scale) {
    const double inv = 1.0 / scale;
    const int factor = static_cast<int>(std::lround(inv));
    if (factor < 2 || std::abs(inv - factor) > 1e-9) throw ParameterError("simulate_nlos: scale must be 1/k, k >= 2");
    const int C = t.channels(), T = t.time(), S = t.subcarriers();
    if (T < factor) throw ParameterError("simulate_nlos: time length " + std::to_string(T) + " is too short");
    CsiTensor out = t;
    std::vector<double> col(T);
    for (int c = 0; c < C; ++c)
        for (int s = 0; s < S; ++s) {
            for (int k = 0; k < T; ++k) col[k] = t.data.at(c, k, s);
            const auto sm = smooth_series(col, factor);
            for (int k = 0; k < T; ++k) out.data.at(c, k, s) = sm[k];
        }
    return out;
}

CsiTensor augment_sample(const CsiTensor& t, const AugmentPolicy& policy, Rng& rng) {
    if (t.stage != TensorStage::instance_normalized) {
        throw StateError("augment_sample expects an instance-normalized tensor");
    }
    policy.validate();
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    CsiTensor x = t;
    const bool do_noise = coin(rng) < policy.p_noise;
    if (do_noise) x = inject_noise(x, policy.sigma, rng);
    const bool do_scale = coin(rng) < policy.p_scale;
    if (do_scale) x = scale_amplitude(x, rng, policy.scale_lo, policy.scale_hi).tensor;
    const bool do_shift = coin(rng) < policy.p_shift;
    if (do_shift) {
        std::uniform_int_distribution<int> d(-policy.shift_max, policy.shift_max);
        x = time_shift(x, d(rng));
    }
    const bool do_nlos = coin(rng) < policy.p_nlos;
    if (do_nlos) x = simulate_nlos(x, policy.nlos_scale);
    return x;
}

std::uint64_t hash_string(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t derive_seed(std::uint64_t base_seed, std::uint64_t sample_key) { return base_seed ^ sample_key; }

}  // namespace csifall
