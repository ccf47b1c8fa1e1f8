#include <doctest.h>

#include <numeric>

#include "csifall/augment.hpp"
#include "csifall/dvg.hpp"
#include "csifall/errors.hpp"
#include "test_util.hpp"

using namespace csifall;
using testutil::random_tensor;

namespace {

CsiTensor normalized(int T, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return instance_normalize(reorganize(random_tensor({T, 90}, rng, 0.0, 20.0)));
}

double mean_of(std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST_SUITE("augment") {
    TEST_CASE("noise has the requested spread; zero sigma is identity") {
        const CsiTensor t = normalized(400, 1);
        Rng rng(11);
        const CsiTensor n = inject_noise(t, 0.05, rng);
        double s1 = 0.0, s2 = 0.0;
        const std::size_t N = t.data.numel();
        for (std::size_t i = 0; i < N; ++i) {
            const double d = n.data[i] - t.data[i];
            s1 += d;
            s2 += d * d;
        }
        const double mean = s1 / N;
        const double sd = std::sqrt(s2 / N - mean * mean);
        CHECK(std::abs(mean) < 0.002);
        CHECK(sd == doctest::Approx(0.05).epsilon(0.02));
        CHECK(nn::max_abs_diff(inject_noise(t, 0.0, rng).data, t.data) == 0.0);
        CHECK_THROWS_AS(inject_noise(t, -1.0, rng), ParameterError);
    }

    TEST_CASE("amplitude scaling multiplies each antenna by its own factor") {
        const CsiTensor t = normalized(20, 2);
        Rng rng(12);
        const auto forced = scale_amplitude(t, rng, 0.5, 1.5, std::array<double, 3>{0.5, 1.0, 2.0});
        for (int c = 0; c < 3; ++c)
            CHECK(forced.tensor.data.at(c, 7, 9) == doctest::Approx(t.data.at(c, 7, 9) * forced.lambdas[c]));
        for (int i = 0; i < 50; ++i) {
            const auto r = scale_amplitude(t, rng);
            for (double l : r.lambdas) {
                CHECK(l >= 0.5);
                CHECK(l < 1.5);
            }
        }
    }

    TEST_CASE("time shift is circular and invertible") {
        const CsiTensor t = normalized(37, 3);
        const CsiTensor s = time_shift(t, 5);
        for (int c = 0; c < 3; ++c)
            for (int k = 0; k < 37; ++k) CHECK(s.data.at(c, k, 4) == t.data.at(c, ((k - 5) % 37 + 37) % 37, 4));
        CHECK(nn::max_abs_diff(time_shift(s, -5).data, t.data) == 0.0);
        CHECK(nn::max_abs_diff(time_shift(t, 37).data, t.data) == 0.0);
        CHECK(nn::max_abs_diff(time_shift(t, -40).data, time_shift(t, 34).data) == 0.0);
    }

    TEST_CASE("smoothing keeps constants and the mean and removes the Nyquist component") {
        std::vector<double> c(64, 3.5);
        for (double v : smooth_series(c, 2)) CHECK(v == doctest::Approx(3.5));
        std::mt19937_64 rng(4);
        for (int factor : {2, 4, 32}) {
            for (int n : {64, 65, 200}) {
                std::vector<double> x(n);
                std::uniform_real_distribution<double> u(-1.0, 1.0);
                for (double& v : x) v = u(rng);
                const auto y = smooth_series(x, factor);
                CHECK(mean_of(y) == doctest::Approx(mean_of(x)).epsilon(1e-12));
            }
        }
        std::vector<double> alt(100);
        for (int i = 0; i < 100; ++i) alt[i] = (i % 2) ? 1.0 : -1.0;
        for (double v : smooth_series(alt, 2)) CHECK(std::abs(v) < 1e-12);
        CHECK_THROWS_AS(smooth_series(alt, 0), ParameterError);
    }

    TEST_CASE("NLoS simulation operates along time only") {
        const CsiTensor t = normalized(50, 5);
        const CsiTensor s = simulate_nlos(t, 0.5);
        CHECK(s.data.shape() == t.data.shape());
        std::vector<double> col(50);
        for (int k = 0; k < 50; ++k) col[k] = t.data.at(2, k, 11);
        const auto want = smooth_series(col, 2);
        for (int k = 0; k < 50; ++k) CHECK(s.data.at(2, k, 11) == doctest::Approx(want[k]));
        CHECK_THROWS_AS(simulate_nlos(t, 0.3), ParameterError);
        CHECK_NOTHROW(simulate_nlos(normalized(51, 6), 0.5));
    }

    TEST_CASE("augment_sample honours probabilities and seeds") {
        const CsiTensor t = normalized(64, 7);
        AugmentPolicy off;
        off.p_noise = off.p_scale = off.p_shift = off.p_nlos = 0.0;
        Rng rng(1);
        CHECK(nn::max_abs_diff(augment_sample(t, off, rng).data, t.data) == 0.0);

        AugmentPolicy on;
        on.p_noise = on.p_scale = on.p_shift = on.p_nlos = 1.0;
        Rng a(99), b(99);
        const CsiTensor x = augment_sample(t, on, a);
        CHECK(nn::max_abs_diff(x.data, augment_sample(t, on, b).data) == 0.0);
        CHECK(nn::max_abs_diff(x.data, t.data) > 0.0);

        CHECK_THROWS_AS(augment_sample(channel_standardize(t), on, rng), StateError);
        AugmentPolicy bad;
        bad.p_noise = 1.5;
        CHECK_THROWS_AS(bad.validate(), ParameterError);
        bad = {};
        bad.scale_lo = 2.0;
        CHECK_THROWS_AS(bad.validate(), ParameterError);
    }

    TEST_CASE("derived seeds depend on both inputs") {
        CHECK(derive_seed(1, hash_string("a")) == derive_seed(1, hash_string("a")));
        CHECK(derive_seed(1, hash_string("a")) != derive_seed(1, hash_string("b")));
        CHECK(derive_seed(1, hash_string("a")) != derive_seed(2, hash_string("a")));
    }
}

TEST_SUITE("dvg") {
    TEST_CASE("local variance matches a direct windowed computation") {
        std::mt19937_64 rng(21);
        CsiTensor x;
        x.data = random_tensor({3, 40, 6}, rng);
        x.stage = TensorStage::standardized;
        for (int w : {1, 5, 15}) {
            const VarianceMap v = local_variance(x, w);
            const int h = w / 2;
            for (int c = 0; c < 3; ++c)
                for (int t = 0; t < 40; ++t)
                    for (int s = 0; s < 6; ++s) {
                        double m = 0.0, m2 = 0.0;
                        for (int j = -h; j <= h; ++j) {
                            const double val = x.data.at(c, std::clamp(t + j, 0, 39), s);
                            m += val;
                            m2 += val * val;
                        }
                        m /= w;
                        m2 /= w;
                        CHECK(v.data.at(c, t, s) == doctest::Approx(std::max(0.0, m2 - m * m) + kVarianceEps));
                    }
        }
        CHECK_THROWS_AS(local_variance(x, 4), ParameterError);
    }

    TEST_CASE("initial gate closes on static input and opens on motion") {
        const GateParams p = init_gate(100.0);
        CHECK(p.bias == -3.0);
        for (double k : p.kernel.values()) CHECK(k == doctest::Approx(1.0 / 9.0));

        CsiTensor still;
        still.data = nn::Tensor({3, 30, 10}, 0.7);
        still.stage = TensorStage::standardized;
        const GateOutput g = gate_forward(still, p);
        CHECK(g.mask.at(1, 15, 5) == doctest::Approx(sigmoid(100.0 * kVarianceEps - 3.0)).epsilon(1e-12));
        CHECK(g.mask.at(1, 15, 5) < 0.05);
        CHECK(g.gated.data.at(1, 15, 5) == doctest::Approx(0.7 * g.mask.at(1, 15, 5)));

        CsiTensor moving = still;
        for (int c = 0; c < 3; ++c)
            for (int t = 0; t < 30; ++t)
                for (int s = 0; s < 10; ++s) moving.data.at(c, t, s) = (t % 2) ? 1.0 : -1.0;
        const GateOutput m = gate_forward(moving, p);
        CHECK(m.mask.at(0, 15, 5) > 0.99);
    }

    TEST_CASE("gate output is input times mask elementwise") {
        std::mt19937_64 rng(22);
        CsiTensor x;
        x.data = random_tensor({3, 25, 8}, rng, -2.0, 2.0);
        x.stage = TensorStage::standardized;
        GateParams p = init_gate(30.0, GateTopology::dense);
        p.kernel = random_tensor({3, 3, 3, 3}, rng);
        const GateOutput g = gate_forward(x, p);
        for (std::size_t i = 0; i < x.data.numel(); ++i) {
            CHECK(g.mask[i] > 0.0);
            CHECK(g.mask[i] <= 1.0);
            CHECK(g.gated.data[i] == doctest::Approx(x.data[i] * g.mask[i]));
        }
        CHECK(g.gated.stage == TensorStage::gated);
        p.topology = GateTopology::depthwise;
        CHECK_THROWS_AS(gate_forward(x, p), ShapeError);
        x.stage = TensorStage::instance_normalized;
        CHECK_THROWS_AS(gate_forward(x, init_gate(30.0)), StateError);
        CHECK_THROWS_AS(init_gate(0.0), ParameterError);
    }
}
