#include <doctest.h>

#include <fstream>

#include "csifall/checkpoint.hpp"
#include "csifall/errors.hpp"
#include "csifall/model.hpp"
#include "test_util.hpp"

using namespace csifall;

namespace {

CsiTensor standardized_input(std::uint64_t seed, int T = kWindowFrames) {
    std::mt19937_64 rng(seed);
    return channel_standardize(instance_normalize(reorganize(testutil::random_tensor({T / 8, 90}, rng, 0.0, 30.0))));
}

std::vector<int> reversed(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = n - 1 - i;
    return p;
}

}  // namespace

TEST_SUITE("model") {
    TEST_CASE("positional table follows the sinusoid definition") {
        const nn::Tensor pe = positional_encoding(20, 16);
        REQUIRE(pe.shape() == nn::Shape{20, 16});
        for (int pos : {0, 3, 19})
            for (int i = 0; i < 8; ++i) {
                const double f = std::pow(10000.0, -2.0 * i / 16.0);
                CHECK(pe.at(pos, 2 * i) == doctest::Approx(std::sin(pos * f)).epsilon(1e-12));
                CHECK(pe.at(pos, 2 * i + 1) == doctest::Approx(std::cos(pos * f)).epsilon(1e-12));
            }
    }

    TEST_CASE("config validation") {
        ModelConfig c = desk_model_config();
        CHECK_NOTHROW(c.validate());
        c.n_heads = 5;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = desk_model_config();
        c.dropout = 1.0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        CHECK(parse_backbone(backbone_name(BackboneKind::tiny_cnn)) == BackboneKind::tiny_cnn);
        CHECK_THROWS_AS(parse_backbone("resnet"), ConfigError);
    }

    TEST_CASE("tiny model shapes, probabilities and attention rows") {
        const FallDetector m(desk_model_config(), 1);
        ForwardOptions o;
        o.keep_diagnostics = true;
        const ForwardResult r = m.forward(standardized_input(2), o);
        CHECK(r.logits.shape() == nn::Shape{1, 2});
        CHECK(r.probs.p_fall + r.probs.p_nonfall == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(r.probs.p_fall == doctest::Approx(probabilities_from_logits(r.logits.value()).p_fall));

        const auto& shapes = r.diag.shapes;
        auto find = [&](const std::string& n) {
            for (const auto& [name, s] : shapes)
                if (name == n) return s;
            return nn::Shape{};
        };
        CHECK(find("block1") == nn::Shape{16, 313, 15});
        CHECK(find("block4") == nn::Shape{64, 20, 1});
        CHECK(find("embedding") == nn::Shape{20, 64});

        REQUIRE(r.diag.attention.size() == 2 * 4);
        for (const auto& a : r.diag.attention) {
            REQUIRE(a.shape() == nn::Shape{20, 20});
            for (int i = 0; i < 20; ++i) {
                double s = 0.0;
                for (int j = 0; j < 20; ++j) s += a.at(i, j);
                CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
            }
        }
        CHECK(r.diag.dvg_mask.shape() == nn::Shape{3, 625, 30});
        CHECK(r.diag.channel_mask.shape() == nn::Shape{64, 1, 1});
        CHECK(r.diag.spatial_mask.shape() == nn::Shape{1, 20, 1});
    }

    TEST_CASE("CBAM refines by the product of its two masks") {
        const FallDetector m(desk_model_config(), 3);
        std::mt19937_64 rng(4);
        const nn::Var f = nn::constant(testutil::random_tensor({64, 6, 3}, rng));
        const CbamOutput c = m.cbam_forward(f);
        for (int ch = 0; ch < 64; ch += 7)
            for (int h = 0; h < 6; ++h)
                for (int w = 0; w < 3; ++w) {
                    const double want = f.value().at(ch, h, w) * c.channel_mask.value()[ch] *
                                        c.spatial_mask.value()[static_cast<std::size_t>(h * 3 + w)];
                    CHECK(c.refined.value().at(ch, h, w) == doctest::Approx(want).epsilon(1e-12));
                }
        const CbamOutput z = m.cbam_forward(nn::constant(nn::Tensor({64, 6, 3}, 0.0)));
        for (double v : z.refined.value().values()) CHECK(v == 0.0);
        for (double v : c.spatial_mask.value().values()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }

    TEST_CASE("calibrated batch norm restores unit-scale backbone features") {
        auto rms = [](const nn::Tensor& t) {
            double s = 0.0;
            for (double v : t.values()) s += v * v;
            return std::sqrt(s / static_cast<double>(t.numel()));
        };
        FallDetector m(desk_model_config(), 9);
        std::vector<CsiTensor> xs;
        for (std::uint64_t i = 0; i < 4; ++i) xs.push_back(standardized_input(20 + i));
        m.calibrate_normalization(xs);
        const nn::Tensor after = m.backbone(m.gate(nn::constant(xs[0].data)).first, nullptr).value();
        CHECK(rms(after) > 0.2);
        CHECK(rms(after) < 2.0);

        // Oracle for block 1: pooled channel statistics of the raw conv over the gated inputs.
        const auto* w = m.params().find("backbone.block1.conv.weight");
        const auto* mean = m.params().find("backbone.block1.bn.running_mean");
        const auto* var = m.params().find("backbone.block1.bn.running_var");
        REQUIRE(mean != nullptr);
        CHECK_FALSE(mean->trainable);
        nn::Conv2dOptions o;
        o.stride_h = o.stride_w = 2;
        o.pad_h = o.pad_w = 1;
        for (int c : {0, 7, 15}) {
            double s = 0.0, sq = 0.0, n = 0.0;
            for (const auto& x : xs) {
                const nn::Tensor y = nn::conv2d(m.gate(nn::constant(x.data)).first, w->var, nullptr, o).value();
                for (int h = 0; h < y.dim(1); ++h)
                    for (int k = 0; k < y.dim(2); ++k) {
                        s += y.at(c, h, k);
                        sq += y.at(c, h, k) * y.at(c, h, k);
                        n += 1.0;
                    }
            }
            CHECK(mean->var.value()[c] == doctest::Approx(s / n).epsilon(1e-9));
            CHECK(var->var.value()[c] == doctest::Approx(sq / n - (s / n) * (s / n)).epsilon(1e-6));
        }
    }

    TEST_CASE("same seed builds the same model; eval forward is deterministic") {
        const FallDetector a(desk_model_config(), 9), b(desk_model_config(), 9), c(desk_model_config(), 10);
        const CsiTensor x = standardized_input(5);
        CHECK(a.forward(x).probs.p_fall == b.forward(x).probs.p_fall);
        CHECK(a.forward(x).probs.p_fall == a.forward(x).probs.p_fall);
        CHECK(a.forward(x).probs.p_fall != c.forward(x).probs.p_fall);
        Rng r1(1), r2(2);
        ForwardOptions t1, t2;
        t1.training = t2.training = true;
        t1.rng = &r1;
        t2.rng = &r2;
        CHECK(a.forward(x, t1).probs.p_fall != a.forward(x, t2).probs.p_fall);
    }

    TEST_CASE("positional encoding is what breaks temporal permutation symmetry") {
        const FallDetector m(desk_model_config(), 11);
        const CsiTensor x = standardized_input(6);
        ForwardOptions plain, perm;
        plain.positional_encoding = perm.positional_encoding = false;
        perm.time_permutation = reversed(20);
        CHECK(std::abs(m.forward(x, plain).probs.p_fall - m.forward(x, perm).probs.p_fall) < 1e-9);
        plain.positional_encoding = perm.positional_encoding = true;
        CHECK(std::abs(m.forward(x, plain).probs.p_fall - m.forward(x, perm).probs.p_fall) > 1e-6);
        perm.time_permutation = {0, 1, 2};
        CHECK_THROWS(m.forward(x, perm));
    }

    TEST_CASE("disabled modules keep their parameters but drop out of the graph") {
        ModelConfig c = desk_model_config();
        c.dvg.enabled = false;
        c.cbam_enabled = false;
        c.transformer_enabled = false;
        FallDetector off(c, 1);
        const FallDetector on(desk_model_config(), 1);
        // Identical registration order keeps ablation variants on the same initial weights.
        const auto* a = off.params().find("backbone.block2.conv.weight");
        const auto* b = on.params().find("backbone.block2.conv.weight");
        CHECK(nn::max_abs_diff(a->var.value(), b->var.value()) == 0.0);

        const CsiTensor x = standardized_input(7);
        nn::backward(nn::focal_loss_logits(off.forward(nn::constant(x.data), {}, nullptr), kFallClass, 2.0, 3.0));
        CHECK(off.params().find("dvg.kernel")->var.grad().empty());
        CHECK(off.params().find("cbam.mlp1.weight")->var.grad().empty());
        CHECK(off.params().find("encoder.0.attn.q.weight")->var.grad().empty());
        CHECK_FALSE(off.params().find("head.fc1.weight")->var.grad().empty());
    }

    TEST_CASE("gradients reach every trainable parameter") {
        FallDetector m(desk_model_config(), 12);
        const CsiTensor x = standardized_input(8);
        const nn::Var y = m.forward(nn::constant(x.data), {}, nullptr);
        nn::backward(nn::focal_loss_logits(y, kFallClass, 2.0, 3.0));
        int missing = 0;
        for (const auto& p : m.params().all()) {
            if (!p.trainable) continue;
            if (p.var.grad().empty()) ++missing;
        }
        CHECK(missing == 0);
    }
}

TEST_SUITE("model") {
    TEST_CASE("checkpoint round trip reproduces the quantized model exactly") {
        const auto dir = testutil::temp_dir("ckpt");
        FallDetector m(desk_model_config(), 13);
        quantize_to_f32(m);
        save_checkpoint(m, dir / "m.csfk");
        const FallDetector back = load_checkpoint(dir / "m.csfk");
        CHECK(back.config() == m.config());
        const CsiTensor x = standardized_input(9);
        CHECK(back.forward(x).probs.p_fall == m.forward(x).probs.p_fall);

        FallDetector other(desk_model_config(), 14);
        load_checkpoint_into(other, dir / "m.csfk");
        CHECK(other.forward(x).probs.p_fall == m.forward(x).probs.p_fall);

        ModelConfig bigger = desk_model_config();
        bigger.d_model = 32;
        FallDetector wrong(bigger, 1);
        CHECK_THROWS_AS(load_checkpoint_into(wrong, dir / "m.csfk"), ConfigError);
    }

    TEST_CASE("damaged checkpoints are rejected") {
        const auto dir = testutil::temp_dir("ckpt_bad");
        FallDetector m(desk_model_config(), 15);
        save_checkpoint(m, dir / "m.csfk");
        std::ifstream in(dir / "m.csfk", std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        {
            std::ofstream out(dir / "cut.csfk", std::ios::binary);
            out << bytes.substr(0, bytes.size() / 2);
        }
        CHECK_THROWS_AS(load_checkpoint(dir / "cut.csfk"), TruncationError);
        bytes[0] = 'X';
        {
            std::ofstream out(dir / "magic.csfk", std::ios::binary);
            out << bytes;
        }
        CHECK_THROWS_AS(load_checkpoint(dir / "magic.csfk"), FormatError);
        CHECK_THROWS_AS(load_checkpoint(dir / "absent.csfk"), IoError);
    }

    TEST_CASE("pretrained backbone weights are copied by name") {
        const auto dir = testutil::temp_dir("pretrained");
        FallDetector donor(desk_model_config(), 16);
        quantize_to_f32(donor);
        save_checkpoint(donor, dir / "w.csfk");
        ModelConfig c = desk_model_config();
        c.pretrained = true;
        c.pretrained_path = (dir / "w.csfk").string();
        FallDetector m = make_model(c, 17);
        const auto* a = m.params().find("backbone.block1.conv.weight");
        const auto* b = donor.params().find("backbone.block1.conv.weight");
        REQUIRE(a);
        REQUIRE(b);
        CHECK(nn::max_abs_diff(a->var.value(), b->var.value()) == 0.0);
        CHECK(nn::max_abs_diff(m.params().find("head.fc2.weight")->var.value(),
                               donor.params().find("head.fc2.weight")->var.value()) > 0.0);
        c.pretrained_path.clear();
        CHECK_THROWS_AS(make_model(c, 1), ConfigError);
    }
}
