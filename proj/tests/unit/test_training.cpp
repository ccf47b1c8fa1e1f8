#include <doctest.h>

#include <fstream>
#include <json.hpp>
#include <numbers>
#include <set>

#include "csifall/checkpoint.hpp"
#include "csifall/errors.hpp"
#include "csifall/synthcsi.hpp"
#include "csifall/training.hpp"
#include "test_util.hpp"

using namespace csifall;

namespace {

DatasetIndex fake_index(int envs, int per_env) {
    DatasetIndex idx;
    for (int e = 0; e < envs; ++e) {
        const std::string env(1, static_cast<char>('A' + e));
        idx.environments.push_back({env, e == envs - 1});
        for (int i = 0; i < per_env; ++i)
            idx.samples.push_back({env + "_" + std::to_string(i), env + std::to_string(i) + ".csit", i % 2, env});
    }
    return idx;
}

// Small on-disk synthetic dataset shared by the training cases.
const DatasetIndex& small_dataset() {
    static const DatasetIndex idx = [] {
        SynthSpec spec = make_synth_spec(2, 1, 4, 4, 5);
        return generate_dataset(spec, testutil::temp_dir("small_dataset"));
    }();
    return idx;
}

TrainConfig quick_config() {
    TrainConfig c;
    c.epochs = 4;
    c.batch_size = 4;
    c.lr = 1e-3;
    c.seed = 3;
    return c;
}

}  // namespace

TEST_SUITE("training") {
    TEST_CASE("focal loss reference values") {
        const Probabilities half{0.5, 0.5};
        CHECK(focal_loss(half, kFallClass, 2.0, 3.0) == doctest::Approx(3.0 * 0.25 * std::numbers::ln2).epsilon(1e-12));
        CHECK(focal_loss(half, kFallClass, 2.0, 3.0) == doctest::Approx(0.519860).epsilon(1e-6));
        // Asymmetric alpha leaves the nonfall class unweighted.
        CHECK(focal_loss(half, kNonfallClass, 2.0, 3.0) == doctest::Approx(0.25 * std::numbers::ln2));
        CHECK(focal_loss(half, kNonfallClass, 2.0, 3.0, true) == doctest::Approx(0.75 * std::numbers::ln2));
        std::mt19937_64 rng(1);
        std::uniform_real_distribution<double> u(0.001, 0.999);
        for (int i = 0; i < 100; ++i) {
            const double p = u(rng);
            const Probabilities pr{p, 1.0 - p};
            CHECK(focal_loss(pr, kFallClass, 0.0, 1.0) == doctest::Approx(-std::log(p)).epsilon(1e-12));
            CHECK(focal_loss(pr, kNonfallClass, 0.0, 1.0) == doctest::Approx(-std::log(1.0 - p)).epsilon(1e-12));
        }
        CHECK(std::isfinite(focal_loss({0.0, 1.0}, kFallClass, 2.0, 3.0)));
    }

    TEST_CASE("focal loss falls as the true-class probability rises") {
        double prev = 1e300;
        for (double p = 0.01; p < 1.0; p += 0.01) {
            const double l = focal_loss({p, 1.0 - p}, kFallClass, 2.0, 3.0);
            CHECK(l < prev);
            prev = l;
        }
        // Focusing shrinks the loss of easy examples more than hard ones.
        const double easy = focal_loss({0.9, 0.1}, kFallClass, 2.0, 1.0) / focal_loss({0.9, 0.1}, kFallClass, 0.0, 1.0);
        const double hard = focal_loss({0.2, 0.8}, kFallClass, 2.0, 1.0) / focal_loss({0.2, 0.8}, kFallClass, 0.0, 1.0);
        CHECK(easy < hard);
    }

    TEST_CASE("cosine schedule endpoints") {
        TrainConfig c;
        c.epochs = 11;
        CHECK(cosine_lr(c, 0) == doctest::Approx(c.lr));
        CHECK(cosine_lr(c, 10) == doctest::Approx(c.min_lr));
        CHECK(cosine_lr(c, 5) == doctest::Approx(0.5 * (c.lr + c.min_lr)));
        for (int e = 1; e < 11; ++e) CHECK(cosine_lr(c, e) < cosine_lr(c, e - 1));
        c.epochs = 1;
        CHECK(cosine_lr(c, 0) == c.lr);
    }

    TEST_CASE("config validation") {
        TrainConfig c;
        CHECK_NOTHROW(c.validate());
        c.batch_size = 0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.lr = -1.0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.tta_k = 0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }

    TEST_CASE("metrics from a confusion matrix") {
        Confusion c;
        for (int i = 0; i < 8; ++i) c.add(1, 1);
        for (int i = 0; i < 2; ++i) c.add(1, 0);
        for (int i = 0; i < 1; ++i) c.add(0, 1);
        for (int i = 0; i < 9; ++i) c.add(0, 0);
        const Metrics m = metrics_from_confusion(c);
        CHECK(m.accuracy == doctest::Approx(17.0 / 20.0));
        CHECK(*m.precision == doctest::Approx(8.0 / 9.0));
        CHECK(*m.recall == doctest::Approx(0.8));
        Confusion none;
        none.add(0, 0);
        const Metrics n = metrics_from_confusion(none);
        CHECK_FALSE(n.precision);
        CHECK_FALSE(n.recall);
        const auto j = nlohmann::json::parse(metrics_json(m));
        CHECK(j["accuracy"].get<double>() == doctest::Approx(0.85));
        CHECK(nlohmann::json::parse(metrics_json(n))["precision"].is_null());
    }

    TEST_CASE("leave-one-environment-out folds partition the samples") {
        const DatasetIndex idx = fake_index(3, 6);
        const auto folds = loeo_folds(idx);
        REQUIRE(folds.size() == 3);
        std::set<std::string> tested;
        for (const auto& f : folds) {
            CHECK(f.train_ids.size() == 12);
            CHECK(f.test_ids.size() == 6);
            for (const auto& id : f.test_ids) {
                CHECK(idx.sample(id).environment_id == f.test_environment);
                tested.insert(id);
            }
            for (const auto& id : f.train_ids) CHECK(idx.sample(id).environment_id != f.test_environment);
        }
        CHECK(tested.size() == 18);
        CHECK_THROWS_AS(loeo_folds(fake_index(1, 4)), ConfigError);
    }

    TEST_CASE("random split is a seeded disjoint partition") {
        const DatasetIndex idx = fake_index(2, 10);
        const Fold a = random_split(idx, 0.75, 4), b = random_split(idx, 0.75, 4), c = random_split(idx, 0.75, 5);
        CHECK(a.train_ids.size() == 15);
        CHECK(a.test_ids.size() == 5);
        CHECK(a.train_ids == b.train_ids);
        CHECK(a.train_ids != c.train_ids);
        std::set<std::string> all(a.train_ids.begin(), a.train_ids.end());
        all.insert(a.test_ids.begin(), a.test_ids.end());
        CHECK(all.size() == 20);
        CHECK_THROWS(random_split(idx, 1.5, 0));
    }

    TEST_CASE("index validation and round trip") {
        DatasetIndex idx = fake_index(2, 2);
        CHECK_NOTHROW(validate_index(idx, false));
        const auto dir = testutil::temp_dir("index");
        save_index(idx, dir / "index.json");
        CHECK_THROWS_AS(load_index(dir / "index.json"), ValidationError);
        for (const auto& s : idx.samples) std::ofstream(dir / s.file) << "x";
        const DatasetIndex back = load_index(dir / "index.json");
        CHECK(back.samples.size() == 4);
        CHECK(back.is_nlos("B"));
        CHECK_FALSE(back.is_nlos("A"));
        CHECK(back.samples[1].label == idx.samples[1].label);
        CHECK(back.root == dir);
        CHECK_THROWS_AS(validate_index(idx, true), ValidationError);
        idx.samples[0].label = 4;
        CHECK_THROWS_AS(validate_index(idx, false), ValidationError);
        idx = fake_index(2, 2);
        idx.samples[1].sample_id = idx.samples[0].sample_id;
        CHECK_THROWS_AS(validate_index(idx, false), ValidationError);
    }

    TEST_CASE("TTA with one copy is the plain prediction") {
        const DatasetIndex& idx = small_dataset();
        TensorCache cache(idx);
        const FallDetector m(desk_model_config(), 2);
        const CsiTensor& x = cache.get(idx.samples[0].sample_id);
        Rng rng(1);
        CHECK(tta_predict(m, x, 1, rng).p_fall == predict(m, x).p_fall);
        const Probabilities p5 = tta_predict(m, x, 5, rng);
        CHECK(p5.p_fall + p5.p_nonfall == doctest::Approx(1.0));
        CHECK(p5.p_fall != predict(m, x).p_fall);
    }

    TEST_CASE("training is reproducible and lowers the loss") {
        const DatasetIndex& idx = small_dataset();
        std::vector<std::string> ids;
        for (const auto& s : idx.samples) ids.push_back(s.sample_id);
        TensorCache cache(idx);
        FallDetector a(desk_model_config(), 7), b(desk_model_config(), 7);
        const auto log_a = train_model(a, quick_config(), ids, idx, cache);
        const auto log_b = train_model(b, quick_config(), ids, idx, cache);
        REQUIRE(log_a.size() == 4);
        for (std::size_t i = 0; i < log_a.size(); ++i) CHECK(log_a[i].train_loss == log_b[i].train_loss);
        CHECK(log_a.back().train_loss < log_a.front().train_loss);
        CHECK(log_a[0].lr == doctest::Approx(1e-3));
        const auto& wa = a.params().find("head.fc2.weight")->var.value();
        CHECK(nn::max_abs_diff(wa, b.params().find("head.fc2.weight")->var.value()) == 0.0);

        const auto dir = testutil::temp_dir("loss_log");
        write_loss_log(dir / "loss.csv", log_a);
        std::ifstream in(dir / "loss.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header == "epoch,lr,train_loss");
    }

    TEST_CASE("zero epochs leave the weights untouched") {
        const DatasetIndex& idx = small_dataset();
        std::vector<std::string> ids;
        for (const auto& s : idx.samples) ids.push_back(s.sample_id);
        TensorCache cache(idx);
        FallDetector m(desk_model_config(), 8);
        const FallDetector ref(desk_model_config(), 8);
        TrainConfig c = quick_config();
        c.epochs = 0;
        CHECK(train_model(m, c, ids, idx, cache).empty());
        for (std::size_t i = 0; i < m.params().all().size(); ++i)
            CHECK(nn::max_abs_diff(m.params().all()[i].var.value(), ref.params().all()[i].var.value()) == 0.0);
    }

    TEST_CASE("degenerate training sets are rejected") {
        const DatasetIndex& idx = small_dataset();
        TensorCache cache(idx);
        FallDetector m(desk_model_config(), 9);
        CHECK_THROWS_AS(train_model(m, quick_config(), {}, idx, cache), ConfigError);
        std::vector<std::string> falls;
        for (const auto& s : idx.samples)
            if (s.label == kFallClass) falls.push_back(s.sample_id);
        CHECK_THROWS_AS(train_model(m, quick_config(), falls, idx, cache), ConfigError);
    }

    TEST_CASE("LOEO writes per-fold artefacts and aggregates") {
        const DatasetIndex& idx = small_dataset();
        TrainConfig c = quick_config();
        c.epochs = 1;
        LoeoOptions o;
        o.run_dir = testutil::temp_dir("loeo");
        o.only_environments = {"B"};
        const LoeoResult r = run_loeo(desk_model_config(), c, idx, o);
        REQUIRE(r.folds.size() == 1);
        CHECK(r.folds[0].nlos);
        CHECK(r.folds[0].metrics.confusion.total() == 8);
        CHECK(r.pooled.total() == 8);
        CHECK(std::filesystem::exists(*o.run_dir / "fold_B" / "checkpoint.csfk"));
        CHECK(std::filesystem::exists(*o.run_dir / "fold_B" / "loss_log.csv"));
        // The saved checkpoint scores exactly like the evaluated model.
        const FallDetector saved = load_checkpoint(*o.run_dir / "fold_B" / "checkpoint.csfk");
        TensorCache cache(idx);
        const auto ev = evaluate(saved, r.folds[0].fold.test_ids, idx, cache, false, c);
        CHECK(ev.metrics.accuracy == r.folds[0].metrics.accuracy);
        const auto j = nlohmann::json::parse(loeo_json(r));
        CHECK(j["folds"].size() == 1);
        CHECK(j["aggregate"]["mean_accuracy"].get<double>() == doctest::Approx(r.mean_accuracy));
    }
}
