#include "csifall/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include <json.hpp>

#include "csifall/checkpoint.hpp"
#include "csifall/errors.hpp"

namespace csifall {

using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

constexpr std::uint64_t kShuffleSalt = 0x5348554646ULL;
constexpr std::uint64_t kTtaSalt = 0x545441ULL;

const char* label_name(int label) { return label == kFallClass ? "fall" : "nonfall"; }

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("training.lr must be > 0");
    if (!(min_lr >= 0.0 && min_lr <= lr)) throw ConfigError("training.min_lr must lie in [0, lr]");
    if (epochs < 0) throw ConfigError("training.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
    if (!(focal_gamma >= 0.0)) throw ConfigError("training.focal_gamma must be >= 0");
    if (!(focal_alpha > 0.0)) throw ConfigError("training.focal_alpha must be > 0");
    if (tta_k < 1) throw ConfigError("training.tta_k must be >= 1");
    if (!(tta_noise_sigma >= 0.0)) throw ConfigError("training.tta_noise_sigma must be >= 0");
    if (tta_shift_max < 1) throw ConfigError("training.tta_shift_max must be >= 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw ConfigError("training.adam_beta1 / adam_beta2 must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("training.adam_eps must be > 0");
}

double cosine_lr(const TrainConfig& cfg, int epoch) {
    if (cfg.epochs <= 1) return cfg.lr;
    const double progress = static_cast<double>(epoch) / (cfg.epochs - 1);
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

double focal_alpha_t(int label, double alpha, bool symmetric) {
    return (symmetric || label == kFallClass) ? alpha : 1.0;
}

double focal_loss(const Probabilities& probs, int label, double gamma, double alpha, bool symmetric) {
    if (label != kFallClass && label != kNonfallClass) throw ParameterError("label must be 0 (nonfall) or 1 (fall)");
    if (!(gamma >= 0.0)) throw ParameterError("focal gamma must be >= 0");
    const double pt = label == kFallClass ? probs.p_fall : probs.p_nonfall;
    const double clamped = std::max(pt, kFocalProbFloor);
    return -focal_alpha_t(label, alpha, symmetric) * std::pow(1.0 - pt, gamma) * std::log(clamped);
}

// ---------------------------------------------------------------- dataset index

std::filesystem::path DatasetIndex::resolve(const SampleRecord& s) const {
    const std::filesystem::path p(s.file);
    return p.is_absolute() ? p : root / p;
}

const SampleRecord& DatasetIndex::sample(const std::string& id) const {
    for (const auto& s : samples)
        if (s.sample_id == id) return s;
    throw ValidationError("unknown sample id " + id);
}

bool DatasetIndex::is_nlos(const std::string& environment_id) const {
    for (const auto& e : environments)
        if (e.id == environment_id) return e.nlos;
    return false;
}

std::vector<std::string> DatasetIndex::environment_ids() const {
    std::set<std::string> ids;
    for (const auto& s : samples) ids.insert(s.environment_id);
    return {ids.begin(), ids.end()};
}

void validate_index(const DatasetIndex& index, bool check_files) {
    std::set<std::string> ids;
    for (const auto& s : index.samples) {
        if (s.sample_id.empty()) throw ValidationError("index sample with empty sample_id");
        if (!ids.insert(s.sample_id).second) throw ValidationError("duplicate sample id " + s.sample_id);
        if (s.environment_id.empty()) throw ValidationError("sample " + s.sample_id + " has an empty environment_id");
        if (s.label != kFallClass && s.label != kNonfallClass) {
            throw ValidationError("sample " + s.sample_id + " has a non-binary label");
        }
        if (check_files && !std::filesystem::exists(index.resolve(s))) {
            throw ValidationError("sample file " + index.resolve(s).string() + " does not exist");
        }
    }
}

DatasetIndex load_index(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open index " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError("index " + path.string() + " is not valid JSON: " + e.what());
    }
    DatasetIndex index;
    index.root = path.parent_path();
    try {
        if (j.at("version").get<int>() != 1) throw FormatError("index " + path.string() + ": unsupported version");
        for (const auto& e : j.value("environments", json::array())) {
            index.environments.push_back({e.at("id").get<std::string>(), e.value("nlos", false)});
        }
        for (const auto& s : j.at("samples")) {
            SampleRecord r;
            r.sample_id = s.at("sample_id").get<std::string>();
            r.file = s.at("file").get<std::string>();
            const std::string label = s.at("label").get<std::string>();
            if (label == "fall") r.label = kFallClass;
            else if (label == "nonfall") r.label = kNonfallClass;
            else throw ValidationError("sample " + r.sample_id + " has label \"" + label + "\"");
            r.environment_id = s.at("environment_id").get<std::string>();
            index.samples.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw FormatError("index " + path.string() + ": " + e.what());
    }
    validate_index(index, true);
    return index;
}

void save_index(const DatasetIndex& index, const std::filesystem::path& path) {
    json envs = json::array();
    for (const auto& e : index.environments) envs.push_back({{"id", e.id}, {"nlos", e.nlos}});
    json samples = json::array();
    for (const auto& s : index.samples) {
        samples.push_back({{"sample_id", s.sample_id},
                           {"file", s.file},
                           {"label", label_name(s.label)},
                           {"environment_id", s.environment_id}});
    }
    const json j = {{"version", 1}, {"environments", envs}, {"samples", samples}};
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write index " + path.string());
    out << j.dump(2) << "\n";
}

std::vector<Fold> loeo_folds(const DatasetIndex& index) {
    const auto envs = index.environment_ids();
    if (envs.size() < 2) throw ConfigError("leave-one-environment-out needs at least 2 environments");
    std::vector<Fold> folds;
    for (const auto& env : envs) {
        Fold f;
        f.test_environment = env;
        for (const auto& s : index.samples) (s.environment_id == env ? f.test_ids : f.train_ids).push_back(s.sample_id);
        folds.push_back(std::move(f));
    }
    return folds;
}

Fold random_split(const DatasetIndex& index, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
    std::vector<std::string> ids;
    for (const auto& s : index.samples) ids.push_back(s.sample_id);
    Rng rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(ids.size())));
    Fold f;
    f.train_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    f.test_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
    return f;
}

const CsiTensor& TensorCache::get(const std::string& sample_id) {
    auto it = cache_.find(sample_id);
    if (it != cache_.end()) return it->second;
    CsiTensor t = read_tensor_file(index_.resolve(index_.sample(sample_id)));
    return cache_.emplace(sample_id, std::move(t)).first->second;
}

// ---------------------------------------------------------------- optimisation

void Adam::step(nn::ParamStore& params, double lr) {
    auto& all = params.all();
    if (m_.empty()) {
        for (const auto& p : all) {
            m_.emplace_back(p.var.shape());
            v_.emplace_back(p.var.shape());
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < all.size(); ++i) {
        auto& p = all[i];
        if (!p.trainable) continue;
        const nn::Tensor& g = p.var.grad();
        if (g.numel() != p.var.numel()) continue;  // no gradient reached this parameter
        nn::Tensor& w = p.var.mutable_value();
        for (std::size_t k = 0; k < w.numel(); ++k) {
            m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
            v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
            w[k] -= lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
        }
    }
}

std::vector<EpochLog> train_model(FallDetector& model, const TrainConfig& cfg, const std::vector<std::string>& train_ids,
                                  const DatasetIndex& index, TensorCache& cache) {
    cfg.validate();
    if (train_ids.empty()) throw ConfigError("training set is empty");
    bool has_fall = false, has_nonfall = false;
    for (const auto& id : train_ids) (index.sample(id).label == kFallClass ? has_fall : has_nonfall) = true;
    if (!has_fall || !has_nonfall) throw ConfigError("training set must contain both fall and non-fall samples");

    Adam adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    std::vector<EpochLog> log;
    std::vector<std::string> order = train_ids;
    std::sort(order.begin(), order.end());
    const std::size_t n = order.size();

    if (cfg.epochs > 0) {
        std::vector<CsiTensor> clean;
        for (const auto& id : order) clean.push_back(channel_standardize(cache.get(id)));
        model.calibrate_normalization(clean);
    }

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(cfg, epoch);
        Rng shuffle_rng(mix(cfg.seed ^ kShuffleSalt, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        model.params().zero_grad();
        double total = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const SampleRecord& rec = index.sample(order[i]);
                Rng rng(mix(derive_seed(cfg.seed, hash_string(rec.sample_id)), static_cast<std::uint64_t>(epoch)));
                const CsiTensor& x = cache.get(rec.sample_id);
                const CsiTensor input = channel_standardize(cfg.augment_enabled ? augment_sample(x, cfg.augment, rng) : x);
                ForwardOptions fo;
                fo.training = true;
                fo.rng = &rng;
                const nn::Var logits = model.forward(nn::constant(input.data), fo, nullptr);
                const nn::Var loss = nn::focal_loss_logits(logits, rec.label, cfg.focal_gamma,
                                                           focal_alpha_t(rec.label, cfg.focal_alpha, cfg.symmetric_alpha));
                const double value = loss.value()[0];
                if (!std::isfinite(value)) {
                    throw Error("training diverged: non-finite loss at epoch " + std::to_string(epoch) + " on sample " +
                                rec.sample_id + " (lr " + std::to_string(lr) + ")");
                }
                total += value;
                nn::backward(nn::scale(loss, inv));
            }
            adam.step(model.params(), lr);
            model.params().zero_grad();
        }
        log.push_back({epoch, lr, total / static_cast<double>(n)});
    }
    return log;
}

// ---------------------------------------------------------------- evaluation

Confusion& Confusion::operator+=(const Confusion& o) {
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) counts[i][j] += o.counts[i][j];
    return *this;
}

Metrics metrics_from_confusion(const Confusion& c) {
    Metrics m;
    m.confusion = c;
    const long total = c.total();
    m.accuracy = total > 0 ? static_cast<double>(c.tp() + c.tn()) / static_cast<double>(total) : 0.0;
    if (c.tp() + c.fp() > 0) m.precision = static_cast<double>(c.tp()) / static_cast<double>(c.tp() + c.fp());
    if (c.tp() + c.fn() > 0) m.recall = static_cast<double>(c.tp()) / static_cast<double>(c.tp() + c.fn());
    return m;
}

namespace {

CsiTensor as_instance_normalized(const CsiTensor& x) {
    if (x.stage == TensorStage::instance_normalized) return x;
    if (x.stage == TensorStage::standardized) return channel_destandardize(x);
    throw StateError(std::string("expected an instance-normalized or standardized tensor, got ") + stage_name(x.stage));
}

}  // namespace

Probabilities predict(const FallDetector& model, const CsiTensor& x) {
    if (x.stage == TensorStage::standardized) return model.forward(x).probs;
    if (x.stage != TensorStage::instance_normalized) {
        throw StateError(std::string("predict expects an instance-normalized tensor, got ") + stage_name(x.stage));
    }
    return model.forward(channel_standardize(x)).probs;
}

Probabilities tta_predict(const FallDetector& model, const CsiTensor& x, int k, Rng& rng, double noise_sigma,
                          int shift_max) {
    if (k < 1) throw ParameterError("TTA needs k >= 1");
    if (k == 1) return predict(model, x);
    const CsiTensor base = as_instance_normalized(x);
    Probabilities sum = predict(model, base);
    std::uniform_int_distribution<int> magnitude(1, shift_max);
    for (int v = 2; v <= k; ++v) {
        CsiTensor perturbed;
        if (v % 2 == 0) {
            perturbed = inject_noise(base, noise_sigma, rng);
        } else {
            const int m = magnitude(rng);
            perturbed = time_shift(base, (rng() & 1) ? m : -m);
        }
        const Probabilities p = predict(model, perturbed);
        sum.p_fall += p.p_fall;
        sum.p_nonfall += p.p_nonfall;
    }
    return {sum.p_fall / k, sum.p_nonfall / k};
}

EvalResult evaluate(const FallDetector& model, const std::vector<std::string>& test_ids, const DatasetIndex& index,
                    TensorCache& cache, bool tta, const TrainConfig& cfg) {
    EvalResult r;
    Confusion c;
    for (const auto& id : test_ids) {
        const SampleRecord& rec = index.sample(id);
        const CsiTensor& x = cache.get(id);
        Probabilities p;
        if (tta) {
            Rng rng(derive_seed(cfg.seed ^ kTtaSalt, hash_string(id)));
            p = tta_predict(model, x, cfg.tta_k, rng, cfg.tta_noise_sigma, cfg.tta_shift_max);
        } else {
            p = predict(model, x);
        }
        const int pred = p.p_fall > p.p_nonfall ? kFallClass : kNonfallClass;
        c.add(rec.label, pred);
        r.predictions.push_back({id, rec.label, p.p_fall});
    }
    r.metrics = metrics_from_confusion(c);
    return r;
}

void summarize(LoeoResult& result) {
    result.pooled = {};
    double acc = 0.0, prec = 0.0, rec = 0.0;
    int n_prec = 0, n_rec = 0;
    for (const auto& f : result.folds) {
        acc += f.metrics.accuracy;
        if (f.metrics.precision) {
            prec += *f.metrics.precision;
            ++n_prec;
        }
        if (f.metrics.recall) {
            rec += *f.metrics.recall;
            ++n_rec;
        }
        result.pooled += f.metrics.confusion;
    }
    const auto n = static_cast<double>(result.folds.size());
    result.mean_accuracy = result.folds.empty() ? 0.0 : acc / n;
    result.mean_precision = n_prec ? std::optional<double>(prec / n_prec) : std::nullopt;
    result.mean_recall = n_rec ? std::optional<double>(rec / n_rec) : std::nullopt;
}

LoeoResult run_loeo(const ModelConfig& model_cfg, const TrainConfig& cfg, const DatasetIndex& index,
                    const LoeoOptions& opt) {
    LoeoResult result;
    TensorCache cache(index);
    for (auto& fold : loeo_folds(index)) {
        if (!opt.only_environments.empty() &&
            std::find(opt.only_environments.begin(), opt.only_environments.end(), fold.test_environment) ==
                opt.only_environments.end()) {
            continue;
        }
        FallDetector model = make_model(model_cfg, opt.model_seed);
        FoldResult fr;
        fr.loss_log = train_model(model, cfg, fold.train_ids, index, cache);
        // Evaluate exactly what the checkpoint holds.
        quantize_to_f32(model);
        if (opt.run_dir) {
            const auto dir = *opt.run_dir / ("fold_" + fold.test_environment);
            save_checkpoint(model, dir / "checkpoint.csfk");
            write_loss_log(dir / "loss_log.csv", fr.loss_log);
        }
        fr.metrics = evaluate(model, fold.test_ids, index, cache, false, cfg).metrics;
        if (opt.tta) fr.metrics_tta = evaluate(model, fold.test_ids, index, cache, true, cfg).metrics;
        fr.nlos = index.is_nlos(fold.test_environment);
        fr.fold = std::move(fold);
        result.folds.push_back(std::move(fr));
    }
    summarize(result);
    return result;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metrics_to_json(const Metrics& m) {
    const auto& c = m.confusion.counts;
    return {{"accuracy", m.accuracy},
            {"precision", optional_json(m.precision)},
            {"recall", optional_json(m.recall)},
            {"confusion", {{c[0][0], c[0][1]}, {c[1][0], c[1][1]}}},
            {"confusion_layout", "rows: true nonfall, fall; cols: predicted nonfall, fall"}};
}

}  // namespace

std::string metrics_json(const Metrics& m) { return metrics_to_json(m).dump(2); }

std::string loeo_json(const LoeoResult& r) {
    json folds = json::array();
    for (const auto& f : r.folds) {
        json jf = {{"test_environment", f.fold.test_environment},
                   {"nlos", f.nlos},
                   {"n_train", f.fold.train_ids.size()},
                   {"n_test", f.fold.test_ids.size()},
                   {"metrics", metrics_to_json(f.metrics)}};
        if (f.metrics_tta) jf["metrics_tta"] = metrics_to_json(*f.metrics_tta);
        if (!f.loss_log.empty()) jf["final_train_loss"] = f.loss_log.back().train_loss;
        folds.push_back(std::move(jf));
    }
    json agg = {{"mean_accuracy", r.mean_accuracy},
                {"mean_precision", optional_json(r.mean_precision)},
                {"mean_recall", optional_json(r.mean_recall)},
                {"pooled", metrics_to_json(metrics_from_confusion(r.pooled))}};
    return json{{"folds", folds}, {"aggregate", agg}}.dump(2);
}

void write_loss_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write loss log " + path.string());
    out << "epoch,lr,train_loss\n";
    char buf[96];
    for (const auto& e : log) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", e.epoch, e.lr, e.train_loss);
        out << buf;
    }
}

}  // namespace csifall
