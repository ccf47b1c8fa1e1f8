#pragma once

// Focal-loss training with Adam and cosine decay, leave-one-environment-out folds,
// test-time augmentation and confusion-matrix metrics.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "csifall/augment.hpp"
#include "csifall/model.hpp"

namespace csifall {

inline constexpr double kFocalProbFloor = 1e-12;

struct TrainConfig {
    double lr = 5e-4;
    double min_lr = 1e-6;
    int epochs = 10;
    int batch_size = 8;
    double focal_gamma = 2.0;
    double focal_alpha = 3.0;
    // false: alpha weights the fall class only; true: alpha weights both classes.
    bool symmetric_alpha = false;
    std::uint64_t seed = 0;
    bool augment_enabled = true;
    AugmentPolicy augment{};
    int tta_k = 5;
    double tta_noise_sigma = 0.01;
    int tta_shift_max = 10;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    // Throws ConfigError.
    void validate() const;
};

// lr(e) = min + (lr - min) * (1 + cos(pi * e / (E - 1))) / 2; a single epoch uses lr.
double cosine_lr(const TrainConfig& cfg, int epoch);

double focal_alpha_t(int label, double alpha, bool symmetric);
// -alpha_t * (1 - p_t)^gamma * ln(max(p_t, 1e-12)).
double focal_loss(const Probabilities& probs, int label, double gamma, double alpha, bool symmetric = false);

struct EnvironmentInfo {
    std::string id;
    bool nlos = false;
};

struct SampleRecord {
    std::string sample_id;
    std::string file;  // relative to the index directory unless absolute
    int label = kNonfallClass;
    std::string environment_id;
};

struct DatasetIndex {
    std::vector<EnvironmentInfo> environments;
    std::vector<SampleRecord> samples;
    std::filesystem::path root;  // directory the index was loaded from

    std::filesystem::path resolve(const SampleRecord& s) const;
    const SampleRecord& sample(const std::string& id) const;
    bool is_nlos(const std::string& environment_id) const;
    std::vector<std::string> environment_ids() const;  // sorted, unique
};

// Throws ValidationError on empty env ids, non-binary labels, duplicate ids or missing files.
void validate_index(const DatasetIndex& index, bool check_files = true);
DatasetIndex load_index(const std::filesystem::path& path);
void save_index(const DatasetIndex& index, const std::filesystem::path& path);

struct Fold {
    std::string test_environment;
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
};

// One fold per environment, in sorted environment order.
std::vector<Fold> loeo_folds(const DatasetIndex& index);
// Random split over all samples (train_fraction of them for training).
Fold random_split(const DatasetIndex& index, double train_fraction, std::uint64_t seed);

// Loads sample tensors on first use and keeps them in memory.
class TensorCache {
public:
    explicit TensorCache(const DatasetIndex& index) : index_(index) {}
    const CsiTensor& get(const std::string& sample_id);

private:
    const DatasetIndex& index_;
    std::map<std::string, CsiTensor> cache_;
};

class Adam {
public:
    Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
    void step(nn::ParamStore& params, double lr);

private:
    double beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<nn::Tensor> m_, v_;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
};

// Trains `model` in place and returns the per-epoch loss log.
std::vector<EpochLog> train_model(FallDetector& model, const TrainConfig& cfg, const std::vector<std::string>& train_ids,
                                  const DatasetIndex& index, TensorCache& cache);

// Confusion counts indexed [true][pred], class 0 = nonfall, 1 = fall.
struct Confusion {
    std::array<std::array<long, 2>, 2> counts{};

    long tp() const { return counts[1][1]; }
    long fp() const { return counts[0][1]; }
    long fn() const { return counts[1][0]; }
    long tn() const { return counts[0][0]; }
    long total() const { return tp() + fp() + fn() + tn(); }
    void add(int truth, int pred) { ++counts[truth][pred]; }
    Confusion& operator+=(const Confusion& o);
};

struct Metrics {
    Confusion confusion;
    double accuracy = 0.0;
    std::optional<double> precision;  // nullopt when nothing was predicted positive
    std::optional<double> recall;     // nullopt when there are no positives
};

Metrics metrics_from_confusion(const Confusion& c);

// Identity plus k-1 perturbed copies (noise, shift, noise, shift, ...) of an
// instance-normalized tensor; each copy is standardized and scored, probabilities averaged.
Probabilities tta_predict(const FallDetector& model, const CsiTensor& x, int k, Rng& rng, double noise_sigma = 0.01,
                          int shift_max = 10);

// Single eval-mode prediction on an instance-normalized (or standardized) tensor.
Probabilities predict(const FallDetector& model, const CsiTensor& x);

struct SamplePrediction {
    std::string sample_id;
    int label = 0;
    double p_fall = 0.0;
};

struct EvalResult {
    Metrics metrics;
    std::vector<SamplePrediction> predictions;
};

EvalResult evaluate(const FallDetector& model, const std::vector<std::string>& test_ids, const DatasetIndex& index,
                    TensorCache& cache, bool tta, const TrainConfig& cfg);

struct FoldResult {
    Fold fold;
    bool nlos = false;
    Metrics metrics;
    std::optional<Metrics> metrics_tta;
    std::vector<EpochLog> loss_log;
};

struct LoeoResult {
    std::vector<FoldResult> folds;
    double mean_accuracy = 0.0;
    std::optional<double> mean_precision;
    std::optional<double> mean_recall;
    Confusion pooled;
};

struct LoeoOptions {
    bool tta = false;
    // When set, each fold's checkpoint and loss log land in <run_dir>/fold_<env>/.
    std::optional<std::filesystem::path> run_dir;
    std::uint64_t model_seed = 0;
    // Restricts the sweep to these held-out environments (all when empty).
    std::vector<std::string> only_environments;
};

LoeoResult run_loeo(const ModelConfig& model_cfg, const TrainConfig& cfg, const DatasetIndex& index,
                    const LoeoOptions& opt = {});

// Summary over fold metrics: mean of the defined per-fold values.
void summarize(LoeoResult& result);

// metrics.json / loss_log.csv writers.
std::string metrics_json(const Metrics& m);
std::string loeo_json(const LoeoResult& r);
void write_loss_log(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace csifall
