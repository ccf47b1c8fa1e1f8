#pragma once

// Attention-enhanced CNN-Transformer classifier:
// DVG -> backbone (EfficientNet-B0 features or a tiny CNN) -> CBAM -> 1x1 projection,
// subcarrier mean, sinusoidal positions, Transformer encoder -> pooled MLP head.

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "csifall/augment.hpp"
#include "csifall/dvg.hpp"
#include "csifall/nn/params.hpp"
#include "csifall/preprocess.hpp"

namespace csifall {

inline constexpr int kNonfallClass = 0;
inline constexpr int kFallClass = 1;

enum class BackboneKind { efficientnet_b0, tiny_cnn };

const char* backbone_name(BackboneKind k);
BackboneKind parse_backbone(const std::string& s);

struct DvgConfig {
    bool enabled = true;
    double alpha = kDefaultGateAlpha;
    int window = kVarianceWindow;
    bool learnable = true;
    bool learn_alpha = false;
    GateTopology topology = GateTopology::depthwise;
    bool operator==(const DvgConfig&) const = default;
};

struct ModelConfig {
    BackboneKind backbone = BackboneKind::efficientnet_b0;
    bool pretrained = false;
    std::string pretrained_path;
    int d_model = 512;
    int n_layers = 2;
    int n_heads = 4;
    double dropout = 0.3;          // classifier head
    double encoder_dropout = 0.1;  // inside encoder layers
    int ff_mult = 4;
    int n_classes = 2;
    DvgConfig dvg{};
    int cbam_reduction = 16;
    bool cbam_enabled = true;
    bool transformer_enabled = true;
    int tiny_channels = 64;

    // Throws ConfigError.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Small configuration used for desk-scale training runs.
ModelConfig desk_model_config();

struct Probabilities {
    double p_fall = 0.0;
    double p_nonfall = 0.0;
};

Probabilities probabilities_from_logits(const nn::Tensor& logits);

using ShapeLog = std::vector<std::pair<std::string, nn::Shape>>;

struct FeatureMap {
    nn::Tensor data;  // C x H x W
};

struct CbamOutput {
    nn::Var refined;
    nn::Var channel_mask;  // C x 1 x 1
    nn::Var spatial_mask;  // 1 x H x W
};

struct HeadOptions {
    bool training = false;
    Rng* rng = nullptr;
    bool positional_encoding = true;
    // Test hook: reorders the T' axis of the projected sequence before positions are added.
    std::vector<int> time_permutation;
};

struct HeadOutput {
    nn::Var logits;  // 1 x n_classes
    Probabilities probs;
    std::vector<nn::Tensor> attention;  // one T' x T' matrix per layer and head
    nn::Shape embedding_shape;
};

struct ForwardOptions {
    bool training = false;
    Rng* rng = nullptr;
    bool positional_encoding = true;
    std::vector<int> time_permutation;
    bool keep_diagnostics = false;
};

struct Diagnostics {
    nn::Tensor dvg_mask;
    nn::Tensor channel_mask;
    nn::Tensor spatial_mask;
    std::vector<nn::Tensor> attention;
    ShapeLog shapes;
};

struct ForwardResult {
    nn::Var logits;
    Probabilities probs;
    Diagnostics diag;
};

class Backbone {
public:
    virtual ~Backbone() = default;
    virtual nn::Var forward(const nn::Var& x, ShapeLog* shapes) const = 0;
    virtual int out_channels() const = 0;
    // Sets batch norm running statistics from a set of (gated) inputs, layer by layer.
    // No-op for backbones whose statistics come from pretrained weights.
    virtual void calibrate(std::vector<nn::Tensor>) {}
};

// Sinusoidal positional encoding table (T x d).
nn::Tensor positional_encoding(int length, int d_model);

class FallDetector {
public:
    FallDetector(ModelConfig config, std::uint64_t seed);

    FallDetector(const FallDetector&) = delete;
    FallDetector& operator=(const FallDetector&) = delete;
    FallDetector(FallDetector&&) = default;

    const ModelConfig& config() const { return config_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    // Full forward on a standardized tensor.
    ForwardResult forward(const CsiTensor& standardized, const ForwardOptions& opt = {}) const;
    nn::Var forward(const nn::Var& x, const ForwardOptions& opt, Diagnostics* diag) const;

    // Stage-level entry points.
    std::pair<nn::Var, nn::Var> gate(const nn::Var& x) const;
    FeatureMap backbone_forward(const CsiTensor& gated, ShapeLog* shapes = nullptr) const;
    nn::Var backbone(const nn::Var& x, ShapeLog* shapes) const;
    CbamOutput cbam_forward(const nn::Var& f) const;
    HeadOutput temporal_head_forward(const nn::Var& f, const HeadOptions& opt = {}) const;

    GateParams gate_params() const;

    // Data-dependent init of backbone normalisation from standardized training inputs.
    void calibrate_normalization(const std::vector<CsiTensor>& standardized);

private:
    struct EncoderLayer {
        nn::Var wq, bq, wk, bk, wv, bv, wo, bo;
        nn::Var ln1_g, ln1_b, ff1_w, ff1_b, ff2_w, ff2_b, ln2_g, ln2_b;
    };

    nn::Var encoder_layer(const nn::Var& x, const EncoderLayer& layer, const HeadOptions& opt,
                          std::vector<nn::Tensor>* attention) const;

    ModelConfig config_;
    nn::ParamStore params_;
    GateVars gate_;
    std::unique_ptr<Backbone> backbone_;
    nn::Var cbam_w1_, cbam_b1_, cbam_w2_, cbam_b2_, cbam_sw_, cbam_sb_;
    nn::Var proj_w_, proj_b_;
    std::vector<EncoderLayer> layers_;
    nn::Var head1_w_, head1_b_, head2_w_, head2_b_;
};

}  // namespace csifall
