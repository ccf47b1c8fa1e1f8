#include "csifall/model.hpp"

#include <algorithm>
#include <cmath>

#include "csifall/errors.hpp"

namespace csifall {

using nn::Var;

const char* backbone_name(BackboneKind k) {
    return k == BackboneKind::efficientnet_b0 ? "efficientnet_b0" : "tiny_cnn";
}

BackboneKind parse_backbone(const std::string& s) {
    if (s == "efficientnet_b0") return BackboneKind::efficientnet_b0;
    if (s == "tiny_cnn") return BackboneKind::tiny_cnn;
    throw ConfigError("unknown backbone \"" + s + "\" (expected efficientnet_b0 or tiny_cnn)");
}

void ModelConfig::validate() const {
    if (d_model < 1 || n_heads < 1) throw ConfigError("d_model and n_heads must be positive");
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (n_layers < 0) throw ConfigError("n_layers must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (!(encoder_dropout >= 0.0 && encoder_dropout < 1.0)) throw ConfigError("encoder_dropout must lie in [0, 1)");
    if (ff_mult < 1) throw ConfigError("ff_mult must be >= 1");
    if (n_classes != 2) throw ConfigError("only the binary fall / non-fall head is supported");
    if (cbam_reduction < 1) throw ConfigError("cbam_reduction must be >= 1");
    if (tiny_channels < 1) throw ConfigError("tiny_channels must be >= 1");
    if (!(dvg.alpha > 0.0)) throw ConfigError("dvg.alpha must be > 0");
    if (dvg.window < 1 || dvg.window % 2 == 0) throw ConfigError("dvg.window must be odd and >= 1");
    if (d_model < 2) throw ConfigError("d_model must be >= 2");
}

ModelConfig desk_model_config() {
    ModelConfig c;
    c.backbone = BackboneKind::tiny_cnn;
    c.d_model = 64;
    c.tiny_channels = 64;
    return c;
}

Probabilities probabilities_from_logits(const nn::Tensor& logits) {
    const double a = logits[kNonfallClass], b = logits[kFallClass];
    const double m = std::max(a, b);
    const double ea = std::exp(a - m), eb = std::exp(b - m);
    return {eb / (ea + eb), ea / (ea + eb)};
}

nn::Tensor positional_encoding(int length, int d_model) {
    nn::Tensor pe({length, d_model});
    for (int pos = 0; pos < length; ++pos)
        for (int j = 0; j < d_model; ++j) {
            const double angle = pos / std::pow(10000.0, (2.0 * (j / 2)) / d_model);
            pe.at(pos, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return pe;
}

namespace {

nn::Conv2dOptions conv_opts(int stride_h, int stride_w, int pad_h, int pad_w, int groups = 1) {
    nn::Conv2dOptions o;
    o.stride_h = stride_h;
    o.stride_w = stride_w;
    o.pad_h = pad_h;
    o.pad_w = pad_w;
    o.groups = groups;
    return o;
}

// Conv without bias followed by frozen-statistics batch norm.
struct ConvBn {
    Var w, gamma, beta, mean, var;
    nn::Conv2dOptions opt;

    ConvBn() = default;
    ConvBn(nn::ParamStore& ps, const std::string& name, int in, int out, int k, int stride, int groups, Rng& rng)
        : opt(conv_opts(stride, stride, k / 2, k / 2, groups)) {
        const int in_g = in / groups;
        w = ps.add(name + ".conv.weight", nn::he_normal({out, in_g, k, k}, in_g * k * k, rng));
        gamma = ps.add(name + ".bn.weight", nn::Tensor({out}, 1.0));
        beta = ps.add(name + ".bn.bias", nn::Tensor({out}, 0.0));
        mean = ps.add(name + ".bn.running_mean", nn::Tensor({out}, 0.0), false);
        var = ps.add(name + ".bn.running_var", nn::Tensor({out}, 1.0), false);
    }

    Var forward(const Var& x, bool act) const {
        Var y = nn::conv2d(x, w, nullptr, opt);
        y = nn::batchnorm_frozen(y, gamma, beta, mean.value(), var.value(), 1e-5);
        return act ? nn::silu(y) : y;
    }
};

struct MBConv {
    bool has_expand = false;
    ConvBn expand, depthwise, project;
    Var se_rw, se_rb, se_ew, se_eb;
    bool residual = false;

    MBConv(nn::ParamStore& ps, const std::string& name, int in, int out, int expand_ratio, int k, int stride,
           Rng& rng) {
        const int mid = in * expand_ratio;
        has_expand = expand_ratio != 1;
        if (has_expand) expand = ConvBn(ps, name + ".expand", in, mid, 1, 1, 1, rng);
        depthwise = ConvBn(ps, name + ".depthwise", mid, mid, k, stride, mid, rng);
        const int se = std::max(1, in / 4);
        se_rw = ps.add(name + ".se.reduce.weight", nn::he_normal({se, mid, 1, 1}, mid, rng));
        se_rb = ps.add(name + ".se.reduce.bias", nn::Tensor({se}, 0.0));
        se_ew = ps.add(name + ".se.expand.weight", nn::he_normal({mid, se, 1, 1}, se, rng));
        se_eb = ps.add(name + ".se.expand.bias", nn::Tensor({mid}, 0.0));
        project = ConvBn(ps, name + ".project", mid, out, 1, 1, 1, rng);
        residual = stride == 1 && in == out;
    }

    Var forward(const Var& x) const {
        Var h = has_expand ? expand.forward(x, true) : x;
        h = depthwise.forward(h, true);
        const int C = h.value().dim(0);
        const int HW = h.value().dim(1) * h.value().dim(2);
        Var s = nn::mean_axis(nn::reshape(h, {C, HW, 1}), 1, true);  // C x 1 x 1
        s = nn::silu(nn::conv2d(s, se_rw, &se_rb, {}));
        s = nn::sigmoid(nn::conv2d(s, se_ew, &se_eb, {}));
        h = nn::mul_bcast(h, s);
        h = project.forward(h, false);
        return residual ? nn::add(h, x) : h;
    }
};

class EfficientNetB0 final : public Backbone {
public:
    EfficientNetB0(nn::ParamStore& ps, Rng& rng) {
        stem_ = ConvBn(ps, "backbone.stem", 3, 32, 3, 2, 1, rng);
        struct StageSpec {
            int expand, k, stride, out, repeats;
        };
        static constexpr StageSpec kStages[] = {{1, 3, 1, 16, 1}, {6, 3, 2, 24, 2}, {6, 5, 2, 40, 2},
                                                {6, 3, 2, 80, 3}, {6, 5, 1, 112, 3}, {6, 5, 2, 192, 4},
                                                {6, 3, 1, 320, 1}};
        int in = 32;
        int stage_no = 2;
        for (const auto& s : kStages) {
            std::vector<MBConv> blocks;
            for (int r = 0; r < s.repeats; ++r) {
                const std::string name = "backbone.stage" + std::to_string(stage_no) + "." + std::to_string(r);
                blocks.emplace_back(ps, name, in, s.out, s.expand, s.k, r == 0 ? s.stride : 1, rng);
                in = s.out;
            }
            stages_.push_back(std::move(blocks));
            ++stage_no;
        }
        head_ = ConvBn(ps, "backbone.stage9", 320, 1280, 1, 1, 1, rng);
    }

    Var forward(const Var& x, ShapeLog* shapes) const override {
        Var h = stem_.forward(x, true);
        if (shapes) shapes->emplace_back("stage1", h.shape());
        int stage_no = 2;
        for (const auto& blocks : stages_) {
            for (const auto& b : blocks) h = b.forward(h);
            if (shapes) shapes->emplace_back("stage" + std::to_string(stage_no), h.shape());
            ++stage_no;
        }
        h = head_.forward(h, true);
        if (shapes) shapes->emplace_back("stage9", h.shape());
        return h;
    }

    int out_channels() const override { return 1280; }

private:
    ConvBn stem_;
    std::vector<std::vector<MBConv>> stages_;
    ConvBn head_;
};

// Four strided 3x3 conv blocks: 625 x 30 -> 313 x 15 -> 157 x 8 -> 79 x 4 -> 20 x 1.
// Batch norm statistics come from calibrate(); at their (0, 1) defaults the blocks
// shrink activations until the positional encoding swamps the sequence.
class TinyCnn final : public Backbone {
public:
    TinyCnn(nn::ParamStore& ps, int out_channels, Rng& rng) : out_(out_channels) {
        const int chans[5] = {3, 16, 32, 48, out_channels};
        const int strides[4] = {2, 2, 2, 4};
        for (int i = 0; i < 4; ++i) {
            const std::string name = "backbone.block" + std::to_string(i + 1);
            const int c = chans[i + 1];
            Block b;
            b.w = ps.add(name + ".conv.weight", nn::he_normal({c, chans[i], 3, 3}, chans[i] * 9, rng));
            b.gamma = ps.add(name + ".bn.weight", nn::Tensor({c}, 1.0));
            b.beta = ps.add(name + ".bn.bias", nn::Tensor({c}, 0.0));
            b.mean = ps.add(name + ".bn.running_mean", nn::Tensor({c}, 0.0), false);
            b.var = ps.add(name + ".bn.running_var", nn::Tensor({c}, 1.0), false);
            b.opt = conv_opts(strides[i], strides[i], 1, 1);
            blocks_.push_back(b);
        }
    }

    Var forward(const Var& x, ShapeLog* shapes) const override {
        Var h = x;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            h = block(blocks_[i], h);
            if (shapes) shapes->emplace_back("block" + std::to_string(i + 1), h.shape());
        }
        return h;
    }

    void calibrate(std::vector<nn::Tensor> xs) override {
        for (Block& b : blocks_) {
            const int C = b.w.value().dim(0);
            std::vector<nn::Tensor> ys;
            std::vector<double> sum(C, 0.0), sq(C, 0.0);
            double count = 0.0;
            for (const nn::Tensor& x : xs) {
                ys.push_back(nn::conv2d(nn::constant(x), b.w, nullptr, b.opt).value());
                const nn::Tensor& y = ys.back();
                const std::size_t hw = y.numel() / static_cast<std::size_t>(C);
                for (int c = 0; c < C; ++c)
                    for (std::size_t k = 0; k < hw; ++k) {
                        const double v = y[static_cast<std::size_t>(c) * hw + k];
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                count += static_cast<double>(hw);
            }
            for (int c = 0; c < C; ++c) {
                const double m = sum[c] / count;
                b.mean.mutable_value()[c] = m;
                b.var.mutable_value()[c] = std::max(0.0, sq[c] / count - m * m);
            }
            for (std::size_t n = 0; n < xs.size(); ++n) xs[n] = activate(b, nn::constant(ys[n])).value();
        }
    }

    int out_channels() const override { return out_; }

private:
    struct Block {
        Var w, gamma, beta, mean, var;
        nn::Conv2dOptions opt;
    };

    static Var activate(const Block& b, const Var& y) {
        return nn::silu(nn::batchnorm_frozen(y, b.gamma, b.beta, b.mean.value(), b.var.value(), 1e-5));
    }
    static Var block(const Block& b, const Var& x) { return activate(b, nn::conv2d(x, b.w, nullptr, b.opt)); }

    std::vector<Block> blocks_;
    int out_;
};

}  // namespace

FallDetector::FallDetector(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);

    const GateParams g = init_gate(config_.dvg.alpha, config_.dvg.topology, config_.dvg.learnable);
    gate_.topology = g.topology;
    gate_.kernel = params_.add("dvg.kernel", g.kernel, config_.dvg.learnable);
    gate_.bias = params_.add("dvg.bias", nn::Tensor::scalar(g.bias), config_.dvg.learnable);
    gate_.alpha = params_.add("dvg.alpha", nn::Tensor::scalar(g.alpha), config_.dvg.learn_alpha);

    if (config_.backbone == BackboneKind::efficientnet_b0) backbone_ = std::make_unique<EfficientNetB0>(params_, rng);
    else backbone_ = std::make_unique<TinyCnn>(params_, config_.tiny_channels, rng);

    const int C = backbone_->out_channels();
    const int hid = std::max(1, C / config_.cbam_reduction);
    cbam_w1_ = params_.add("cbam.mlp1.weight", nn::fan_in_uniform({hid, C}, C, rng));
    cbam_b1_ = params_.add("cbam.mlp1.bias", nn::fan_in_uniform({hid}, C, rng));
    cbam_w2_ = params_.add("cbam.mlp2.weight", nn::fan_in_uniform({C, hid}, hid, rng));
    cbam_b2_ = params_.add("cbam.mlp2.bias", nn::fan_in_uniform({C}, hid, rng));
    cbam_sw_ = params_.add("cbam.spatial.weight", nn::fan_in_uniform({1, 2, 7, 7}, 2 * 49, rng));
    cbam_sb_ = params_.add("cbam.spatial.bias", nn::fan_in_uniform({1}, 2 * 49, rng));

    const int d = config_.d_model;
    proj_w_ = params_.add("head.proj.weight", nn::fan_in_uniform({d, C, 1, 1}, C, rng));
    proj_b_ = params_.add("head.proj.bias", nn::fan_in_uniform({d}, C, rng));

    const int ff = d * config_.ff_mult;
    for (int l = 0; l < config_.n_layers; ++l) {
        const std::string p = "encoder." + std::to_string(l) + ".";
        EncoderLayer e;
        e.wq = params_.add(p + "attn.q.weight", nn::fan_in_uniform({d, d}, d, rng));
        e.bq = params_.add(p + "attn.q.bias", nn::Tensor({d}, 0.0));
        e.wk = params_.add(p + "attn.k.weight", nn::fan_in_uniform({d, d}, d, rng));
        e.bk = params_.add(p + "attn.k.bias", nn::Tensor({d}, 0.0));
        e.wv = params_.add(p + "attn.v.weight", nn::fan_in_uniform({d, d}, d, rng));
        e.bv = params_.add(p + "attn.v.bias", nn::Tensor({d}, 0.0));
        e.wo = params_.add(p + "attn.out.weight", nn::fan_in_uniform({d, d}, d, rng));
        e.bo = params_.add(p + "attn.out.bias", nn::Tensor({d}, 0.0));
        e.ln1_g = params_.add(p + "norm1.weight", nn::Tensor({d}, 1.0));
        e.ln1_b = params_.add(p + "norm1.bias", nn::Tensor({d}, 0.0));
        e.ff1_w = params_.add(p + "ff1.weight", nn::fan_in_uniform({ff, d}, d, rng));
        e.ff1_b = params_.add(p + "ff1.bias", nn::fan_in_uniform({ff}, d, rng));
        e.ff2_w = params_.add(p + "ff2.weight", nn::fan_in_uniform({d, ff}, ff, rng));
        e.ff2_b = params_.add(p + "ff2.bias", nn::fan_in_uniform({d}, ff, rng));
        e.ln2_g = params_.add(p + "norm2.weight", nn::Tensor({d}, 1.0));
        e.ln2_b = params_.add(p + "norm2.bias", nn::Tensor({d}, 0.0));
        layers_.push_back(e);
    }
    const int h = d / 2;
    head1_w_ = params_.add("head.fc1.weight", nn::fan_in_uniform({h, d}, d, rng));
    head1_b_ = params_.add("head.fc1.bias", nn::fan_in_uniform({h}, d, rng));
    head2_w_ = params_.add("head.fc2.weight", nn::fan_in_uniform({config_.n_classes, h}, h, rng));
    head2_b_ = params_.add("head.fc2.bias", nn::fan_in_uniform({config_.n_classes}, h, rng));
}

GateParams FallDetector::gate_params() const {
    GateParams g;
    g.kernel = gate_.kernel.value();
    g.bias = gate_.bias.value()[0];
    g.alpha = gate_.alpha.value()[0];
    g.learnable = config_.dvg.learnable;
    g.learn_alpha = config_.dvg.learn_alpha;
    g.topology = gate_.topology;
    return g;
}

std::pair<Var, Var> FallDetector::gate(const Var& x) const { return gate_forward(x, gate_, config_.dvg.window); }

void FallDetector::calibrate_normalization(const std::vector<CsiTensor>& standardized) {
    std::vector<nn::Tensor> xs;
    xs.reserve(standardized.size());
    for (const CsiTensor& t : standardized) {
        const Var x = nn::constant(t.data);
        xs.push_back(config_.dvg.enabled ? gate(x).first.value() : t.data);
    }
    if (!xs.empty()) backbone_->calibrate(std::move(xs));
}

Var FallDetector::backbone(const Var& x, ShapeLog* shapes) const {
    if (x.value().ndim() != 3 || x.value().dim(0) != 3) {
        throw ShapeError("backbone expects a 3 x T x S input, got " + nn::shape_str(x.shape()));
    }
    return backbone_->forward(x, shapes);
}

FeatureMap FallDetector::backbone_forward(const CsiTensor& gated, ShapeLog* shapes) const {
    if (gated.data.shape() != nn::Shape{kNumRx, kTensorTime, kNumSub}) {
        throw ShapeError("backbone_forward expects 3x625x30, got " + nn::shape_str(gated.data.shape()));
    }
    return {backbone(nn::constant(gated.data), shapes).value()};
}

CbamOutput FallDetector::cbam_forward(const Var& f) const {
    if (f.value().ndim() != 3) throw ShapeError("CBAM expects C x H x W");
    const int C = f.value().dim(0), H = f.value().dim(1), W = f.value().dim(2);
    if (C != backbone_->out_channels()) throw ShapeError("CBAM channel count does not match the backbone");
    const Var flat = nn::reshape(f, {C, H * W});
    const Var avg = nn::reshape(nn::mean_axis(flat, 1, false), {1, C});
    const Var mx = nn::reshape(nn::max_axis(flat, 1, false), {1, C});
    auto mlp = [&](const Var& v) {
        return nn::linear(nn::relu(nn::linear(v, cbam_w1_, &cbam_b1_)), cbam_w2_, &cbam_b2_);
    };
    const Var mc = nn::reshape(nn::sigmoid(nn::add(mlp(avg), mlp(mx))), {C, 1, 1});
    const Var f1 = nn::mul_bcast(f, mc);
    const Var pooled = nn::concat({nn::mean_axis(f1, 0, true), nn::max_axis(f1, 0, true)}, 0);
    const Var ms = nn::sigmoid(nn::conv2d(pooled, cbam_sw_, &cbam_sb_, conv_opts(1, 1, 3, 3)));
    return {nn::mul_bcast(f1, ms), mc, ms};
}

Var FallDetector::encoder_layer(const Var& x, const EncoderLayer& e, const HeadOptions& opt,
                                std::vector<nn::Tensor>* attention) const {
    const int d = config_.d_model;
    const int heads = config_.n_heads;
    const int dk = d / heads;
    const double p = config_.encoder_dropout;
    const Var q = nn::linear(x, e.wq, &e.bq);
    const Var k = nn::linear(x, e.wk, &e.bk);
    const Var v = nn::linear(x, e.wv, &e.bv);
    std::vector<Var> outs;
    for (int h = 0; h < heads; ++h) {
        const Var qh = nn::slice(q, 1, h * dk, dk);
        const Var kh = nn::slice(k, 1, h * dk, dk);
        const Var vh = nn::slice(v, 1, h * dk, dk);
        const Var a = nn::softmax_rows(nn::scale(nn::matmul(qh, kh, false, true), 1.0 / std::sqrt(double(dk))));
        if (attention) attention->push_back(a.value());
        outs.push_back(nn::matmul(nn::dropout(a, p, opt.training, opt.rng), vh));
    }
    const Var attn = nn::linear(nn::concat(outs, 1), e.wo, &e.bo);
    Var y = nn::layer_norm_rows(nn::add(x, nn::dropout(attn, p, opt.training, opt.rng)), e.ln1_g, e.ln1_b);
    Var ff = nn::linear(nn::relu(nn::linear(y, e.ff1_w, &e.ff1_b)), e.ff2_w, &e.ff2_b);
    return nn::layer_norm_rows(nn::add(y, nn::dropout(ff, p, opt.training, opt.rng)), e.ln2_g, e.ln2_b);
}

HeadOutput FallDetector::temporal_head_forward(const Var& f, const HeadOptions& opt) const {
    if (f.value().ndim() != 3 || f.value().dim(0) != backbone_->out_channels()) {
        throw ShapeError("temporal head expects a " + std::to_string(backbone_->out_channels()) +
                         " x H x W feature map, got " + nn::shape_str(f.shape()));
    }
    HeadOutput out;
    Var e = nn::conv2d(f, proj_w_, &proj_b_, {});  // d x T' x W
    e = nn::transpose2d(nn::mean_axis(e, 2, false));  // T' x d
    const int T = e.value().dim(0);
    if (!opt.time_permutation.empty()) {
        if (static_cast<int>(opt.time_permutation.size()) != T) throw ShapeError("time permutation length mismatch");
        e = nn::index_select_rows(e, opt.time_permutation);
    }
    out.embedding_shape = e.shape();
    if (opt.positional_encoding) e = nn::add(e, nn::constant(positional_encoding(T, config_.d_model)));
    if (config_.transformer_enabled) {
        for (const auto& layer : layers_) e = encoder_layer(e, layer, opt, &out.attention);
    }
    Var pooled = nn::mean_axis(e, 0, true);  // 1 x d
    Var h = nn::silu(nn::linear(pooled, head1_w_, &head1_b_));
    h = nn::dropout(h, config_.dropout, opt.training, opt.rng);
    out.logits = nn::linear(h, head2_w_, &head2_b_);
    out.probs = probabilities_from_logits(out.logits.value());
    return out;
}

Var FallDetector::forward(const Var& x, const ForwardOptions& opt, Diagnostics* diag) const {
    Var h = x;
    if (config_.dvg.enabled) {
        auto [gated, mask] = gate(x);
        if (diag) diag->dvg_mask = mask.value();
        h = gated;
    }
    Var f = backbone(h, diag ? &diag->shapes : nullptr);
    if (config_.cbam_enabled) {
        CbamOutput c = cbam_forward(f);
        if (diag) {
            diag->channel_mask = c.channel_mask.value();
            diag->spatial_mask = c.spatial_mask.value();
        }
        f = c.refined;
    }
    HeadOptions ho;
    ho.training = opt.training;
    ho.rng = opt.rng;
    ho.positional_encoding = opt.positional_encoding;
    ho.time_permutation = opt.time_permutation;
    HeadOutput head = temporal_head_forward(f, ho);
    if (diag) {
        diag->attention = std::move(head.attention);
        diag->shapes.emplace_back("embedding", head.embedding_shape);
    }
    return head.logits;
}

ForwardResult FallDetector::forward(const CsiTensor& standardized, const ForwardOptions& opt) const {
    if (standardized.stage != TensorStage::standardized) {
        throw StateError(std::string("model_forward expects a standardized tensor, got ") +
                         stage_name(standardized.stage));
    }
    ForwardResult r;
    Diagnostics* d = opt.keep_diagnostics ? &r.diag : nullptr;
    r.logits = forward(nn::constant(standardized.data), opt, d);
    r.probs = probabilities_from_logits(r.logits.value());
    return r;
}

}  // namespace csifall
