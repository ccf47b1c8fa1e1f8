#include "csifall/dvg.hpp"

#include "csifall/errors.hpp"

namespace csifall {

GateParams init_gate(double alpha, GateTopology topology, bool learnable) {
    if (!(alpha > 0.0)) throw ParameterError("DVG alpha must be > 0");
    GateParams p;
    const int in_per_group = topology == GateTopology::depthwise ? 1 : 3;
    p.kernel = nn::Tensor({3, in_per_group, 3, 3}, kGateKernelInit);
    p.bias = kGateBiasInit;
    p.alpha = alpha;
    p.learnable = learnable;
    p.topology = topology;
    return p;
}

nn::Var local_variance(const nn::Var& x, int window) {
    if (window < 1 || window % 2 == 0) throw ParameterError("variance window must be odd and >= 1");
    const nn::Var mean = nn::box_mean_time(x, window);
    const nn::Var mean_sq = nn::box_mean_time(nn::square(x), window);
    return nn::add_scalar(nn::relu(nn::sub(mean_sq, nn::square(mean))), kVarianceEps);
}

std::pair<nn::Var, nn::Var> gate_forward(const nn::Var& x, const GateVars& gate, int window) {
    if (x.value().ndim() != 3 || x.value().dim(0) != 3) {
        throw ShapeError("DVG expects a 3 x T x S tensor, got " + nn::shape_str(x.shape()));
    }
    const nn::Var v = local_variance(x, window);
    const nn::Var scaled = nn::scale_by(v, gate.alpha);
    nn::Conv2dOptions opt;
    opt.pad_h = 1;
    opt.pad_w = 1;
    opt.groups = gate.topology == GateTopology::depthwise ? 3 : 1;
    const nn::Var conv = nn::conv2d(scaled, gate.kernel, nullptr, opt);
    const nn::Var mask = nn::sigmoid(nn::add_bcast(conv, nn::reshape(gate.bias, {1, 1, 1})));
    return {nn::mul(x, mask), mask};
}

namespace {

void check_standardized(const CsiTensor& x) {
    if (x.stage != TensorStage::standardized) {
        throw StateError(std::string("DVG expects a standardized tensor, got ") + stage_name(x.stage));
    }
}

}  // namespace

VarianceMap local_variance(const CsiTensor& x, int window) {
    require_finite(x.data, "local_variance");
    return {local_variance(nn::constant(x.data), window).value()};
}

GateOutput gate_forward(const CsiTensor& x, const GateParams& params, int window) {
    check_standardized(x);
    const int expect_in = params.topology == GateTopology::depthwise ? 1 : 3;
    if (params.kernel.shape() != nn::Shape{3, expect_in, 3, 3}) {
        throw ShapeError("DVG kernel shape " + nn::shape_str(params.kernel.shape()) + " does not match topology");
    }
    GateVars g{nn::constant(params.kernel), nn::constant(nn::Tensor::scalar(params.bias)),
               nn::constant(nn::Tensor::scalar(params.alpha)), params.topology};
    auto [gated, mask] = gate_forward(nn::constant(x.data), g, window);
    return {CsiTensor{gated.value(), TensorStage::gated}, mask.value()};
}

}  // namespace csifall
