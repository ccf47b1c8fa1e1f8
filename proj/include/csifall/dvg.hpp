#pragma once

// Dynamic Variance Gate: local temporal variance -> scaled 3x3 convolution with a
// negative bias -> sigmoid mask that multiplies the standardized input.

#include <utility>

#include "csifall/nn/autograd.hpp"
#include "csifall/preprocess.hpp"

namespace csifall {

inline constexpr int kVarianceWindow = 15;
inline constexpr double kVarianceEps = 1e-6;
inline constexpr double kGateBiasInit = -3.0;
inline constexpr double kGateKernelInit = 1.0 / 9.0;
inline constexpr double kDefaultGateAlpha = 100.0;

enum class GateTopology { depthwise, dense };

struct GateParams {
    // depthwise: 3 x 1 x 3 x 3; dense: 3 x 3 x 3 x 3.
    nn::Tensor kernel;
    double bias = kGateBiasInit;
    double alpha = kDefaultGateAlpha;
    bool learnable = true;
    bool learn_alpha = false;
    GateTopology topology = GateTopology::depthwise;
};

// Kernel weights all 1/9, bias -3.0.
GateParams init_gate(double alpha, GateTopology topology = GateTopology::depthwise, bool learnable = true);

struct VarianceMap {
    nn::Tensor data;  // same shape as the input, every value >= kVarianceEps
};

// ReLU(E_W[x^2] - E_W[x]^2) + eps along time with replicate padding.
VarianceMap local_variance(const CsiTensor& x, int window = kVarianceWindow);

struct GateOutput {
    CsiTensor gated;
    nn::Tensor mask;
};

GateOutput gate_forward(const CsiTensor& x, const GateParams& params, int window = kVarianceWindow);

// Differentiable building blocks shared with the model.
nn::Var local_variance(const nn::Var& x, int window);

struct GateVars {
    nn::Var kernel;
    nn::Var bias;   // single element
    nn::Var alpha;  // single element
    GateTopology topology = GateTopology::depthwise;
};

// Returns (gated, mask).
std::pair<nn::Var, nn::Var> gate_forward(const nn::Var& x, const GateVars& gate, int window);

}  // namespace csifall
