#include "csifall/nn/params.hpp"

#include <cmath>

#include "csifall/errors.hpp"

namespace csifall::nn {

Var ParamStore::add(std::string name, Tensor init, bool trainable) {
    if (find(name)) throw ConfigError("duplicate parameter name " + name);
    Var v = trainable ? parameter(std::move(init)) : constant(std::move(init));
    params_.push_back({std::move(name), v, trainable});
    return v;
}

const NamedParam* ParamStore::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

NamedParam* ParamStore::find(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

std::size_t ParamStore::total_elements(bool trainable_only) const {
    std::size_t n = 0;
    for (const auto& p : params_)
        if (!trainable_only || p.trainable) n += p.var.numel();
    return n;
}

Tensor he_normal(Shape shape, int fan_in, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / std::max(fan_in, 1)));
    for (double& v : t.values()) v = n(rng);
    return t;
}

Tensor fan_in_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    const double b = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
    std::uniform_real_distribution<double> u(-b, b);
    for (double& v : t.values()) v = u(rng);
    return t;
}

}  // namespace csifall::nn
