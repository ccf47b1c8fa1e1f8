#pragma once

#include <random>
#include <string>
#include <vector>

#include "csifall/nn/autograd.hpp"

namespace csifall::nn {

struct NamedParam {
    std::string name;
    Var var;
    bool trainable = true;
};

// Ordered, named parameter registry. Order is the checkpoint and optimizer order.
class ParamStore {
public:
    Var add(std::string name, Tensor init, bool trainable = true);

    const std::vector<NamedParam>& all() const { return params_; }
    std::vector<NamedParam>& all() { return params_; }
    const NamedParam* find(const std::string& name) const;
    NamedParam* find(const std::string& name);

    void zero_grad();
    std::size_t total_elements(bool trainable_only = false) const;

private:
    std::vector<NamedParam> params_;
};

// He-normal initialisation for conv weights (std = sqrt(2 / fan_in)).
Tensor he_normal(Shape shape, int fan_in, std::mt19937_64& rng);
// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual dense-layer default.
Tensor fan_in_uniform(Shape shape, int fan_in, std::mt19937_64& rng);

}  // namespace csifall::nn
