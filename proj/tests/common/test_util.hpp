#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "csifall/nn/autograd.hpp"

namespace testutil {

using csifall::nn::Shape;
using csifall::nn::Tensor;
using csifall::nn::Var;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (double& v : t.values()) v = u(rng);
    return t;
}

inline Tensor normal_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> nd(0.0, sd);
    for (double& v : t.values()) v = nd(rng);
    return t;
}

// |a - n| / max(|a|, |n|), with agreement below `abs_floor` counted as exact.
inline double rel_error(double analytic, double numeric, double abs_floor = 1e-9) {
    const double diff = std::abs(analytic - numeric);
    if (diff < abs_floor) return 0.0;
    return diff / std::max(std::abs(analytic), std::abs(numeric));
}

// Central difference of a scalar function with respect to element `i` of `p`.
inline double numeric_grad(const std::function<double()>& f, Var& p, std::size_t i, double h = 1e-5) {
    double& x = p.mutable_value()[i];
    const double keep = x;
    x = keep + h;
    const double up = f();
    x = keep - h;
    const double down = f();
    x = keep;
    return (up - down) / (2.0 * h);
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("csifall_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testutil
