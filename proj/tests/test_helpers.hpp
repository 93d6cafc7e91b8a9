#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pam/ccore.hpp"
#include "pam/rng.hpp"
#include "pam/tape.hpp"
#include "pam/tensor.hpp"

namespace pamtest {

using pam::CounterRng;
using pam::Tape;
using pam::Tensor;
using pam::VarId;

inline Tensor<double> random_tensor(std::vector<int64_t> shape, CounterRng& rng,
                                    double scale = 1.0) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.gaussian();
    return t;
}

/// Gaussian draws pushed at least `margin` away from zero, for testing ops
/// with a kink at the origin (relu, abs) without landing on it.
inline Tensor<double> random_tensor_off_zero(std::vector<int64_t> shape, CounterRng& rng,
                                             double margin = 0.1) {
    Tensor<double> t = random_tensor(std::move(shape), rng);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] += t[i] >= 0.0 ? margin : -margin;
    return t;
}

/// Scalar loss as a fixed random projection of y, so every output component
/// influences it.
inline VarId proj_loss(Tape<double>& tape, VarId y, uint64_t salt = 7) {
    const Tensor<double>& yv = tape.val(y);
    CounterRng rng = CounterRng::for_path(salt, "proj");
    Tensor<double> w = Tensor<double>::zeros(yv.shape);
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.gaussian();
    VarId wv = tape.constant(std::move(w));
    return pam::sum_all(tape, pam::mul_ew(tape, y, wv));
}

struct GradCheck {
    double max_rel = 0.0;
    std::string where;
};

/// Central finite differences against the tape's backward pass. `build` maps
/// (tape, leaf vars) to a scalar loss; every element of every input is
/// perturbed by +-eps.
template <typename BuildFn>
GradCheck grad_check(std::vector<Tensor<double>> inputs, BuildFn build, double eps = 1e-5) {
    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        std::vector<VarId> vars;
        vars.reserve(inputs.size());
        for (auto& in : inputs) vars.push_back(tape.leaf(in.clone(), true));
        VarId loss = build(tape, vars);
        tape.backward(loss);
        for (VarId v : vars) {
            analytic.push_back(tape.grad_touched(v) ? tape.grad(v).clone()
                                                    : Tensor<double>::zeros(tape.val(v).shape));
        }
    }
    auto eval = [&](const std::vector<Tensor<double>>& ins) {
        Tape<double> tape(true);
        std::vector<VarId> vars;
        vars.reserve(ins.size());
        for (const auto& in : ins) vars.push_back(tape.leaf(in.clone(), true));
        return tape.val(build(tape, vars))[0];
    };
    GradCheck res;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (int64_t j = 0; j < inputs[i].numel(); ++j) {
            const double orig = inputs[i][j];
            inputs[i][j] = orig + eps;
            const double lp = eval(inputs);
            inputs[i][j] = orig - eps;
            const double lm = eval(inputs);
            inputs[i][j] = orig;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double a = analytic[i][j];
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > res.max_rel) {
                res.max_rel = rel;
                res.where = "input " + std::to_string(i) + " elem " + std::to_string(j) +
                            ": analytic " + std::to_string(a) + " numeric " +
                            std::to_string(numeric);
            }
        }
    }
    return res;
}

}  // namespace pamtest
