#pragma once

// Finite-difference oracle for tape gradients. A case builds a scalar loss
// from tracked leaves; the harness compares tape gradients against central
// differences taken on the raw input values. fn must be deterministic.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ildlab/rng.hpp"
#include "ildlab/tensor.hpp"

namespace gradcheck {

using LossFn = std::function<ildlab::Tensor(ildlab::Tape&, std::vector<ildlab::Tensor>&)>;

inline double max_rel_error(std::vector<ildlab::Tensor> inputs, const LossFn& fn,
                            double h = 1e-5) {
    ildlab::Tape tape;
    std::vector<ildlab::Tensor> leaves;
    leaves.reserve(inputs.size());
    for (auto& t : inputs)
        leaves.push_back(tape.leaf(t));
    ildlab::Tensor loss = fn(tape, leaves);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves)
        analytic.push_back(tape.grad(l));

    const auto eval = [&]() {
        ildlab::Tape tp;
        std::vector<ildlab::Tensor> lv;
        lv.reserve(inputs.size());
        for (auto& t : inputs)
            lv.push_back(tp.leaf(t));
        return fn(tp, lv).item();
    };

    double worst = 0.0;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        for (std::size_t i = 0; i < inputs[ti].size(); ++i) {
            const double orig = inputs[ti].v()[i];
            inputs[ti].v()[i] = orig + h;
            const double fp = eval();
            inputs[ti].v()[i] = orig - h;
            const double fm = eval();
            inputs[ti].v()[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double ad = analytic[ti][i];
            const double denom = std::max(std::abs(fd), std::abs(ad));
            const double rel = denom < 1e-7 ? std::abs(fd - ad) : std::abs(fd - ad) / denom;
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

inline ildlab::Tensor random_tensor(ildlab::Shape shape, ildlab::Rng& rng,
                                    double stddev = 1.0) {
    ildlab::Tensor t = ildlab::Tensor::zeros(std::move(shape));
    for (double& v : t.v())
        v = rng.normal(0.0, stddev);
    return t;
}

struct OpCase {
    std::string name;
    // returns the worst relative error for one seed
    std::function<double(std::uint64_t)> run;
};

// One entry per differentiable op; shared between the unit tests and the
// acceptance gate so both exercise identical cases.
std::vector<OpCase> op_battery();

} // namespace gradcheck
