#pragma once
#include <cmath>
#include <cstdint>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/networks.hpp"
#include "vseg/tape.hpp"

namespace vseg {

// Adam with bias correction. Moments are kept in f64 so the update math does
// not inherit f32 rounding; one state instance serves one ParamSet.
template <class S>
struct OptimState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_hat = 1e-8;
    long long step = 0;
    std::vector<std::vector<double>> m, v; // parallel to ParamSet::items

    static OptimState for_params(const ParamSet<S>& ps, double lr = 1e-3) {
        if (!(lr > 0.0)) throw ConfigError("adam: lr must be > 0");
        OptimState st;
        st.lr = lr;
        st.m.reserve(ps.items.size());
        st.v.reserve(ps.items.size());
        for (const auto& [name, t] : ps.items) {
            st.m.emplace_back(std::size_t(t.numel()), 0.0);
            st.v.emplace_back(std::size_t(t.numel()), 0.0);
        }
        return st;
    }
};

using OptimState32 = OptimState<float>;

// One update over every parameter in the set. Gradients are looked up via
// the tape-bound twin of each parameter (see bind()); parameters whose
// gradient is absent (unreachable from the loss) are treated as zero-grad.
template <class S>
void adam_step(ParamSet<S>& params, const ParamSet<S>& bound, const GradientMap<S>& grads, OptimState<S>& state) {
    if (state.m.size() != params.items.size())
        throw ContractViolation("adam_step: state tracks " + std::to_string(state.m.size()) +
                                " parameters, set has " + std::to_string(params.items.size()));
    if (bound.items.size() != params.items.size())
        throw ContractViolation("adam_step: bound set size " + std::to_string(bound.items.size()) +
                                " != parameter set size " + std::to_string(params.items.size()));
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
    for (std::size_t p = 0; p < params.items.size(); ++p) {
        auto& [name, theta] = params.items[p];
        if (bound.items[p].first != name)
            throw ContractViolation("adam_step: bound set order mismatch at " + name);
        auto& m = state.m[p];
        auto& v = state.v[p];
        if (m.size() != std::size_t(theta.numel()))
            throw ContractViolation("adam_step: moment buffer for " + name + " has " + std::to_string(m.size()) +
                                    " elements, parameter has " + std::to_string(theta.numel()));
        const Tensor<S>* g = grads.lookup(bound.items[p].second);
        if (g && !same_shape(*g, theta))
            throw ContractViolation("adam_step: gradient shape " + shape_str(g->shape()) + " != parameter " + name +
                                    " shape " + shape_str(theta.shape()));
        auto td = theta.data();
        std::vector<S> out(td.begin(), td.end());
        auto gd = g ? g->data() : std::span<const S>();
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double gi = g ? double(gd[i]) : 0.0;
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            out[i] = S(double(out[i]) - state.lr * mhat / (std::sqrt(vhat) + state.eps_hat));
        }
        theta = Tensor<S>(theta.shape(), std::move(out), true);
    }
}

} // namespace vseg
