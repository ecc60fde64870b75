#pragma once
#include <cmath>
#include <cstdint>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/tape.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

// Central-difference gradient check.
//
// scalar_fn must be a deterministic functor with signature
//     Tensor<S> fn(Tape<S>& tape, const std::vector<Tensor<S>>& bound_params)
// that rebuilds the computation from scratch on the given tape. The analytic
// gradient is taken from one backward() pass; the numeric gradient perturbs
// each parameter element by +/- eps and re-evaluates. Returns
// max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, denom_floor).
//
// denom_floor bounds the metric for near-zero gradient coordinates, where a
// pure relative error is meaningless: central differences resolve the
// gradient only to ~ulp(loss)/(2*eps) in absolute terms (~2e-11 for a loss
// of order 1 at eps = 1e-5 in f64), so coordinates below the floor are held
// to an absolute tolerance of tol * denom_floor instead. Pick the floor so
// that tol * denom_floor comfortably exceeds that FD noise; the default suits
// single-op checks whose loss keeps all gradients well scaled.
//
// Run with S = double for tight tolerances; the S = float instantiation exists
// but its central differences carry f32 rounding noise.
template <class S, class Fn>
double finite_diff_check(Fn&& scalar_fn, const std::vector<Tensor<S>>& params, double eps,
                         double denom_floor = 1e-8) {
    if (!(eps > 0.0) || eps > 1e-2) throw InputError("finite_diff_check: eps must be in (0, 1e-2]");
    if (!(denom_floor > 0.0)) throw InputError("finite_diff_check: denom_floor must be positive");

    auto eval = [&](const std::vector<Tensor<S>>& values, bool with_grad,
                    std::vector<GradientMap<S>>* gm_out, std::vector<Tensor<S>>* bound_out) -> double {
        Tape<S> tape;
        std::vector<Tensor<S>> bound;
        bound.reserve(values.size());
        for (const auto& p : values) bound.push_back(tape.leaf(p.with_requires_grad(with_grad)));
        Tensor<S> loss = scalar_fn(tape, bound);
        if (loss.numel() != 1)
            throw ContractViolation("finite_diff_check: scalar_fn returned non-scalar of shape " + shape_str(loss.shape()));
        const double value = double(loss.item());
        if (with_grad) {
            gm_out->push_back(tape.backward(loss));
            *bound_out = std::move(bound);
        }
        return value;
    };

    std::vector<GradientMap<S>> gm;
    std::vector<Tensor<S>> bound;
    eval(params, true, &gm, &bound);

    double max_rel = 0.0;
    std::vector<Tensor<S>> work = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor<S>* analytic = gm[0].lookup(bound[p]);
        auto base = params[p].data();
        for (std::int64_t i = 0; i < params[p].numel(); ++i) {
            std::vector<S> plus(base.begin(), base.end());
            std::vector<S> minus(base.begin(), base.end());
            plus[std::size_t(i)] = S(double(plus[std::size_t(i)]) + eps);
            minus[std::size_t(i)] = S(double(minus[std::size_t(i)]) - eps);
            work[p] = Tensor<S>(params[p].shape(), std::move(plus));
            const double f_plus = eval(work, false, nullptr, nullptr);
            work[p] = Tensor<S>(params[p].shape(), std::move(minus));
            const double f_minus = eval(work, false, nullptr, nullptr);
            const double numeric = (f_plus - f_minus) / (2.0 * eps);
            const double a = analytic ? double(analytic->at(i)) : 0.0;
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), denom_floor});
            max_rel = std::max(max_rel, rel);
        }
        work[p] = params[p];
    }
    return max_rel;
}

} // namespace vseg
