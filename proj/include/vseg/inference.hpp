#pragma once
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/networks.hpp"
#include "vseg/random.hpp"
#include "vseg/synthetic.hpp"
#include "vseg/tape.hpp"

namespace vseg {

// Pixelwise average of M sampled soft segmentations.
struct ConfidenceMap {
    Tensor32 values; // [1,H,W] in [0,1]
    int m = 0;

    void validate() const {
        if (m < 1) throw InputError("confidence map: M must be >= 1");
        for (float v : values.data())
            if (!(v >= 0.0f && v <= 1.0f))
                throw InputError("confidence map: value " + std::to_string(v) + " outside [0,1]");
    }
};

// Pixelwise population variance over a stack of maps; at most 0.25 when the
// sources are binary.
struct DisagreementMap {
    Tensor32 values;
};

namespace detail {

inline void require_finite_params(const ParamSet32& ps, const char* what) {
    for (const auto& [name, t] : ps.items)
        if (has_nonfinite(t))
            throw NumericError(std::string(what) + " parameter " + name + " is non-finite; refusing to run inference");
}

inline void require_soft_map(const Tensor32& t, const char* what) {
    for (float v : t.data())
        if (!(v >= 0.0f && v <= 1.0f))
            throw InputError(std::string(what) + ": value " + std::to_string(v) + " outside [0,1]");
}

} // namespace detail

// Test-time prediction: z is drawn from the standard-normal prior and ONLY
// the segmentation net runs — the encoder/decoder pair exists to shape the
// latent space during training and is not consulted here.
inline std::vector<Tensor32> sample_segmentations(const ParamSet32& segnet, const ArchConfig& arch, const Tensor32& x,
                                                  int m_samples, std::uint64_t seed) {
    if (m_samples < 1) throw InputError("sample_segmentations: M must be >= 1");
    arch.validate();
    detail::require_finite_params(segnet, "segnet");
    RandomGen rng(mix_seed(seed, 0x7a73));
    std::vector<Tensor32> maps;
    maps.reserve(std::size_t(m_samples));
    for (int m = 0; m < m_samples; ++m) {
        std::vector<float> zv(std::size_t(arch.latent_dim));
        rng.fill_normal(std::span<float>(zv));
        Tape32 tape;
        const auto bs = bind_frozen(tape, segnet);
        const Tensor32 z = tape.constant(Tensor32({arch.latent_dim}, std::move(zv)));
        const Tensor32 logits = segnet_forward(tape, bs, arch, tape.constant(x), &z);
        maps.push_back(tape.sigmoid(logits));
    }
    return maps;
}

// Stochastic forward passes of the MC-dropout baseline (dropout stays on).
inline std::vector<Tensor32> sample_dropout_predictions(const ParamSet32& net, const ArchConfig& arch,
                                                        double dropout_rate, const Tensor32& x, int m_samples,
                                                        std::uint64_t seed) {
    if (m_samples < 1) throw InputError("sample_dropout_predictions: M must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw InputError("sample_dropout_predictions: dropout_rate must be in [0,1)");
    arch.validate();
    detail::require_finite_params(net, "dropout net");
    RandomGen rng(mix_seed(seed, 0x6472));
    DropoutCtx ctx{dropout_rate, &rng};
    std::vector<Tensor32> maps;
    maps.reserve(std::size_t(m_samples));
    for (int m = 0; m < m_samples; ++m) {
        Tape32 tape;
        const auto bn = bind_frozen(tape, net);
        const Tensor32 logits = segnet_forward(tape, bn, arch, tape.constant(x), ctx);
        maps.push_back(tape.sigmoid(logits));
    }
    return maps;
}

inline ConfidenceMap confidence_map(const std::vector<Tensor32>& maps) {
    if (maps.empty()) throw InputError("confidence_map: empty prediction list");
    for (const auto& m : maps)
        if (m.shape() != maps[0].shape())
            throw ShapeError("confidence_map: inconsistent shapes " + shape_str(maps[0].shape()) + " vs " +
                             shape_str(m.shape()));
    std::vector<double> acc(std::size_t(maps[0].numel()), 0.0);
    for (const auto& m : maps) {
        auto d = m.data();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += double(d[i]);
    }
    std::vector<float> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = float(acc[i] / double(maps.size()));
    return ConfidenceMap{Tensor32(maps[0].shape(), std::move(out)), int(maps.size())};
}

// Soft overlap 2·Σab / (Σa + Σb); both maps empty counts as perfect
// agreement (1). Equals classical Dice on binary inputs.
inline double continuous_dice(const Tensor32& a, const Tensor32& b) {
    if (a.shape() != b.shape())
        throw ShapeError("continuous_dice: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    detail::require_soft_map(a, "continuous_dice");
    detail::require_soft_map(b, "continuous_dice");
    auto da = a.data(), db = b.data();
    double inter = 0.0, mass = 0.0;
    for (std::size_t i = 0; i < da.size(); ++i) {
        inter += double(da[i]) * double(db[i]);
        mass += double(da[i]) + double(db[i]);
    }
    return mass == 0.0 ? 1.0 : 2.0 * inter / mass;
}

inline DisagreementMap disagreement_map(const std::vector<Tensor32>& maps) {
    if (maps.size() < 2) throw InputError("disagreement_map: need at least 2 maps, got " + std::to_string(maps.size()));
    for (const auto& m : maps)
        if (m.shape() != maps[0].shape())
            throw ShapeError("disagreement_map: inconsistent shapes " + shape_str(maps[0].shape()) + " vs " +
                             shape_str(m.shape()));
    const std::size_t n = std::size_t(maps[0].numel());
    std::vector<double> mean(n, 0.0), sq(n, 0.0);
    for (const auto& m : maps) {
        auto d = m.data();
        for (std::size_t i = 0; i < n; ++i) {
            mean[i] += double(d[i]);
            sq[i] += double(d[i]) * double(d[i]);
        }
    }
    std::vector<float> out(n);
    const double inv = 1.0 / double(maps.size());
    for (std::size_t i = 0; i < n; ++i) {
        const double mu = mean[i] * inv;
        out[i] = float(std::max(0.0, sq[i] * inv - mu * mu));
    }
    return DisagreementMap{Tensor32(maps[0].shape(), std::move(out))};
}

// Mean of the K rater masks — the reference "average of manual labels".
inline Tensor32 rater_average(const AnnotatedSample& sample) {
    return confidence_map(sample.masks).values;
}

inline double pearson_correlation(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw InputError("pearson_correlation: need two equal-length series of length >= 2");
    const double n = double(x.size());
    double sx = 0, sy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
    }
    const double mx = sx / n, my = sy / n;
    double cov = 0, vx = 0, vy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        cov += (x[i] - mx) * (y[i] - my);
        vx += (x[i] - mx) * (x[i] - mx);
        vy += (y[i] - my) * (y[i] - my);
    }
    if (vx == 0.0 || vy == 0.0) throw InputError("pearson_correlation: a series is constant");
    return cov / std::sqrt(vx * vy);
}

struct EvalResult {
    std::vector<std::pair<std::string, double>> per_sample; // (sample_id, dice)
    double mean_dice = 0.0;
    double std_dice = 0.0; // population std over samples

    std::string summary() const {
        char buf[96];
        std::snprintf(buf, sizeof buf, "mean_dice=%.6f std=%.6f", mean_dice, std_dice);
        return buf;
    }

    std::string table() const {
        std::string out = "sample_id\tdice\n";
        char buf[96];
        for (const auto& [id, d] : per_sample) {
            std::snprintf(buf, sizeof buf, "%s\t%.6f\n", id.c_str(), d);
            out += buf;
        }
        return out;
    }
};

namespace detail {

template <class PredictFn>
EvalResult evaluate_with(const std::vector<AnnotatedSample>& split, PredictFn&& predict) {
    if (split.empty()) throw InputError("evaluate: split is empty");
    EvalResult r;
    r.per_sample.reserve(split.size());
    double sum = 0, sumsq = 0;
    for (std::size_t i = 0; i < split.size(); ++i) {
        const ConfidenceMap conf = predict(split[i], i);
        conf.validate();
        const double d = continuous_dice(conf.values, rater_average(split[i]));
        r.per_sample.emplace_back(split[i].sample_id, d);
        sum += d;
        sumsq += d * d;
    }
    const double n = double(split.size());
    r.mean_dice = sum / n;
    r.std_dice = std::sqrt(std::max(0.0, sumsq / n - r.mean_dice * r.mean_dice));
    return r;
}

} // namespace detail

// Scores a trained triple on a split: per sample, M prior draws through the
// segnet are averaged into a confidence map and compared to the rater
// average. Touches only segnet parameters.
inline EvalResult evaluate_joint(const ModelTriple32& model, const std::vector<AnnotatedSample>& split, int m_samples,
                                 std::uint64_t seed) {
    return detail::evaluate_with(split, [&](const AnnotatedSample& s, std::size_t i) {
        return confidence_map(
            sample_segmentations(model.segnet, model.arch, s.image, m_samples, mix_seed(seed, 0xe000 + i)));
    });
}

// Independent-baseline scoring: each of the K nets predicts once,
// deterministically; the K sigmoid outputs are averaged.
inline EvalResult evaluate_independent(const std::vector<ParamSet32>& nets, const ArchConfig& arch,
                                       const std::vector<AnnotatedSample>& split) {
    if (nets.empty()) throw InputError("evaluate_independent: no models");
    for (const auto& n : nets) detail::require_finite_params(n, "baseline net");
    return detail::evaluate_with(split, [&](const AnnotatedSample& s, std::size_t) {
        std::vector<Tensor32> preds;
        preds.reserve(nets.size());
        for (const auto& net : nets) {
            Tape32 tape;
            const auto bn = bind_frozen(tape, net);
            preds.push_back(tape.sigmoid(segnet_forward(tape, bn, arch, tape.constant(s.image))));
        }
        return confidence_map(preds);
    });
}

// MC-dropout scoring: M stochastic passes with dropout left on.
inline EvalResult evaluate_dropout(const ParamSet32& net, const ArchConfig& arch, double dropout_rate,
                                   const std::vector<AnnotatedSample>& split, int m_samples, std::uint64_t seed) {
    return detail::evaluate_with(split, [&](const AnnotatedSample& s, std::size_t i) {
        return confidence_map(
            sample_dropout_predictions(net, arch, dropout_rate, s.image, m_samples, mix_seed(seed, 0xe000 + i)));
    });
}

} // namespace vseg
