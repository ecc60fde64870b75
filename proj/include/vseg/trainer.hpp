#pragma once
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/networks.hpp"
#include "vseg/objective.hpp"
#include "vseg/optimizer.hpp"
#include "vseg/random.hpp"
#include "vseg/synthetic.hpp"
#include "vseg/tape.hpp"

namespace vseg {

struct TrainConfig {
    int epochs = 200;
    int batch_size = 4;
    std::uint64_t seed = 0;
    LossWeights weights{};
    double lr = 1e-3;
    double dropout_rate = 0.5; // used by the MC-dropout baseline only
    int m_train_samples = 1;   // latent draws per training step

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
        if (m_train_samples < 1) throw ConfigError("train: m_train_samples must be >= 1");
        weights.validate();
    }
};

struct EpochMetrics {
    int epoch;
    double ce, rec, kl, total;
};

inline std::string metrics_csv(const std::vector<EpochMetrics>& log) {
    std::string out = "epoch,ce,rec,kl,total\n";
    char buf[160];
    for (const auto& m : log) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g\n", m.epoch, m.ce, m.rec, m.kl, m.total);
        out += buf;
    }
    return out;
}

namespace detail {

inline std::vector<std::size_t> shuffled_indices(RandomGen& rng, std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = std::size_t(rng.uniform_int(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

inline void check_terms_finite(const LossTerms<float>& lt, int epoch) {
    struct { const char* name; double v; } terms[] = {
        {"ce", lt.seg_ce_value()}, {"rec", lt.recon_value()}, {"kl", lt.kl_value()}, {"total", lt.total_value()}};
    for (const auto& t : terms)
        if (!std::isfinite(t.v))
            throw NumericError("loss term '" + std::string(t.name) + "' is non-finite at epoch " +
                               std::to_string(epoch));
}

inline void check_params_finite(const ParamSet32& ps, const char* set, int epoch) {
    for (const auto& [name, t] : ps.items)
        if (has_nonfinite(t))
            throw NumericError("parameter " + std::string(set) + "/" + name + " became non-finite at epoch " +
                               std::to_string(epoch));
}

inline Tensor32 batch_mean(Tape32& tape, const std::vector<Tensor32>& totals) {
    Tensor32 acc = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i) acc = tape.add(acc, totals[i]);
    return tape.mul(acc, tape.constant_scalar(float(1.0 / double(totals.size()))));
}

inline Tensor32 draw_epsilon(RandomGen& rng, int n) {
    std::vector<float> e(static_cast<std::size_t>(n));
    rng.fill_normal(std::span<float>(e));
    return Tensor32({n}, std::move(e));
}

} // namespace detail

// ELBO training of the Enc/Dec/Seg triple. Each step draws a rater per
// sample, encodes (x, s_k), reparameterizes with fresh noise, and descends
// the weighted total loss. The metric log reports per-epoch means of the
// unweighted terms and the optimized total.
inline std::vector<EpochMetrics> train_joint(ModelTriple32& model, const std::vector<AnnotatedSample>& data,
                                             const TrainConfig& cfg) {
    cfg.validate();
    model.arch.validate();
    if (data.empty()) throw InputError("train_joint: dataset is empty");
    for (const auto& s : data)
        if (s.masks.empty()) throw InputError("train_joint: sample " + s.sample_id + " has no masks");

    auto st_enc = OptimState32::for_params(model.encoder, cfg.lr);
    auto st_dec = OptimState32::for_params(model.decoder, cfg.lr);
    auto st_seg = OptimState32::for_params(model.segnet, cfg.lr);
    RandomGen rng(mix_seed(cfg.seed, 0x74726e)); // drives order, rater choice, latent noise

    std::vector<EpochMetrics> log;
    log.reserve(std::size_t(cfg.epochs));
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto order = detail::shuffled_indices(rng, data.size());
        double ce = 0, rec = 0, kl = 0, tot = 0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_size)) {
            Tape32 tape;
            const auto be = bind(tape, model.encoder);
            const auto bd = bind(tape, model.decoder);
            const auto bs = bind(tape, model.segnet);
            std::vector<Tensor32> totals;
            const std::size_t end = std::min(order.size(), start + std::size_t(cfg.batch_size));
            for (std::size_t i = start; i < end; ++i) {
                const AnnotatedSample& sample = data[order[i]];
                const std::size_t k = std::size_t(rng.uniform_int(sample.masks.size()));
                const Tensor32 x = tape.constant(sample.image);
                const Tensor32 s = tape.constant(sample.masks[k]);
                const LatentPosterior<float> post = encoder_forward(tape, be, model.arch, x, s);
                std::vector<Tensor32> draws;
                double ce_i = 0, rec_i = 0, kl_i = 0, tot_i = 0;
                for (int m = 0; m < cfg.m_train_samples; ++m) {
                    const auto lat = reparameterize(tape, post, detail::draw_epsilon(rng, model.arch.latent_dim));
                    const Tensor32 x_hat = decoder_forward(tape, bd, model.arch, lat.z);
                    const Tensor32 logits = segnet_forward(tape, bs, model.arch, x, &lat.z);
                    const LossTerms<float> lt = total_loss(tape, logits, s, x, x_hat, post, cfg.weights);
                    detail::check_terms_finite(lt, epoch);
                    draws.push_back(lt.total);
                    ce_i += lt.seg_ce_value();
                    rec_i += lt.recon_value();
                    kl_i += lt.kl_value();
                    tot_i += lt.total_value();
                }
                totals.push_back(cfg.m_train_samples == 1 ? draws[0] : detail::batch_mean(tape, draws));
                const double inv = 1.0 / cfg.m_train_samples;
                ce += ce_i * inv;
                rec += rec_i * inv;
                kl += kl_i * inv;
                tot += tot_i * inv;
            }
            const auto grads = tape.backward(detail::batch_mean(tape, totals));
            adam_step(model.encoder, be, grads, st_enc);
            adam_step(model.decoder, bd, grads, st_dec);
            adam_step(model.segnet, bs, grads, st_seg);
        }
        detail::check_params_finite(model.encoder, "encoder", epoch);
        detail::check_params_finite(model.decoder, "decoder", epoch);
        detail::check_params_finite(model.segnet, "segnet", epoch);
        const double n = double(data.size());
        log.push_back({epoch, ce / n, rec / n, kl / n, tot / n});
    }
    return log;
}

namespace detail {

// Shared plain-CE loop for both baselines. pick_rater chooses the target
// mask per (step, sample); ctx enables dropout.
inline std::vector<EpochMetrics> train_segnet_ce(ParamSet32& net, const ArchConfig& arch,
                                                 const std::vector<AnnotatedSample>& data, const TrainConfig& cfg,
                                                 RandomGen& rng, bool random_rater, std::size_t fixed_rater,
                                                 DropoutCtx* ctx) {
    auto st = OptimState32::for_params(net, cfg.lr);
    std::vector<EpochMetrics> log;
    log.reserve(std::size_t(cfg.epochs));
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto order = shuffled_indices(rng, data.size());
        double ce = 0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_size)) {
            Tape32 tape;
            const auto bn = bind(tape, net);
            std::vector<Tensor32> totals;
            const std::size_t end = std::min(order.size(), start + std::size_t(cfg.batch_size));
            for (std::size_t i = start; i < end; ++i) {
                const AnnotatedSample& sample = data[order[i]];
                const std::size_t k = random_rater ? std::size_t(rng.uniform_int(sample.masks.size())) : fixed_rater;
                const Tensor32 x = tape.constant(sample.image);
                const Tensor32 s = tape.constant(sample.masks[k]);
                const Tensor32 logits = segnet_forward(tape, bn, arch, x, ctx ? *ctx : DropoutCtx{});
                const Tensor32 loss = seg_ce_loss(tape, logits, s);
                const double v = double(loss.item());
                if (!std::isfinite(v))
                    throw NumericError("loss term 'ce' is non-finite at epoch " + std::to_string(epoch));
                totals.push_back(loss);
                ce += v;
            }
            adam_step(net, bn, tape.backward(batch_mean(tape, totals)), st);
        }
        check_params_finite(net, "net", epoch);
        const double mean_ce = ce / double(data.size());
        log.push_back({epoch, mean_ce, 0.0, 0.0, mean_ce});
    }
    return log;
}

} // namespace detail

struct TrainedIndependent {
    std::vector<ParamSet32> nets; // one per rater, in rater order
    std::vector<EpochMetrics> log; // ce averaged across the K nets
};

// One deterministic segmentation net per rater, each seeing only its own
// rater's masks.
inline TrainedIndependent train_independent_baseline(const std::vector<AnnotatedSample>& data, int k,
                                                     const TrainConfig& cfg, const ArchConfig& arch) {
    cfg.validate();
    arch.validate();
    if (k < 1) throw InputError("train_independent_baseline: K must be >= 1");
    if (data.empty()) throw InputError("train_independent_baseline: dataset is empty");
    for (const auto& s : data)
        if (int(s.masks.size()) < k)
            throw InputError("train_independent_baseline: sample " + s.sample_id + " has " +
                             std::to_string(s.masks.size()) + " masks, need " + std::to_string(k));
    TrainedIndependent out;
    out.nets.reserve(std::size_t(k));
    std::vector<std::vector<EpochMetrics>> logs;
    for (int i = 0; i < k; ++i) {
        ParamSet32 net = init_segnet_params<float>(arch, 0, mix_seed(cfg.seed, 0x6900 + std::uint64_t(i)));
        RandomGen rng(mix_seed(cfg.seed, 0x6a00 + std::uint64_t(i)));
        logs.push_back(detail::train_segnet_ce(net, arch, data, cfg, rng, false, std::size_t(i), nullptr));
        out.nets.push_back(std::move(net));
    }
    out.log.reserve(std::size_t(cfg.epochs));
    for (int e = 0; e < cfg.epochs; ++e) {
        double ce = 0;
        for (const auto& l : logs) ce += l[std::size_t(e)].ce;
        ce /= double(k);
        out.log.push_back({e + 1, ce, 0.0, 0.0, ce});
    }
    return out;
}

struct TrainedDropout {
    ParamSet32 net;
    std::vector<EpochMetrics> log;
};

// Single segmentation net with Bernoulli dropout active during training;
// each step pairs the image with a randomly drawn rater mask.
inline TrainedDropout train_mc_dropout_baseline(const std::vector<AnnotatedSample>& data, const TrainConfig& cfg,
                                                const ArchConfig& arch) {
    cfg.validate();
    arch.validate();
    if (!(cfg.dropout_rate > 0.0 && cfg.dropout_rate < 1.0))
        throw ConfigError("train_mc_dropout_baseline: dropout_rate must be in (0,1), got " +
                          std::to_string(cfg.dropout_rate));
    if (data.empty()) throw InputError("train_mc_dropout_baseline: dataset is empty");
    TrainedDropout out;
    out.net = init_segnet_params<float>(arch, 0, mix_seed(cfg.seed, 0x6b00));
    RandomGen rng(mix_seed(cfg.seed, 0x6c00));
    RandomGen drop_rng(mix_seed(cfg.seed, 0x6d00));
    DropoutCtx ctx{cfg.dropout_rate, &drop_rng};
    out.log = detail::train_segnet_ce(out.net, arch, data, cfg, rng, true, 0, &ctx);
    return out;
}

} // namespace vseg
