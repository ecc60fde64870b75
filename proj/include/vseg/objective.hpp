#pragma once
#include <cmath>
#include <string>

#include "vseg/errors.hpp"
#include "vseg/tape.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

// Variational posterior q(z|x,s) = N(mu, diag(sigma^2)), sigma = exp(log_sigma).
template <class S>
struct LatentPosterior {
    Tensor<S> mu;        // [N]
    Tensor<S> log_sigma; // [N]

    int dim() const { return int(mu.numel()); }
};

// One draw z = mu + sigma (.) epsilon, together with the noise that produced it.
template <class S>
struct LatentSample {
    Tensor<S> z;       // [N]
    Tensor<S> epsilon; // [N]
};

struct LossWeights {
    double lambda_seg = 1.0;
    double lambda_rec = 1.0;
    double lambda_kl = 1.0;

    void validate() const {
        for (double v : {lambda_seg, lambda_rec, lambda_kl})
            if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
    }
};

// z = mu + exp(log_sigma) (.) epsilon. The caller supplies epsilon so that all
// stochasticity stays outside the differentiable path.
template <class S>
LatentSample<S> reparameterize(Tape<S>& tape, const LatentPosterior<S>& post, const Tensor<S>& epsilon) {
    if (epsilon.numel() != post.mu.numel() || post.log_sigma.numel() != post.mu.numel())
        throw InputError("reparameterize: epsilon length " + std::to_string(epsilon.numel()) +
                         " does not match latent dim " + std::to_string(post.mu.numel()));
    Tensor<S> eps = tape.constant(epsilon.with_requires_grad(false));
    Tensor<S> sigma = tape.exp(post.log_sigma);
    Tensor<S> z = tape.add(post.mu, tape.mul(sigma, eps));
    return {z, eps};
}

// KL[q(z|x,s) || N(0,I)] = 1/2 sum_j (mu_j^2 + sigma_j^2 - log sigma_j^2 - 1).
// Non-negative; zero iff mu = 0, sigma = 1.
template <class S>
Tensor<S> kl_gaussian_standard(Tape<S>& tape, const LatentPosterior<S>& post) {
    const int n = post.dim();
    Tensor<S> two = tape.constant_full({n}, S(2));
    Tensor<S> one = tape.constant_full({n}, S(1));
    Tensor<S> mu2 = tape.mul(post.mu, post.mu);
    Tensor<S> two_log_sigma = tape.mul(post.log_sigma, two);
    Tensor<S> sigma2 = tape.exp(two_log_sigma);
    Tensor<S> terms = tape.sub(tape.sub(tape.add(mu2, sigma2), two_log_sigma), one);
    return tape.mul(tape.sum(terms), tape.constant_scalar(S(0.5)));
}

// Reconstruction loss 1/2 ||x - x_hat||_2^2 (sum over pixels).
template <class S>
Tensor<S> recon_loss(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& x_hat) {
    if (x.shape() != x_hat.shape())
        throw ShapeError("recon_loss: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(x_hat.shape()));
    Tensor<S> d = tape.sub(x, x_hat);
    return tape.mul(tape.sum(tape.mul(d, d)), tape.constant_scalar(S(0.5)));
}

template <class S>
void require_binary(const Tensor<S>& s, const char* where) {
    for (S v : s.data())
        if (v != S(0) && v != S(1)) throw InputError(std::string(where) + ": mask must be strictly binary");
}

// Mean per-pixel binary cross-entropy of sigmoid(logits) against a binary mask,
// in the numerically stable form softplus(l) - l*s.
template <class S>
Tensor<S> seg_ce_loss(Tape<S>& tape, const Tensor<S>& logits, const Tensor<S>& s) {
    if (logits.shape() != s.shape())
        throw ShapeError("seg_ce_loss: shape mismatch " + shape_str(logits.shape()) + " vs " + shape_str(s.shape()));
    require_binary(s, "seg_ce_loss");
    Tensor<S> per_pixel = tape.sub(tape.softplus(logits), tape.mul(logits, s));
    return tape.mean(per_pixel);
}

// One training step's loss terms, all living on the same tape.
template <class S>
struct LossTerms {
    Tensor<S> total;
    Tensor<S> seg_ce;
    Tensor<S> recon;
    Tensor<S> kl;

    double seg_ce_value() const { return double(seg_ce.item()); }
    double recon_value() const { return double(recon.item()); }
    double kl_value() const { return double(kl.item()); }
    double total_value() const { return double(total.item()); }
};

// total = l_seg * CE + l_rec * L_rec + l_kl * KL (the negative ELBO up to
// constants, with configurable term weights).
template <class S>
LossTerms<S> total_loss(Tape<S>& tape, const Tensor<S>& seg_logits, const Tensor<S>& s_target,
                        const Tensor<S>& x, const Tensor<S>& x_hat,
                        const LatentPosterior<S>& post, const LossWeights& w) {
    w.validate();
    LossTerms<S> lt;
    lt.seg_ce = seg_ce_loss(tape, seg_logits, s_target);
    lt.recon = recon_loss(tape, x, x_hat);
    lt.kl = kl_gaussian_standard(tape, post);
    Tensor<S> total = tape.mul(lt.seg_ce, tape.constant_scalar(S(w.lambda_seg)));
    total = tape.add(total, tape.mul(lt.recon, tape.constant_scalar(S(w.lambda_rec))));
    total = tape.add(total, tape.mul(lt.kl, tape.constant_scalar(S(w.lambda_kl))));
    lt.total = total;
    return lt;
}

} // namespace vseg
