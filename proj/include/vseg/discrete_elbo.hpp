#pragma once
#include <cmath>
#include <string>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/random.hpp"

namespace vseg {

// Exact finite-alphabet model: a joint table p(x,s,z) plus a variational table
// q(z|x,s). Everything the ELBO decomposition claims about log p(s|x) can be
// verified here by plain summation, with no sampling and no networks.
struct DiscreteJoint {
    int nx = 0, ns = 0, nz = 0;
    std::vector<double> p; // p(x,s,z), row-major (x,s,z), sums to 1
    std::vector<double> q; // q(z|x,s), row-major (x,s,z), each (x,s) row sums to 1

    std::size_t idx(int x, int s, int z) const { return (std::size_t(x) * ns + s) * nz + z; }

    void validate() const {
        if (nx < 1 || ns < 1 || nz < 1) throw InputError("DiscreteJoint: alphabet sizes must be positive");
        if (p.size() != std::size_t(nx) * ns * nz || q.size() != p.size())
            throw InputError("DiscreteJoint: table sizes do not match alphabets");
        double total = 0.0;
        for (double v : p) {
            if (v < 0.0) throw InputError("DiscreteJoint: negative probability in p");
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-9) throw InputError("DiscreteJoint: p does not sum to 1");
        for (int x = 0; x < nx; ++x)
            for (int s = 0; s < ns; ++s) {
                double row = 0.0;
                for (int z = 0; z < nz; ++z) {
                    const double v = q[idx(x, s, z)];
                    if (v < 0.0) throw InputError("DiscreteJoint: negative probability in q");
                    row += v;
                }
                if (std::abs(row - 1.0) > 1e-9) throw InputError("DiscreteJoint: q(.|x,s) does not sum to 1");
            }
    }

    // Strictly positive random instance (exponential draws, normalized).
    static DiscreteJoint random(RandomGen& rng, int nx, int ns, int nz) {
        DiscreteJoint dj;
        dj.nx = nx;
        dj.ns = ns;
        dj.nz = nz;
        dj.p.resize(std::size_t(nx) * ns * nz);
        dj.q.resize(dj.p.size());
        double total = 0.0;
        for (auto& v : dj.p) {
            v = -std::log(1.0 - rng.uniform()); // Exp(1), > 0
            total += v;
        }
        for (auto& v : dj.p) v /= total;
        for (int x = 0; x < nx; ++x)
            for (int s = 0; s < ns; ++s) {
                double row = 0.0;
                for (int z = 0; z < nz; ++z) {
                    double v = -std::log(1.0 - rng.uniform());
                    dj.q[dj.idx(x, s, z)] = v;
                    row += v;
                }
                for (int z = 0; z < nz; ++z) dj.q[dj.idx(x, s, z)] /= row;
            }
        return dj;
    }

    // Sets q(z|x,s) equal to the true posterior p(z|x,s) for every (x,s).
    void set_q_to_true_posterior() {
        for (int x = 0; x < nx; ++x)
            for (int s = 0; s < ns; ++s) {
                double pxs = 0.0;
                for (int z = 0; z < nz; ++z) pxs += p[idx(x, s, z)];
                if (pxs <= 0.0) throw InputError("DiscreteJoint: degenerate query, zero marginal p(x,s)");
                for (int z = 0; z < nz; ++z) q[idx(x, s, z)] = p[idx(x, s, z)] / pxs;
            }
    }
};

// Every term of the decomposition
//   log p(s|x) = KL[q||p(z|x,s)] - log p(x)
//                + E_q log p(s|x,z) + E_q log p(x|z) - KL[q||p(z)]
// evaluated by exact summation for one (x,s) query.
struct ElboDecomposition {
    double lhs = 0.0;              // log p(s|x)
    double kl_posterior = 0.0;     // KL[q(z|x,s) || p(z|x,s)]
    double neg_log_px = 0.0;       // -log p(x)
    double e_log_s_given_xz = 0.0; // E_q log p(s|x,z)
    double e_log_x_given_z = 0.0;  // E_q log p(x|z)
    double kl_prior = 0.0;         // KL[q(z|x,s) || p(z)]

    double elbo() const { return e_log_s_given_xz + e_log_x_given_z - kl_prior; }
    double remainder() const { return kl_posterior + neg_log_px; } // >= 0
    double residual() const { return lhs - (remainder() + elbo()); }
};

inline ElboDecomposition discrete_elbo_decomposition(const DiscreteJoint& dj, int x, int s) {
    if (x < 0 || x >= dj.nx || s < 0 || s >= dj.ns) throw InputError("discrete_elbo_decomposition: (x,s) out of range");

    std::vector<double> p_z(dj.nz, 0.0), p_xz(dj.nz, 0.0);
    double p_x = 0.0, p_xs = 0.0;
    for (int xi = 0; xi < dj.nx; ++xi)
        for (int si = 0; si < dj.ns; ++si)
            for (int zi = 0; zi < dj.nz; ++zi) {
                const double v = dj.p[dj.idx(xi, si, zi)];
                p_z[std::size_t(zi)] += v;
                if (xi == x) {
                    p_x += v;
                    p_xz[std::size_t(zi)] += v;
                    if (si == s) p_xs += v;
                }
            }
    if (p_xs <= 0.0 || p_x <= 0.0)
        throw InputError("discrete_elbo_decomposition: degenerate query, zero marginal for (x,s)");

    ElboDecomposition out;
    out.lhs = std::log(p_xs / p_x);
    out.neg_log_px = -std::log(p_x);
    for (int zi = 0; zi < dj.nz; ++zi) {
        const double qz = dj.q[dj.idx(x, s, zi)];
        if (qz == 0.0) continue; // 0 log 0 = 0 convention
        const double pxsz = dj.p[dj.idx(x, s, zi)];
        const double post = pxsz / p_xs;                    // p(z|x,s)
        const double s_given_xz = pxsz / p_xz[std::size_t(zi)]; // p(s|x,z)
        const double x_given_z = p_xz[std::size_t(zi)] / p_z[std::size_t(zi)]; // p(x|z)
        out.kl_posterior += qz * std::log(qz / post);
        out.kl_prior += qz * std::log(qz / p_z[std::size_t(zi)]);
        out.e_log_s_given_xz += qz * std::log(s_given_xz);
        out.e_log_x_given_z += qz * std::log(x_given_z);
    }
    return out;
}

// Max residual of the footnote Bayes identity p(z|x,s) p(s|x) = p(s|x,z) p(z|x)
// over all cells of the table.
inline double bayes_identity_residual(const DiscreteJoint& dj) {
    double worst = 0.0;
    std::vector<double> p_x(dj.nx, 0.0);
    std::vector<double> p_xs(std::size_t(dj.nx) * dj.ns, 0.0);
    std::vector<double> p_xz(std::size_t(dj.nx) * dj.nz, 0.0);
    for (int x = 0; x < dj.nx; ++x)
        for (int s = 0; s < dj.ns; ++s)
            for (int z = 0; z < dj.nz; ++z) {
                const double v = dj.p[dj.idx(x, s, z)];
                p_x[std::size_t(x)] += v;
                p_xs[std::size_t(x) * dj.ns + s] += v;
                p_xz[std::size_t(x) * dj.nz + z] += v;
            }
    for (int x = 0; x < dj.nx; ++x)
        for (int s = 0; s < dj.ns; ++s)
            for (int z = 0; z < dj.nz; ++z) {
                const double pxs = p_xs[std::size_t(x) * dj.ns + s];
                const double pxz = p_xz[std::size_t(x) * dj.nz + z];
                if (pxs <= 0.0 || pxz <= 0.0 || p_x[std::size_t(x)] <= 0.0) continue;
                const double joint = dj.p[dj.idx(x, s, z)];
                const double lhs = (joint / pxs) * (pxs / p_x[std::size_t(x)]);          // p(z|x,s) p(s|x)
                const double rhs = (joint / pxz) * (pxz / p_x[std::size_t(x)]);          // p(s|x,z) p(z|x)
                worst = std::max(worst, std::abs(lhs - rhs));
            }
    return worst;
}

} // namespace vseg
