#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/objective.hpp"
#include "vseg/random.hpp"
#include "vseg/tape.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

// Named parameter collection. Insertion order is the serialization order, so
// iteration is deterministic. access_count is bumped every time the set is
// bound onto a tape; evaluation-path tests assert on it.
template <class S>
struct ParamSet {
    std::vector<std::pair<std::string, Tensor<S>>> items;
    std::uint64_t rng_seed = 0;
    mutable std::uint64_t access_count = 0;

    void add(const std::string& name, Tensor<S> t) {
        if (has(name)) throw ContractViolation("ParamSet: duplicate name " + name);
        items.emplace_back(name, t.with_requires_grad(true));
    }

    bool has(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return true;
        return false;
    }

    const Tensor<S>& get(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return t;
        throw ContractViolation("ParamSet: no parameter named " + name);
    }

    void set(const std::string& name, Tensor<S> t) {
        for (auto& [n, old] : items)
            if (n == name) {
                if (old.shape() != t.shape())
                    throw ShapeError("ParamSet: cannot replace " + name + " " + shape_str(old.shape()) +
                                     " with " + shape_str(t.shape()));
                old = t.with_requires_grad(true);
                return;
            }
        throw ContractViolation("ParamSet: no parameter named " + name);
    }

    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : items) n += t.numel();
        return n;
    }

    void touch() const { ++access_count; }
};

using ParamSet32 = ParamSet<float>;

// Registers every parameter as a grad leaf on the tape. This is the single
// point where a parameter set enters a forward pass.
template <class S>
ParamSet<S> bind(Tape<S>& tape, const ParamSet<S>& ps) {
    ps.touch();
    ParamSet<S> out;
    out.rng_seed = ps.rng_seed;
    out.items.reserve(ps.items.size());
    for (const auto& [name, t] : ps.items) out.items.emplace_back(name, tape.leaf(t));
    return out;
}

// Inference-time variant: parameters enter as constants, so backward never
// materializes gradients for them. Still counts as an access.
template <class S>
ParamSet<S> bind_frozen(Tape<S>& tape, const ParamSet<S>& ps) {
    ps.touch();
    ParamSet<S> out;
    out.rng_seed = ps.rng_seed;
    out.items.reserve(ps.items.size());
    for (const auto& [name, t] : ps.items) out.items.emplace_back(name, tape.constant(t));
    return out;
}

struct ArchConfig {
    int height = 64;
    int width = 64;
    int base_width = 16;  // channel width of the first U-Net level
    int latent_dim = 6;
    double dropout_rate = 0.0; // > 0 only for the MC-dropout baseline net

    void validate() const {
        if (height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0)
            throw ConfigError("arch: height/width must be >= 8 and divisible by 8, got " +
                              std::to_string(height) + "x" + std::to_string(width));
        if (base_width < 1) throw ConfigError("arch: base_width must be >= 1");
        if (latent_dim < 1) throw ConfigError("arch: latent_dim must be >= 1");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("arch: dropout_rate must be in [0,1)");
    }

    bool operator==(const ArchConfig&) const = default;
};

// Enc / Dec / Seg of the variational framework, as three disjoint ParamSets.
template <class S>
struct ModelTriple {
    ArchConfig arch;
    ParamSet<S> encoder;
    ParamSet<S> decoder;
    ParamSet<S> segnet;
};

using ModelTriple32 = ModelTriple<float>;

// Mask tensors injected by the caller for dropout; nullptr rng disables it.
struct DropoutCtx {
    double rate = 0.0;
    RandomGen* rng = nullptr;

    bool active() const { return rate > 0.0 && rng != nullptr; }
};

namespace detail {

template <class S>
void add_conv(ParamSet<S>& ps, RandomGen& rng, const std::string& name, int cout, int cin, int k) {
    std::vector<S> w(std::size_t(cout) * cin * k * k);
    const double stddev = std::sqrt(2.0 / double(cin * k * k)); // fan-in scaling for relu trunks
    rng.fill_normal(std::span<S>(w), stddev);
    ps.add(name + ".w", Tensor<S>({cout, cin, k, k}, std::move(w)));
    ps.add(name + ".b", Tensor<S>::zeros({cout}));
}

template <class S>
void add_linear(ParamSet<S>& ps, RandomGen& rng, const std::string& name, int in, int out, bool zero_init) {
    std::vector<S> w(std::size_t(in) * out, S(0));
    if (!zero_init) rng.fill_normal(std::span<S>(w), std::sqrt(2.0 / double(in)));
    ps.add(name + ".w", Tensor<S>({in, out}, std::move(w)));
    ps.add(name + ".b", Tensor<S>::zeros({out}));
}

// y = conv(x) + bias, optional relu
template <class S>
Tensor<S> conv_layer(Tape<S>& tape, const ParamSet<S>& bp, const std::string& name, const Tensor<S>& x,
                     int stride, int pad, bool with_relu) {
    Tensor<S> y = tape.conv2d(x, bp.get(name + ".w"), stride, pad);
    const Tensor<S>& b = bp.get(name + ".b");
    Tensor<S> b3 = tape.reshape(b, {int(b.numel()), 1, 1});
    y = tape.add(y, tape.broadcast_to(b3, y.shape()));
    return with_relu ? tape.relu(y) : y;
}

// y = x W + b for a row vector x [1,in]
template <class S>
Tensor<S> linear_layer(Tape<S>& tape, const ParamSet<S>& bp, const std::string& name, const Tensor<S>& x_row) {
    Tensor<S> y = tape.matmul(x_row, bp.get(name + ".w"));
    const Tensor<S>& b = bp.get(name + ".b");
    return tape.add(y, tape.reshape(b, {1, int(b.numel())}));
}

template <class S>
Tensor<S> maybe_dropout(Tape<S>& tape, const Tensor<S>& x, const DropoutCtx& ctx) {
    if (!ctx.active()) return x;
    const double keep = 1.0 - ctx.rate;
    std::vector<S> mask(std::size_t(x.numel()));
    for (auto& m : mask) m = ctx.rng->bernoulli(keep) ? S(1.0 / keep) : S(0);
    return tape.mul(x, tape.constant(Tensor<S>(x.shape(), std::move(mask))));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

// Segmentation U-Net parameters; z_channels = 0 builds the deterministic
// baseline variant that takes only the image.
template <class S>
ParamSet<S> init_segnet_params(const ArchConfig& arch, int z_channels, std::uint64_t seed) {
    arch.validate();
    const int w = arch.base_width;
    const int cin = 1 + z_channels;
    ParamSet<S> ps;
    ps.rng_seed = seed;
    RandomGen rng(seed);
    detail::add_conv(ps, rng, "e0a", w, cin, 3);
    detail::add_conv(ps, rng, "e0b", w, w, 3);
    detail::add_conv(ps, rng, "d1a", 2 * w, w, 3);
    detail::add_conv(ps, rng, "d1b", 2 * w, 2 * w, 3);
    detail::add_conv(ps, rng, "d2a", 4 * w, 2 * w, 3);
    detail::add_conv(ps, rng, "d2b", 4 * w, 4 * w, 3);
    detail::add_conv(ps, rng, "u1a", 2 * w, 4 * w, 3);
    detail::add_conv(ps, rng, "u1b", 2 * w, 4 * w, 3);
    detail::add_conv(ps, rng, "u2a", w, 2 * w, 3);
    detail::add_conv(ps, rng, "u2b", w, 2 * w, 3);
    detail::add_conv(ps, rng, "head", 1, w, 1);
    return ps;
}

template <class S>
ParamSet<S> init_encoder_params(const ArchConfig& arch, std::uint64_t seed) {
    arch.validate();
    const int w = arch.base_width;
    ParamSet<S> ps;
    ps.rng_seed = seed;
    RandomGen rng(seed);
    detail::add_conv(ps, rng, "c0", w, 2, 3);
    detail::add_conv(ps, rng, "c1", 2 * w, w, 3);
    detail::add_conv(ps, rng, "c2", 4 * w, 2 * w, 3);
    detail::add_conv(ps, rng, "c3", 4 * w, 4 * w, 3);
    const int flat = 4 * w * (arch.height / 8) * (arch.width / 8);
    // mu / log sigma heads start at zero: the initial posterior is the prior
    detail::add_linear(ps, rng, "head", flat, 2 * arch.latent_dim, /*zero_init=*/true);
    return ps;
}

template <class S>
ParamSet<S> init_decoder_params(const ArchConfig& arch, std::uint64_t seed) {
    arch.validate();
    const int w = arch.base_width;
    ParamSet<S> ps;
    ps.rng_seed = seed;
    RandomGen rng(seed);
    const int flat = 4 * w * (arch.height / 8) * (arch.width / 8);
    detail::add_linear(ps, rng, "fc", arch.latent_dim, flat, /*zero_init=*/false);
    detail::add_conv(ps, rng, "u1", 2 * w, 4 * w, 3);
    detail::add_conv(ps, rng, "u2", w, 2 * w, 3);
    detail::add_conv(ps, rng, "u3", w, w, 3);
    detail::add_conv(ps, rng, "out", 1, w, 1);
    return ps;
}

// Deterministic model construction: same (config, seed) => bitwise-identical
// parameters across runs.
template <class S>
ModelTriple<S> init_params(const ArchConfig& arch, std::uint64_t seed) {
    arch.validate();
    ModelTriple<S> m;
    m.arch = arch;
    m.encoder = init_encoder_params<S>(arch, mix_seed(seed, 1));
    m.decoder = init_decoder_params<S>(arch, mix_seed(seed, 2));
    m.segnet = init_segnet_params<S>(arch, arch.latent_dim, mix_seed(seed, 3));
    return m;
}

// ---------------------------------------------------------------------------
// Forward passes (all take a bound ParamSet, see bind())
// ---------------------------------------------------------------------------

// q(z|x,s): x and s enter as a 2-channel image; three stride-2 conv stages,
// then a zero-initialized affine head emitting (mu, log sigma).
template <class S>
LatentPosterior<S> encoder_forward(Tape<S>& tape, const ParamSet<S>& bp, const ArchConfig& arch,
                                   const Tensor<S>& x, const Tensor<S>& s) {
    if (x.shape() != s.shape())
        throw InputError("encoder_forward: x " + shape_str(x.shape()) + " and s " + shape_str(s.shape()) + " must match");
    if (x.ndim() != 3 || x.shape()[0] != 1 || x.shape()[1] != arch.height || x.shape()[2] != arch.width)
        throw InputError("encoder_forward: expected [1," + std::to_string(arch.height) + "," +
                         std::to_string(arch.width) + "], got " + shape_str(x.shape()));
    Tensor<S> h = tape.concat(x, s, 0);
    h = detail::conv_layer(tape, bp, "c0", h, 1, 1, true);
    h = detail::conv_layer(tape, bp, "c1", h, 2, 1, true);
    h = detail::conv_layer(tape, bp, "c2", h, 2, 1, true);
    h = detail::conv_layer(tape, bp, "c3", h, 2, 1, true);
    Tensor<S> flat = tape.reshape(h, {1, int(h.numel())});
    Tensor<S> head = detail::linear_layer(tape, bp, "head", flat);
    Tensor<S> vec = tape.reshape(head, {2 * arch.latent_dim});
    LatentPosterior<S> post;
    post.mu = tape.slice(vec, 0, 0, arch.latent_dim);
    post.log_sigma = tape.slice(vec, 0, arch.latent_dim, arch.latent_dim);
    return post;
}

// p(x|z): affine lift of z to the coarsest grid, then three upsample+conv
// stages and a sigmoid output in [0,1].
template <class S>
Tensor<S> decoder_forward(Tape<S>& tape, const ParamSet<S>& bp, const ArchConfig& arch, const Tensor<S>& z) {
    if (z.numel() != arch.latent_dim)
        throw InputError("decoder_forward: z length " + std::to_string(z.numel()) + " != latent_dim " +
                         std::to_string(arch.latent_dim));
    const int w = arch.base_width, h8 = arch.height / 8, w8 = arch.width / 8;
    Tensor<S> row = tape.reshape(z, {1, arch.latent_dim});
    Tensor<S> h = tape.relu(detail::linear_layer(tape, bp, "fc", row));
    h = tape.reshape(h, {4 * w, h8, w8});
    h = detail::conv_layer(tape, bp, "u1", tape.upsample2x(h), 1, 1, true);
    h = detail::conv_layer(tape, bp, "u2", tape.upsample2x(h), 1, 1, true);
    h = detail::conv_layer(tape, bp, "u3", tape.upsample2x(h), 1, 1, true);
    return tape.sigmoid(detail::conv_layer(tape, bp, "out", h, 1, 0, false));
}

// p(s|x,z): z is tiled to a spatial map and concatenated with x at the input
// of a 2-down/2-up U-Net with skip connections. z_channels = 0 gives the
// baseline image-only net; ctx enables dropout after the deeper trunk convs.
template <class S>
Tensor<S> segnet_forward(Tape<S>& tape, const ParamSet<S>& bp, const ArchConfig& arch, const Tensor<S>& x,
                         const Tensor<S>* z = nullptr, const DropoutCtx& ctx = {}) {
    if (x.ndim() != 3 || x.shape()[0] != 1 || x.shape()[1] != arch.height || x.shape()[2] != arch.width)
        throw InputError("segnet_forward: expected [1," + std::to_string(arch.height) + "," +
                         std::to_string(arch.width) + "], got " + shape_str(x.shape()));
    Tensor<S> in = x;
    if (z) {
        if (z->numel() != arch.latent_dim)
            throw InputError("segnet_forward: z length " + std::to_string(z->numel()) + " != latent_dim " +
                             std::to_string(arch.latent_dim));
        Tensor<S> zmap = tape.broadcast_to(tape.reshape(*z, {arch.latent_dim, 1, 1}),
                                           {arch.latent_dim, arch.height, arch.width});
        in = tape.concat(x, zmap, 0);
    }
    Tensor<S> f0 = detail::conv_layer(tape, bp, "e0a", in, 1, 1, true);
    f0 = detail::conv_layer(tape, bp, "e0b", f0, 1, 1, true);
    Tensor<S> f1 = detail::conv_layer(tape, bp, "d1a", f0, 2, 1, true);
    f1 = detail::conv_layer(tape, bp, "d1b", f1, 1, 1, true);
    f1 = detail::maybe_dropout(tape, f1, ctx);
    Tensor<S> f2 = detail::conv_layer(tape, bp, "d2a", f1, 2, 1, true);
    f2 = detail::conv_layer(tape, bp, "d2b", f2, 1, 1, true);
    f2 = detail::maybe_dropout(tape, f2, ctx);
    Tensor<S> u1 = detail::conv_layer(tape, bp, "u1a", tape.upsample2x(f2), 1, 1, true);
    u1 = detail::conv_layer(tape, bp, "u1b", tape.concat(u1, f1, 0), 1, 1, true);
    u1 = detail::maybe_dropout(tape, u1, ctx);
    Tensor<S> u2 = detail::conv_layer(tape, bp, "u2a", tape.upsample2x(u1), 1, 1, true);
    u2 = detail::conv_layer(tape, bp, "u2b", tape.concat(u2, f0, 0), 1, 1, true);
    return detail::conv_layer(tape, bp, "head", u2, 1, 0, false);
}

// Image-only variant (baselines): no latent input, optional dropout.
template <class S>
Tensor<S> segnet_forward(Tape<S>& tape, const ParamSet<S>& bp, const ArchConfig& arch, const Tensor<S>& x,
                         const DropoutCtx& ctx) {
    return segnet_forward<S>(tape, bp, arch, x, nullptr, ctx);
}

} // namespace vseg
