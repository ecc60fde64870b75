#pragma once
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

// Differentiable op kinds. Every kind has a forward definition and an adjoint,
// and every kind is covered by the finite-difference property test.
enum class Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Sum,
    Mean,
    Concat,
    Slice,
    Broadcast,
    Reshape,
    Upsample2x,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::MatMul: return "matmul";
        case Op::Conv2d: return "conv2d";
        case Op::Relu: return "relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Softplus: return "softplus";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Broadcast: return "broadcast";
        case Op::Reshape: return "reshape";
        case Op::Upsample2x: return "upsample2x";
    }
    return "?";
}

// All kinds the generic forward_op dispatcher accepts.
inline constexpr std::array<Op, 17> kOpKinds = {
    Op::Add,    Op::Sub,  Op::Mul,  Op::MatMul,   Op::Conv2d, Op::Relu,
    Op::Sigmoid, Op::Exp, Op::Log,  Op::Softplus, Op::Sum,    Op::Mean,
    Op::Concat, Op::Slice, Op::Broadcast, Op::Reshape, Op::Upsample2x,
};

struct OpAttrs {
    int axis = 0;   // concat, slice
    int start = 0;  // slice
    int len = 0;    // slice
    int stride = 1; // conv2d
    int pad = 0;    // conv2d
    Shape target;   // broadcast, reshape
};

// node_id -> gradient, for one backward() call. Gradients exist only for
// tape nodes that both require grad and are reachable from the loss.
template <class S>
class GradientMap {
public:
    const Tensor<S>* find(const Tensor<S>& owner) const { return lookup(owner); }

    bool contains(const Tensor<S>& owner) const { return lookup(owner) != nullptr; }

    const Tensor<S>& at(const Tensor<S>& owner) const {
        const Tensor<S>* g = lookup(owner);
        if (!g) throw ContractViolation("GradientMap: no gradient recorded for node " + std::to_string(owner.node_id()));
        return *g;
    }

    const Tensor<S>* lookup(const Tensor<S>& owner) const {
        if (owner.tape_serial() != tape_serial_) return nullptr;
        auto it = grads_.find(owner.node_id());
        return it == grads_.end() ? nullptr : &it->second;
    }

    std::size_t size() const { return grads_.size(); }

private:
    template <class T> friend class Tape;
    std::uint64_t tape_serial_ = 0;
    std::unordered_map<int, Tensor<S>> grads_;
};

// Reverse-mode tape over Tensor<S>. One tape per forward pass; single-threaded
// by contract, but distinct tapes are independent. Gradient accumulation and
// all reductions run in double regardless of S.
template <class S>
class Tape {
public:
    Tape() : serial_(next_serial().fetch_add(1, std::memory_order_relaxed)) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t serial() const { return serial_; }
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    // Registers an off-tape tensor as a leaf. The returned copy carries the
    // node identity and is the key for gradient lookup after backward().
    Tensor<S> leaf(const Tensor<S>& t) {
        if (t.node_id() >= 0) throw ContractViolation("leaf: tensor is already bound to a tape");
        return emit(Op::Leaf, {}, t, t.requires_grad());
    }

    Tensor<S> leaf(Shape shape, std::vector<S> data, bool requires_grad = true) {
        return leaf(Tensor<S>(std::move(shape), std::move(data), requires_grad));
    }

    Tensor<S> constant(const Tensor<S>& t) {
        return emit(Op::Leaf, {}, t.with_requires_grad(false), false);
    }

    Tensor<S> constant_scalar(S v) { return constant(Tensor<S>::scalar(v)); }
    Tensor<S> constant_full(Shape shape, S v) { return constant(Tensor<S>::full(std::move(shape), v)); }

    // ---- elementwise binary ----

    Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) { return binary(Op::Add, a, b); }
    Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) { return binary(Op::Sub, a, b); }
    Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) { return binary(Op::Mul, a, b); }

    // ---- elementwise unary ----

    Tensor<S> relu(const Tensor<S>& a) { return unary(Op::Relu, a); }
    Tensor<S> sigmoid(const Tensor<S>& a) { return unary(Op::Sigmoid, a); }
    Tensor<S> exp(const Tensor<S>& a) { return unary(Op::Exp, a); }
    Tensor<S> log(const Tensor<S>& a) { return unary(Op::Log, a); }
    Tensor<S> softplus(const Tensor<S>& a) { return unary(Op::Softplus, a); }

    // ---- reductions (to a [1] scalar, double accumulation) ----

    Tensor<S> sum(const Tensor<S>& a) { return reduce(Op::Sum, a); }
    Tensor<S> mean(const Tensor<S>& a) { return reduce(Op::Mean, a); }

    // ---- matmul [m,k] x [k,n] -> [m,n] ----

    Tensor<S> matmul(const Tensor<S>& a0, const Tensor<S>& b0) {
        Tensor<S> a = on_tape(a0), b = on_tape(b0);
        if (a.ndim() != 2 || b.ndim() != 2)
            throw ShapeError(std::string("matmul: expects rank-2 operands, got ") + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        const int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
        if (k != k2)
            throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        std::vector<S> out(std::size_t(m) * n);
        auto da = a.data(), db = b.data();
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int kk = 0; kk < k; ++kk) acc += double(da[i * k + kk]) * double(db[kk * n + j]);
                out[std::size_t(i) * n + j] = S(acc);
            }
        }
        return emit(Op::MatMul, {a, b}, Tensor<S>({m, n}, std::move(out)));
    }

    // ---- conv2d: input [Cin,H,W], kernel [Cout,Cin,KH,KW], explicit stride/pad ----

    Tensor<S> conv2d(const Tensor<S>& in0, const Tensor<S>& k0, int stride, int pad) {
        Tensor<S> in = on_tape(in0), kr = on_tape(k0);
        if (in.ndim() != 3 || kr.ndim() != 4)
            throw ShapeError("conv2d: expects input [C,H,W] and kernel [Cout,Cin,KH,KW], got " +
                             shape_str(in.shape()) + " and " + shape_str(kr.shape()));
        if (stride < 1 || pad < 0) throw InputError("conv2d: stride must be >= 1 and pad >= 0");
        const int ci_n = in.shape()[0], h = in.shape()[1], w = in.shape()[2];
        const int co_n = kr.shape()[0], kc = kr.shape()[1], kh_n = kr.shape()[2], kw_n = kr.shape()[3];
        if (kc != ci_n)
            throw ShapeError("conv2d: input channels " + std::to_string(ci_n) + " vs kernel Cin " +
                             std::to_string(kc) + " (" + shape_str(in.shape()) + ", " + shape_str(kr.shape()) + ")");
        const int oh_n = (h + 2 * pad - kh_n) / stride + 1;
        const int ow_n = (w + 2 * pad - kw_n) / stride + 1;
        if (h + 2 * pad < kh_n || w + 2 * pad < kw_n || oh_n < 1 || ow_n < 1)
            throw ShapeError("conv2d: kernel " + shape_str(kr.shape()) + " larger than padded input " + shape_str(in.shape()));
        std::vector<S> out(std::size_t(co_n) * oh_n * ow_n);
        conv2d_forward(in.data().data(), kr.data().data(), out.data(), ci_n, h, w, co_n, kh_n, kw_n, stride, pad, oh_n, ow_n);
        OpAttrs attrs;
        attrs.stride = stride;
        attrs.pad = pad;
        return emit(Op::Conv2d, {in, kr}, Tensor<S>({co_n, oh_n, ow_n}, std::move(out)), attrs);
    }

    // ---- structure ops ----

    Tensor<S> concat(std::span<const Tensor<S>> xs, int axis) {
        if (xs.empty()) throw InputError("concat: needs at least one input");
        std::vector<Tensor<S>> ins;
        ins.reserve(xs.size());
        for (const auto& x : xs) ins.push_back(on_tape(x));
        const Shape& s0 = ins[0].shape();
        if (axis < 0 || axis >= int(s0.size())) throw InputError("concat: axis out of range");
        int axis_total = 0;
        for (const auto& x : ins) {
            if (x.ndim() != int(s0.size())) throw ShapeError("concat: rank mismatch " + shape_str(x.shape()) + " vs " + shape_str(s0));
            for (int d = 0; d < int(s0.size()); ++d)
                if (d != axis && x.shape()[d] != s0[d])
                    throw ShapeError("concat: shape mismatch on non-axis dim, " + shape_str(x.shape()) + " vs " + shape_str(s0));
            axis_total += x.shape()[axis];
        }
        Shape out_shape = s0;
        out_shape[axis] = axis_total;
        std::int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= s0[d];
        for (int d = axis + 1; d < int(s0.size()); ++d) inner *= s0[d];
        std::vector<S> out(std::size_t(shape_numel(out_shape)));
        std::int64_t out_row = std::int64_t(axis_total) * inner;
        std::int64_t off = 0;
        for (const auto& x : ins) {
            const std::int64_t blk = std::int64_t(x.shape()[axis]) * inner;
            auto dx = x.data();
            for (std::int64_t o = 0; o < outer; ++o)
                std::copy_n(dx.data() + o * blk, blk, out.data() + o * out_row + off);
            off += blk;
        }
        OpAttrs attrs;
        attrs.axis = axis;
        return emit(Op::Concat, std::move(ins), Tensor<S>(std::move(out_shape), std::move(out)), attrs);
    }

    Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
        std::array<Tensor<S>, 2> xs{a, b};
        return concat(std::span<const Tensor<S>>(xs.data(), xs.size()), axis);
    }

    Tensor<S> slice(const Tensor<S>& a0, int axis, int start, int len) {
        Tensor<S> a = on_tape(a0);
        if (axis < 0 || axis >= a.ndim()) throw InputError("slice: axis out of range");
        if (len < 1 || start < 0 || start + len > a.shape()[axis])
            throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") out of bounds for axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
        Shape out_shape = a.shape();
        out_shape[axis] = len;
        std::int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= a.shape()[d];
        for (int d = axis + 1; d < a.ndim(); ++d) inner *= a.shape()[d];
        const std::int64_t in_row = std::int64_t(a.shape()[axis]) * inner;
        const std::int64_t out_row = std::int64_t(len) * inner;
        std::vector<S> out(std::size_t(outer * out_row));
        auto da = a.data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(da.data() + o * in_row + std::int64_t(start) * inner, out_row, out.data() + o * out_row);
        OpAttrs attrs;
        attrs.axis = axis;
        attrs.start = start;
        attrs.len = len;
        return emit(Op::Slice, {a}, Tensor<S>(std::move(out_shape), std::move(out)), attrs);
    }

    // Trailing-dimension expansion: the input shape (with trailing 1s stripped)
    // must be a prefix of the target shape.
    Tensor<S> broadcast_to(const Tensor<S>& a0, Shape target) {
        Tensor<S> a = on_tape(a0);
        Shape core = a.shape();
        while (core.size() > 1 && core.back() == 1) core.pop_back();
        if (core.size() == 1 && core[0] == 1) core.clear();
        if (core.size() > target.size())
            throw ShapeError("broadcast: " + shape_str(a.shape()) + " cannot expand to " + shape_str(target));
        for (std::size_t d = 0; d < core.size(); ++d)
            if (core[d] != target[d])
                throw ShapeError("broadcast: " + shape_str(a.shape()) + " is not a trailing expansion of " + shape_str(target) +
                                 " (dim " + std::to_string(d) + ")");
        const std::int64_t n_core = shape_numel(core.empty() ? Shape{1} : core);
        const std::int64_t n_out = shape_numel(target);
        const std::int64_t rep = n_out / n_core;
        std::vector<S> out(static_cast<std::size_t>(n_out));
        auto da = a.data();
        for (std::int64_t i = 0; i < n_core; ++i)
            std::fill_n(out.data() + i * rep, rep, da[i]);
        OpAttrs attrs;
        attrs.target = target;
        return emit(Op::Broadcast, {a}, Tensor<S>(std::move(target), std::move(out)), attrs);
    }

    Tensor<S> reshape(const Tensor<S>& a0, Shape target) {
        Tensor<S> a = on_tape(a0);
        if (shape_numel(target) != a.numel())
            throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(target));
        std::vector<S> out(a.data().begin(), a.data().end());
        OpAttrs attrs;
        attrs.target = target;
        return emit(Op::Reshape, {a}, Tensor<S>(std::move(target), std::move(out)), attrs);
    }

    // Nearest-neighbour 2x spatial upsampling of [C,H,W].
    Tensor<S> upsample2x(const Tensor<S>& a0) {
        Tensor<S> a = on_tape(a0);
        if (a.ndim() != 3) throw ShapeError("upsample2x: expects [C,H,W], got " + shape_str(a.shape()));
        const int c_n = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
        std::vector<S> out(std::size_t(c_n) * 2 * h * 2 * w);
        auto da = a.data();
        for (int c = 0; c < c_n; ++c)
            for (int i = 0; i < h; ++i) {
                const S* row = da.data() + (std::size_t(c) * h + i) * w;
                S* o0 = out.data() + ((std::size_t(c) * 2 * h) + 2 * i) * 2 * w;
                S* o1 = o0 + 2 * w;
                for (int j = 0; j < w; ++j) {
                    o0[2 * j] = o0[2 * j + 1] = row[j];
                    o1[2 * j] = o1[2 * j + 1] = row[j];
                }
            }
        return emit(Op::Upsample2x, {a}, Tensor<S>({c_n, 2 * h, 2 * w}, std::move(out)));
    }

    // Generic dispatcher over the registered op kinds.
    Tensor<S> forward_op(Op kind, std::span<const Tensor<S>> inputs, const OpAttrs& attrs = {}) {
        auto need = [&](std::size_t n) {
            if (inputs.size() != n)
                throw InputError(std::string(op_name(kind)) + ": expects " + std::to_string(n) +
                                 " inputs, got " + std::to_string(inputs.size()));
        };
        switch (kind) {
            case Op::Add: need(2); return add(inputs[0], inputs[1]);
            case Op::Sub: need(2); return sub(inputs[0], inputs[1]);
            case Op::Mul: need(2); return mul(inputs[0], inputs[1]);
            case Op::MatMul: need(2); return matmul(inputs[0], inputs[1]);
            case Op::Conv2d: need(2); return conv2d(inputs[0], inputs[1], attrs.stride, attrs.pad);
            case Op::Relu: need(1); return relu(inputs[0]);
            case Op::Sigmoid: need(1); return sigmoid(inputs[0]);
            case Op::Exp: need(1); return exp(inputs[0]);
            case Op::Log: need(1); return log(inputs[0]);
            case Op::Softplus: need(1); return softplus(inputs[0]);
            case Op::Sum: need(1); return sum(inputs[0]);
            case Op::Mean: need(1); return mean(inputs[0]);
            case Op::Concat: return concat(inputs, attrs.axis);
            case Op::Slice: need(1); return slice(inputs[0], attrs.axis, attrs.start, attrs.len);
            case Op::Broadcast: need(1); return broadcast_to(inputs[0], attrs.target);
            case Op::Reshape: need(1); return reshape(inputs[0], attrs.target);
            case Op::Upsample2x: need(1); return upsample2x(inputs[0]);
            case Op::Leaf: break;
        }
        throw InputError("forward_op: not a dispatchable op kind");
    }

    // Reverse sweep from a scalar loss. Consumes the tape: a second call throws.
    GradientMap<S> backward(const Tensor<S>& loss) {
        if (loss.tape_serial() != serial_) throw ContractViolation("backward: loss is not on this tape");
        if (loss.numel() != 1) throw ContractViolation("backward: loss must be scalar, shape is " + shape_str(loss.shape()));
        if (consumed_) throw ContractViolation("backward: tape already consumed");
        consumed_ = true;

        const int loss_id = loss.node_id();
        std::vector<std::vector<double>> buf(nodes_.size());
        GradientMap<S> gm;
        gm.tape_serial_ = serial_;
        if (!nodes_[loss_id].requires_grad) return gm; // loss independent of all grad leaves

        buf[loss_id].assign(1, 1.0);
        for (int i = loss_id; i >= 0; --i) {
            if (buf[i].empty()) continue;
            const Node& node = nodes_[i];
            if (node.op != Op::Leaf) accumulate_adjoints(node, buf[i], buf);
            // materialize the gradient for this node
            std::vector<S> g(buf[i].size());
            for (std::size_t j = 0; j < g.size(); ++j) g[j] = S(buf[i][j]);
            gm.grads_.emplace(i, Tensor<S>(node.out_shape, std::move(g)));
            buf[i].clear();
            buf[i].shrink_to_fit();
        }
        return gm;
    }

private:
    struct Node {
        Op op = Op::Leaf;
        std::vector<Tensor<S>> inputs;
        Tensor<S> output; // kept for value-dependent adjoints (sigmoid, exp, ...)
        Shape out_shape;
        OpAttrs attrs;
        bool requires_grad = false;
    };

    static std::atomic<std::uint64_t>& next_serial() {
        static std::atomic<std::uint64_t> counter{1};
        return counter;
    }

    Tensor<S> on_tape(const Tensor<S>& t) {
        if (t.tape_serial() == serial_) return t;
        if (t.node_id() >= 0) throw ContractViolation("op input tensor belongs to a different tape");
        if (t.requires_grad())
            throw ContractViolation("a requires_grad tensor must be registered with leaf() before use");
        return emit(Op::Leaf, {}, t, false);
    }

    Tensor<S> emit(Op op, std::vector<Tensor<S>> inputs, Tensor<S> out, OpAttrs attrs = {}) {
        bool rg = out.requires_grad();
        for (const auto& in : inputs) rg = rg || in.requires_grad();
        return emit(op, std::move(inputs), std::move(out), rg, std::move(attrs));
    }

    Tensor<S> emit(Op op, std::vector<Tensor<S>> inputs, Tensor<S> out, bool requires_grad, OpAttrs attrs = {}) {
        out.node_id_ = static_cast<int>(nodes_.size());
        out.tape_serial_ = serial_;
        out.requires_grad_ = requires_grad;
        Node node;
        node.op = op;
        node.inputs = std::move(inputs);
        node.output = out;
        node.out_shape = out.shape();
        node.attrs = std::move(attrs);
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return out;
    }

    Tensor<S> binary(Op op, const Tensor<S>& a0, const Tensor<S>& b0) {
        Tensor<S> a = on_tape(a0), b = on_tape(b0);
        if (a.shape() != b.shape())
            throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        auto da = a.data(), db = b.data();
        std::vector<S> out(da.size());
        switch (op) {
            case Op::Add: for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i]; break;
            case Op::Sub: for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i]; break;
            case Op::Mul: for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i]; break;
            default: throw ContractViolation("binary: bad op");
        }
        return emit(op, {a, b}, Tensor<S>(a.shape(), std::move(out)));
    }

    Tensor<S> unary(Op op, const Tensor<S>& a0) {
        Tensor<S> a = on_tape(a0);
        auto da = a.data();
        std::vector<S> out(da.size());
        switch (op) {
            case Op::Relu:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] > S(0) ? da[i] : S(0);
                break;
            case Op::Sigmoid:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(da[i]);
                break;
            case Op::Exp:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = S(std::exp(double(da[i])));
                break;
            case Op::Log:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = S(std::log(double(da[i])));
                break;
            case Op::Softplus:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_softplus(da[i]);
                break;
            default: throw ContractViolation("unary: bad op");
        }
        return emit(op, {a}, Tensor<S>(a.shape(), std::move(out)));
    }

    Tensor<S> reduce(Op op, const Tensor<S>& a0) {
        Tensor<S> a = on_tape(a0);
        double acc = 0.0;
        for (S v : a.data()) acc += double(v);
        if (op == Op::Mean) acc /= double(a.numel());
        return emit(op, {a}, Tensor<S>::scalar(S(acc)));
    }

    static S stable_sigmoid(S x) {
        if (x >= S(0)) return S(1.0 / (1.0 + std::exp(-double(x))));
        const double e = std::exp(double(x));
        return S(e / (1.0 + e));
    }

    static S stable_softplus(S x) {
        if (x > S(0)) return S(double(x) + std::log1p(std::exp(-double(x))));
        return S(std::log1p(std::exp(double(x))));
    }

    static void conv2d_forward(const S* in, const S* kr, S* out, int ci_n, int h, int w,
                               int co_n, int kh_n, int kw_n, int stride, int pad, int oh_n, int ow_n) {
        for (int co = 0; co < co_n; ++co) {
            for (int oh = 0; oh < oh_n; ++oh) {
                const int ih0 = oh * stride - pad;
                const int kh_lo = ih0 < 0 ? -ih0 : 0;
                const int kh_hi = std::min(kh_n, h - ih0);
                for (int ow = 0; ow < ow_n; ++ow) {
                    const int iw0 = ow * stride - pad;
                    const int kw_lo = iw0 < 0 ? -iw0 : 0;
                    const int kw_hi = std::min(kw_n, w - iw0);
                    double acc = 0.0;
                    for (int ci = 0; ci < ci_n; ++ci) {
                        const S* in_plane = in + (std::size_t(ci) * h) * w;
                        const S* k_plane = kr + ((std::size_t(co) * ci_n + ci) * kh_n) * kw_n;
                        for (int kh = kh_lo; kh < kh_hi; ++kh) {
                            const S* irow = in_plane + std::size_t(ih0 + kh) * w + iw0;
                            const S* krow = k_plane + std::size_t(kh) * kw_n;
                            for (int kw = kw_lo; kw < kw_hi; ++kw)
                                acc += double(irow[kw]) * double(krow[kw]);
                        }
                    }
                    out[(std::size_t(co) * oh_n + oh) * ow_n + ow] = S(acc);
                }
            }
        }
    }

    // Routes d(loss)/d(node output) into the node's parents (double buffers).
    void accumulate_adjoints(const Node& node, const std::vector<double>& g, std::vector<std::vector<double>>& buf) {
        auto want = [&](int j) -> std::vector<double>* {
            const Tensor<S>& p = node.inputs[j];
            if (!p.requires_grad()) return nullptr;
            auto& b = buf[p.node_id()];
            if (b.empty()) b.assign(std::size_t(p.numel()), 0.0);
            return &b;
        };
        switch (node.op) {
            case Op::Add: {
                if (auto* ga = want(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                if (auto* gb = want(1)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
                break;
            }
            case Op::Sub: {
                if (auto* ga = want(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                if (auto* gb = want(1)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                break;
            }
            case Op::Mul: {
                auto da = node.inputs[0].data(), db = node.inputs[1].data();
                if (auto* ga = want(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * double(db[i]);
                if (auto* gb = want(1)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * double(da[i]);
                break;
            }
            case Op::MatMul: {
                const int m = node.inputs[0].shape()[0], k = node.inputs[0].shape()[1], n = node.inputs[1].shape()[1];
                auto da = node.inputs[0].data(), db = node.inputs[1].data();
                if (auto* ga = want(0))
                    for (int i = 0; i < m; ++i)
                        for (int kk = 0; kk < k; ++kk) {
                            double acc = 0.0;
                            for (int j = 0; j < n; ++j) acc += g[std::size_t(i) * n + j] * double(db[std::size_t(kk) * n + j]);
                            (*ga)[std::size_t(i) * k + kk] += acc;
                        }
                if (auto* gb = want(1))
                    for (int kk = 0; kk < k; ++kk)
                        for (int j = 0; j < n; ++j) {
                            double acc = 0.0;
                            for (int i = 0; i < m; ++i) acc += double(da[std::size_t(i) * k + kk]) * g[std::size_t(i) * n + j];
                            (*gb)[std::size_t(kk) * n + j] += acc;
                        }
                break;
            }
            case Op::Conv2d: {
                const Tensor<S>& in = node.inputs[0];
                const Tensor<S>& kr = node.inputs[1];
                const int ci_n = in.shape()[0], h = in.shape()[1], w = in.shape()[2];
                const int co_n = kr.shape()[0], kh_n = kr.shape()[2], kw_n = kr.shape()[3];
                const int oh_n = node.out_shape[1], ow_n = node.out_shape[2];
                const int stride = node.attrs.stride, pad = node.attrs.pad;
                std::vector<double>* gin = want(0);
                std::vector<double>* gk = want(1);
                auto din = in.data();
                auto dk = kr.data();
                for (int co = 0; co < co_n; ++co) {
                    for (int oh = 0; oh < oh_n; ++oh) {
                        const int ih0 = oh * stride - pad;
                        const int kh_lo = ih0 < 0 ? -ih0 : 0;
                        const int kh_hi = std::min(kh_n, h - ih0);
                        for (int ow = 0; ow < ow_n; ++ow) {
                            const int iw0 = ow * stride - pad;
                            const int kw_lo = iw0 < 0 ? -iw0 : 0;
                            const int kw_hi = std::min(kw_n, w - iw0);
                            const double go = g[(std::size_t(co) * oh_n + oh) * ow_n + ow];
                            if (go == 0.0) continue;
                            for (int ci = 0; ci < ci_n; ++ci) {
                                const std::size_t in_base = (std::size_t(ci) * h) * w;
                                const std::size_t k_base = ((std::size_t(co) * ci_n + ci) * kh_n) * kw_n;
                                for (int kh = kh_lo; kh < kh_hi; ++kh) {
                                    const std::size_t irow = in_base + std::size_t(ih0 + kh) * w + iw0;
                                    const std::size_t krow = k_base + std::size_t(kh) * kw_n;
                                    if (gin && gk) {
                                        for (int kw = kw_lo; kw < kw_hi; ++kw) {
                                            (*gin)[irow + kw] += go * double(dk[krow + kw]);
                                            (*gk)[krow + kw] += go * double(din[irow + kw]);
                                        }
                                    } else if (gin) {
                                        for (int kw = kw_lo; kw < kw_hi; ++kw) (*gin)[irow + kw] += go * double(dk[krow + kw]);
                                    } else if (gk) {
                                        for (int kw = kw_lo; kw < kw_hi; ++kw) (*gk)[krow + kw] += go * double(din[irow + kw]);
                                    }
                                }
                            }
                        }
                    }
                }
                break;
            }
            case Op::Relu: {
                auto da = node.inputs[0].data();
                if (auto* ga = want(0))
                    for (std::size_t i = 0; i < g.size(); ++i)
                        if (da[i] > S(0)) (*ga)[i] += g[i];
                break;
            }
            case Op::Sigmoid: {
                auto y = node.output.data();
                if (auto* ga = want(0))
                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * double(y[i]) * (1.0 - double(y[i]));
                break;
            }
            case Op::Exp: {
                auto y = node.output.data();
                if (auto* ga = want(0))
                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * double(y[i]);
                break;
            }
            case Op::Log: {
                auto da = node.inputs[0].data();
                if (auto* ga = want(0))
                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / double(da[i]);
                break;
            }
            case Op::Softplus: {
                auto da = node.inputs[0].data();
                if (auto* ga = want(0))
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        const double s = 1.0 / (1.0 + std::exp(-double(da[i])));
                        (*ga)[i] += g[i] * s;
                    }
                break;
            }
            case Op::Sum: {
                if (auto* ga = want(0))
                    for (auto& v : *ga) v += g[0];
                break;
            }
            case Op::Mean: {
                if (auto* ga = want(0)) {
                    const double s = g[0] / double(ga->size());
                    for (auto& v : *ga) v += s;
                }
                break;
            }
            case Op::Concat: {
                const int axis = node.attrs.axis;
                const Shape& os = node.out_shape;
                std::int64_t outer = 1, inner = 1;
                for (int d = 0; d < axis; ++d) outer *= os[d];
                for (int d = axis + 1; d < int(os.size()); ++d) inner *= os[d];
                const std::int64_t out_row = std::int64_t(os[axis]) * inner;
                std::int64_t off = 0;
                for (std::size_t j = 0; j < node.inputs.size(); ++j) {
                    const std::int64_t blk = std::int64_t(node.inputs[j].shape()[axis]) * inner;
                    if (auto* gj = want(int(j)))
                        for (std::int64_t o = 0; o < outer; ++o)
                            for (std::int64_t t = 0; t < blk; ++t)
                                (*gj)[o * blk + t] += g[o * out_row + off + t];
                    off += blk;
                }
                break;
            }
            case Op::Slice: {
                const Tensor<S>& a = node.inputs[0];
                const int axis = node.attrs.axis, start = node.attrs.start, len = node.attrs.len;
                std::int64_t outer = 1, inner = 1;
                for (int d = 0; d < axis; ++d) outer *= a.shape()[d];
                for (int d = axis + 1; d < a.ndim(); ++d) inner *= a.shape()[d];
                const std::int64_t in_row = std::int64_t(a.shape()[axis]) * inner;
                const std::int64_t out_row = std::int64_t(len) * inner;
                if (auto* ga = want(0))
                    for (std::int64_t o = 0; o < outer; ++o)
                        for (std::int64_t t = 0; t < out_row; ++t)
                            (*ga)[o * in_row + std::int64_t(start) * inner + t] += g[o * out_row + t];
                break;
            }
            case Op::Broadcast: {
                const std::int64_t n_in = node.inputs[0].numel();
                const std::int64_t rep = std::int64_t(g.size()) / n_in;
                if (auto* ga = want(0))
                    for (std::int64_t i = 0; i < n_in; ++i) {
                        double acc = 0.0;
                        for (std::int64_t r = 0; r < rep; ++r) acc += g[std::size_t(i * rep + r)];
                        (*ga)[std::size_t(i)] += acc;
                    }
                break;
            }
            case Op::Reshape: {
                if (auto* ga = want(0))
                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                break;
            }
            case Op::Upsample2x: {
                const Tensor<S>& a = node.inputs[0];
                const int c_n = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
                if (auto* ga = want(0))
                    for (int c = 0; c < c_n; ++c)
                        for (int i = 0; i < h; ++i)
                            for (int j = 0; j < w; ++j) {
                                const std::size_t o = ((std::size_t(c) * 2 * h) + 2 * i) * 2 * w + 2 * j;
                                (*ga)[(std::size_t(c) * h + i) * w + j] += g[o] + g[o + 1] + g[o + 2 * w] + g[o + 2 * w + 1];
                            }
                break;
            }
            case Op::Leaf:
                break;
        }
    }

    std::vector<Node> nodes_;
    std::uint64_t serial_;
    bool consumed_ = false;
};

using Tape32 = Tape<float>;
using Tape64 = Tape<double>;
using GradientMap32 = GradientMap<float>;
using GradientMap64 = GradientMap<double>;

} // namespace vseg
