#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <sstream>
#include <utility>
#include <vector>

#include "vseg/errors.hpp"

namespace vseg {

// Dense row-major shape. Dims are positive; rank 0 is not used (scalars are [1]).
using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <class S> class Tape;

// Immutable dense tensor of scalar type S (float in production, double for
// high-precision oracles). Copies share the underlying buffer. A tensor is
// either free-standing (node_id == -1) or bound to one tape node.
template <class S>
class Tensor {
public:
    using value_type = S;

    Tensor() = default;

    Tensor(Shape shape, std::vector<S> data, bool requires_grad = false)
        : data_(std::make_shared<const std::vector<S>>(std::move(data))),
          shape_(std::move(shape)),
          requires_grad_(requires_grad) {
        for (int d : shape_) {
            if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
        }
        if (shape_.empty()) throw ShapeError("tensor rank must be >= 1");
        if (shape_numel(shape_) != static_cast<std::int64_t>(data_->size())) {
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<S> d(static_cast<std::size_t>(shape_numel(shape)), S(0));
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, S value, bool requires_grad = false) {
        std::vector<S> d(static_cast<std::size_t>(shape_numel(shape)), value);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(S value) { return Tensor({1}, {value}); }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_ ? data_->size() : 0); }
    std::span<const S> data() const { return {data_->data(), data_->size()}; }
    S at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    S item() const {
        if (numel() != 1) throw ContractViolation("item() requires a one-element tensor, shape is " + shape_str(shape_));
        return (*data_)[0];
    }

    bool requires_grad() const { return requires_grad_; }
    int node_id() const { return node_id_; }
    std::uint64_t tape_serial() const { return tape_serial_; }

    // Value copy with the grad flag changed; drops any tape binding.
    Tensor with_requires_grad(bool rg) const {
        Tensor t = *this;
        t.requires_grad_ = rg;
        t.node_id_ = -1;
        t.tape_serial_ = 0;
        return t;
    }

    template <class T>
    Tensor<T> cast() const {
        std::vector<T> out(data_->size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>((*data_)[i]);
        return Tensor<T>(shape_, std::move(out), requires_grad_);
    }

private:
    friend class Tape<S>;

    std::shared_ptr<const std::vector<S>> data_;
    Shape shape_;
    int node_id_ = -1;
    std::uint64_t tape_serial_ = 0;
    bool requires_grad_ = false;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

template <class S>
bool same_shape(const Tensor<S>& a, const Tensor<S>& b) {
    return a.shape() == b.shape();
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    auto da = a.data(), db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) m = std::max(m, std::abs(double(da[i]) - double(db[i])));
    return m;
}

template <class S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) return false;
    auto da = a.data(), db = b.data();
    return std::equal(da.begin(), da.end(), db.begin(), db.end(),
                      [](S x, S y) { return std::memcmp(&x, &y, sizeof(S)) == 0; });
}

template <class S>
bool has_nonfinite(const Tensor<S>& t) {
    for (S v : t.data())
        if (!std::isfinite(double(v))) return true;
    return false;
}

} // namespace vseg
