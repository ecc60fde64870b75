#pragma once
// Shared helpers for the test suites.
#include <string>
#include <vector>

#include "vseg/random.hpp"
#include "vseg/synthetic.hpp"
#include "vseg/tensor.hpp"

namespace test_helpers {

template <class S>
vseg::Tensor<S> rnd_tensor(vseg::RandomGen& rng, vseg::Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<S> v(static_cast<std::size_t>(vseg::shape_numel(shape)));
    rng.fill_uniform(std::span<S>(v), lo, hi);
    return vseg::Tensor<S>(std::move(shape), std::move(v));
}

template <class S>
vseg::Tensor<S> rnd_binary(vseg::RandomGen& rng, vseg::Shape shape, double p = 0.5) {
    std::vector<S> v(static_cast<std::size_t>(vseg::shape_numel(shape)));
    for (auto& x : v) x = rng.bernoulli(p) ? S(1) : S(0);
    return vseg::Tensor<S>(std::move(shape), std::move(v));
}

// A small 16x16 dataset for fast training tests.
inline vseg::Dataset tiny_dataset(std::uint64_t seed = 0, int train = 4, int k = 3) {
    vseg::DatasetManifest m;
    m.train = train;
    m.val = 1;
    m.test = 1;
    m.k = k;
    m.height = 16;
    m.width = 16;
    m.seed = seed;
    return vseg::make_dataset(m);
}

} // namespace test_helpers
