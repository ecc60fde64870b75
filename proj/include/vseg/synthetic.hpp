#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/random.hpp"
#include "vseg/tensor.hpp"
#include "vseg/tensor_io.hpp"

namespace vseg {

// One image with K rater masks. Masks are stored as f32 but must be strictly
// binary; image values live in [0,1].
struct AnnotatedSample {
    Tensor32 image;                // [1,H,W]
    std::vector<Tensor32> masks;   // K x [1,H,W], strictly {0,1}
    std::string sample_id;

    void validate() const {
        if (image.ndim() != 3 || image.shape()[0] != 1)
            throw InputError("sample " + sample_id + ": image must be [1,H,W], got " + shape_str(image.shape()));
        if (masks.empty()) throw InputError("sample " + sample_id + ": needs at least one mask");
        for (const auto& m : masks) {
            if (m.shape() != image.shape())
                throw InputError("sample " + sample_id + ": mask shape " + shape_str(m.shape()) +
                                 " != image shape " + shape_str(image.shape()));
            for (float v : m.data())
                if (v != 0.0f && v != 1.0f)
                    throw InputError("sample " + sample_id + ": mask not binary (value " + std::to_string(v) + ")");
        }
    }
};

struct DatasetManifest {
    int train = 34;
    int val = 5;
    int test = 10;
    int k = 7;
    int height = 64;
    int width = 64;
    std::uint64_t seed = 0;
    double threshold_spread = 0.15;
    double blur_sigma = 1.5;
    double noise_level = 0.05;

    void validate() const {
        if (train < 1 || val < 1 || test < 1) throw ConfigError("manifest: split counts must be positive");
        if (k < 1) throw ConfigError("manifest: k must be >= 1");
        if (height < 16 || width < 16) throw ConfigError("manifest: height/width must be >= 16");
        if (threshold_spread < 0.0 || threshold_spread >= 0.5)
            throw ConfigError("manifest: threshold_spread must be in [0, 0.5)");
        if (blur_sigma < 0.0) throw ConfigError("manifest: blur_sigma must be >= 0");
        if (noise_level < 0.0 || noise_level >= 1.0) throw ConfigError("manifest: noise_level must be in [0,1)");
    }

    bool operator==(const DatasetManifest&) const = default;
};

namespace detail {

// Separable gaussian blur with reflected borders; sigma = 0 is the identity.
inline void gaussian_blur_inplace(std::vector<double>& img, int h, int w, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(std::size_t(radius) + 1);
    double norm = 0.0;
    for (int i = 0; i <= radius; ++i) {
        kernel[std::size_t(i)] = std::exp(-0.5 * (double(i) * i) / (sigma * sigma));
        norm += (i == 0 ? 1.0 : 2.0) * kernel[std::size_t(i)];
    }
    for (auto& v : kernel) v /= norm;
    const auto reflect = [](int i, int n) {
        while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
        return i;
    };
    std::vector<double> tmp(img.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = kernel[0] * img[std::size_t(y) * w + x];
            for (int i = 1; i <= radius; ++i)
                acc += kernel[std::size_t(i)] * (img[std::size_t(y) * w + reflect(x - i, w)] +
                                                 img[std::size_t(y) * w + reflect(x + i, w)]);
            tmp[std::size_t(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = kernel[0] * tmp[std::size_t(y) * w + x];
            for (int i = 1; i <= radius; ++i)
                acc += kernel[std::size_t(i)] * (tmp[std::size_t(reflect(y - i, h)) * w + x] +
                                                 tmp[std::size_t(reflect(y + i, h)) * w + x]);
            img[std::size_t(y) * w + x] = acc;
        }
}

// 3x3 cross dilation (grow=true) or erosion (grow=false) of a binary buffer.
inline std::vector<float> morph_cross(const std::vector<float>& in, int h, int w, bool grow) {
    std::vector<float> out(in.size());
    const auto at = [&](int y, int x) -> float {
        if (y < 0 || y >= h || x < 0 || x >= w) return grow ? 0.0f : 1.0f; // outside never dominates
        return in[std::size_t(y) * w + x];
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float v = at(y, x);
            if (grow)
                v = std::max({v, at(y - 1, x), at(y + 1, x), at(y, x - 1), at(y, x + 1)});
            else
                v = std::min({v, at(y - 1, x), at(y + 1, x), at(y, x - 1), at(y, x + 1)});
            out[std::size_t(y) * w + x] = v;
        }
    return out;
}

} // namespace detail

// Ambiguous grayscale blob image. Returns (image, soft boundary field):
// the field is the blurred union of 1-3 random ellipses in [0,1], and the
// image adds pixel noise on top, clipped back into [0,1].
inline std::pair<Tensor32, Tensor32> generate_shape_image(std::uint64_t seed, int h, int w, double blur_sigma,
                                                          double noise_level) {
    if (h < 16 || w < 16) throw ConfigError("generate_shape_image: H,W must be >= 16, got " + std::to_string(h) +
                                            "x" + std::to_string(w));
    if (blur_sigma < 0.0) throw ConfigError("generate_shape_image: blur_sigma must be >= 0");
    if (noise_level < 0.0 || noise_level >= 1.0)
        throw ConfigError("generate_shape_image: noise_level must be in [0,1)");
    RandomGen rng(seed);
    const double scale = double(std::min(h, w));
    struct Ellipse { double cy, cx, a, b, theta; };
    std::vector<Ellipse> ellipses;
    const int count = 1 + int(rng.uniform_int(3)); // 1..3
    const double cy0 = rng.uniform(0.35, 0.65) * h;
    const double cx0 = rng.uniform(0.35, 0.65) * w;
    ellipses.push_back({cy0, cx0, rng.uniform(0.14, 0.26) * scale, rng.uniform(0.14, 0.26) * scale,
                        rng.uniform(0.0, 3.14159265358979323846)});
    for (int i = 1; i < count; ++i)
        ellipses.push_back({cy0 + rng.uniform(-0.12, 0.12) * scale, cx0 + rng.uniform(-0.12, 0.12) * scale,
                            rng.uniform(0.08, 0.16) * scale, rng.uniform(0.08, 0.16) * scale,
                            rng.uniform(0.0, 3.14159265358979323846)});
    std::vector<double> field(std::size_t(h) * w, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double py = y + 0.5, px = x + 0.5;
            for (const auto& e : ellipses) {
                const double dy = py - e.cy, dx = px - e.cx;
                const double u = std::cos(e.theta) * dx + std::sin(e.theta) * dy;
                const double v = -std::sin(e.theta) * dx + std::cos(e.theta) * dy;
                if ((u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0) {
                    field[std::size_t(y) * w + x] = 1.0;
                    break;
                }
            }
        }
    detail::gaussian_blur_inplace(field, h, w, blur_sigma);
    std::vector<float> field_f(field.size()), image_f(field.size());
    for (std::size_t i = 0; i < field.size(); ++i) {
        field_f[i] = float(field[i]);
        const double noisy = field[i] + (noise_level > 0.0 ? rng.uniform(-noise_level, noise_level) : 0.0);
        image_f[i] = float(std::clamp(noisy, 0.0, 1.0));
    }
    return {Tensor32({1, h, w}, std::move(image_f)), Tensor32({1, h, w}, std::move(field_f))};
}

// Draws the per-rater threshold offsets used by simulate_raters.
inline std::vector<double> draw_rater_offsets(int k, double threshold_spread, std::uint64_t seed) {
    if (k < 1) throw InputError("draw_rater_offsets: K must be >= 1");
    if (threshold_spread < 0.0) throw InputError("draw_rater_offsets: threshold_spread must be >= 0");
    RandomGen rng(seed);
    std::vector<double> deltas(static_cast<std::size_t>(k));
    for (auto& d : deltas) d = threshold_spread > 0.0 ? rng.uniform(-threshold_spread, threshold_spread) : 0.0;
    return deltas;
}

// Rater k thresholds the field at 0.5 + offsets[k], then applies a random
// dilation or erosion of radius in {0..max_morph_radius}. Disagreement is
// therefore confined to the blurred boundary band.
inline std::vector<Tensor32> simulate_raters_with_offsets(const Tensor32& field, const std::vector<double>& offsets,
                                                          std::uint64_t seed, int max_morph_radius = 1) {
    if (field.ndim() != 3 || field.shape()[0] != 1)
        throw InputError("simulate_raters: field must be [1,H,W], got " + shape_str(field.shape()));
    if (offsets.empty()) throw InputError("simulate_raters: K must be >= 1");
    if (max_morph_radius < 0) throw InputError("simulate_raters: max_morph_radius must be >= 0");
    const int h = field.shape()[1], w = field.shape()[2];
    RandomGen rng(mix_seed(seed, 0x6d6f7270)); // morphology stream
    std::vector<Tensor32> masks;
    masks.reserve(offsets.size());
    for (double delta : offsets) {
        const double t = 0.5 + delta;
        std::vector<float> m(std::size_t(h) * w);
        auto fd = field.data();
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = fd[i] >= t ? 1.0f : 0.0f;
        const int radius = max_morph_radius > 0 ? int(rng.uniform_int(std::uint64_t(max_morph_radius) + 1)) : 0;
        const bool grow = rng.bernoulli(0.5); // drawn regardless of radius to keep streams aligned
        for (int r = 0; r < radius; ++r) m = detail::morph_cross(m, h, w, grow);
        masks.emplace_back(Shape{1, h, w}, std::move(m));
    }
    return masks;
}

inline std::vector<Tensor32> simulate_raters(const Tensor32& field, int k, double threshold_spread,
                                             std::uint64_t seed, int max_morph_radius = 1) {
    return simulate_raters_with_offsets(field, draw_rater_offsets(k, threshold_spread, mix_seed(seed, 0x74687265)),
                                        seed, max_morph_radius);
}

// ---------------------------------------------------------------------------
// Dataset assembly and directory I/O
// ---------------------------------------------------------------------------

struct Dataset {
    DatasetManifest manifest;
    std::vector<AnnotatedSample> train, val, test;

    const std::vector<AnnotatedSample>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw InputError("unknown split: " + name);
    }
};

// Pure function of the manifest. Rater threshold offsets are drawn once per
// dataset, so rater k is the same simulated annotator on every image; the
// per-sample seed drives image content and morphological jitter.
inline Dataset make_dataset(const DatasetManifest& manifest) {
    manifest.validate();
    Dataset ds;
    ds.manifest = manifest;
    const std::vector<double> offsets =
        draw_rater_offsets(manifest.k, manifest.threshold_spread, mix_seed(manifest.seed, 0x72617465));
    int global = 0;
    const auto fill = [&](std::vector<AnnotatedSample>& out, const std::string& split, int count) {
        out.reserve(std::size_t(count));
        for (int i = 0; i < count; ++i, ++global) {
            const std::uint64_t sample_seed = mix_seed(manifest.seed, 0x1000 + std::uint64_t(global));
            auto [image, field] = generate_shape_image(sample_seed, manifest.height, manifest.width,
                                                       manifest.blur_sigma, manifest.noise_level);
            AnnotatedSample s;
            s.image = image;
            s.masks = simulate_raters_with_offsets(field, offsets, sample_seed);
            char buf[32];
            std::snprintf(buf, sizeof buf, "%s_%04d", split.c_str(), i);
            s.sample_id = buf;
            out.push_back(std::move(s));
        }
    };
    fill(ds.train, "train", manifest.train);
    fill(ds.val, "val", manifest.val);
    fill(ds.test, "test", manifest.test);
    return ds;
}

inline std::string manifest_to_text(const DatasetManifest& m) {
    std::string out;
    out += "train=" + std::to_string(m.train) + "\n";
    out += "val=" + std::to_string(m.val) + "\n";
    out += "test=" + std::to_string(m.test) + "\n";
    out += "k=" + std::to_string(m.k) + "\n";
    out += "height=" + std::to_string(m.height) + "\n";
    out += "width=" + std::to_string(m.width) + "\n";
    out += "seed=" + std::to_string(m.seed) + "\n";
    out += "threshold_spread=" + format_double(m.threshold_spread) + "\n";
    out += "blur_sigma=" + format_double(m.blur_sigma) + "\n";
    out += "noise_level=" + format_double(m.noise_level) + "\n";
    return out;
}

inline DatasetManifest manifest_from_kv(const std::vector<std::pair<std::string, std::string>>& kv,
                                        const std::string& origin) {
    DatasetManifest m;
    bool seen[10] = {};
    for (const auto& [key, val] : kv) {
        if (key == "train") { m.train = int(kv_to_int(key, val)); seen[0] = true; }
        else if (key == "val") { m.val = int(kv_to_int(key, val)); seen[1] = true; }
        else if (key == "test") { m.test = int(kv_to_int(key, val)); seen[2] = true; }
        else if (key == "k") { m.k = int(kv_to_int(key, val)); seen[3] = true; }
        else if (key == "height") { m.height = int(kv_to_int(key, val)); seen[4] = true; }
        else if (key == "width") { m.width = int(kv_to_int(key, val)); seen[5] = true; }
        else if (key == "seed") { m.seed = kv_to_u64(key, val); seen[6] = true; }
        else if (key == "threshold_spread") { m.threshold_spread = kv_to_double(key, val); seen[7] = true; }
        else if (key == "blur_sigma") { m.blur_sigma = kv_to_double(key, val); seen[8] = true; }
        else if (key == "noise_level") { m.noise_level = kv_to_double(key, val); seen[9] = true; }
        else throw FormatError(origin + ": unknown manifest key '" + key + "'");
    }
    static const char* names[10] = {"train", "val",  "test", "k",                "height",
                                    "width", "seed", "threshold_spread", "blur_sigma", "noise_level"};
    for (int i = 0; i < 10; ++i)
        if (!seen[i]) throw FormatError(origin + ": missing manifest key '" + std::string(names[i]) + "'");
    m.validate();
    return m;
}

inline void write_dataset(const Dataset& ds, const std::string& dir_path) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir_path, ec);
    if (ec) throw IoError("cannot create directory " + dir_path + ": " + ec.message());
    detail::write_file_bytes(dir_path + "/manifest.txt", manifest_to_text(ds.manifest));
    for (const std::string split : {"train", "val", "test"}) {
        const std::string sub = dir_path + "/" + split;
        fs::create_directories(sub, ec);
        if (ec) throw IoError("cannot create directory " + sub + ": " + ec.message());
        for (const auto& s : ds.split(split)) {
            write_vstn(sub + "/" + s.sample_id + "_image.vstn", s.image, VstnDtype::F32);
            for (std::size_t k = 0; k < s.masks.size(); ++k)
                write_vstn(sub + "/" + s.sample_id + "_mask" + std::to_string(k) + ".vstn", s.masks[k],
                           VstnDtype::U8);
        }
    }
}

inline Dataset read_dataset(const std::string& dir_path) {
    Dataset ds;
    const std::string mpath = dir_path + "/manifest.txt";
    ds.manifest = manifest_from_kv(read_kv_file(mpath), mpath);
    const auto load_split = [&](std::vector<AnnotatedSample>& out, const std::string& split, int count) {
        out.reserve(std::size_t(count));
        for (int i = 0; i < count; ++i) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%s_%04d", split.c_str(), i);
            AnnotatedSample s;
            s.sample_id = buf;
            const std::string base = dir_path + "/" + split + "/" + s.sample_id;
            s.image = read_vstn(base + "_image.vstn");
            s.masks.reserve(std::size_t(ds.manifest.k));
            for (int k = 0; k < ds.manifest.k; ++k) s.masks.push_back(read_vstn(base + "_mask" + std::to_string(k) + ".vstn"));
            s.validate();
            out.push_back(std::move(s));
        }
    };
    load_split(ds.train, "train", ds.manifest.train);
    load_split(ds.val, "val", ds.manifest.val);
    load_split(ds.test, "test", ds.manifest.test);
    return ds;
}

} // namespace vseg
