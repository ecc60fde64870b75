#pragma once
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

// Binary tensor container. Layout:
//   "VSTN" | u8 version=1 | u8 dtype (0=f32, 1=u8) | u8 ndim |
//   ndim x u32 LE dims | payload, little-endian, row-major
// Readers are strict: short files and trailing bytes are format errors.
enum class VstnDtype : std::uint8_t { F32 = 0, U8 = 1 };

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
    out.push_back(char((v >> 16) & 0xff));
    out.push_back(char((v >> 24) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure: " + path);
    return bytes;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open file for writing: " + path);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failure: " + path);
}

} // namespace detail

inline std::string encode_vstn(const Tensor32& t, VstnDtype dtype) {
    std::string out;
    out.reserve(7 + 4 * std::size_t(t.ndim()) + std::size_t(t.numel()) * (dtype == VstnDtype::F32 ? 4 : 1));
    out += "VSTN";
    out.push_back(char(1));
    out.push_back(char(std::uint8_t(dtype)));
    if (t.ndim() > 255) throw InputError("vstn: rank > 255 unsupported");
    out.push_back(char(std::uint8_t(t.ndim())));
    for (int d : t.shape()) detail::put_u32_le(out, std::uint32_t(d));
    if (dtype == VstnDtype::F32) {
        for (float v : t.data()) detail::put_u32_le(out, std::bit_cast<std::uint32_t>(v));
    } else {
        for (float v : t.data()) {
            if (!(v >= 0.0f && v <= 255.0f) || v != std::floor(v))
                throw InputError("vstn: u8 payload requires integral values in [0,255], got " + std::to_string(v));
            out.push_back(char(std::uint8_t(v)));
        }
    }
    return out;
}

inline Tensor32 decode_vstn(const std::string& bytes, const std::string& origin, VstnDtype* dtype_out = nullptr) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t n = bytes.size();
    if (n < 7) throw FormatError("vstn: truncated header in " + origin);
    if (std::string_view(bytes.data(), 4) != "VSTN") throw FormatError("vstn: bad magic in " + origin);
    if (p[4] != 1) throw FormatError("vstn: unsupported version " + std::to_string(p[4]) + " in " + origin);
    if (p[5] > 1) throw FormatError("vstn: unknown dtype code " + std::to_string(p[5]) + " in " + origin);
    const VstnDtype dtype = VstnDtype(p[5]);
    const int ndim = p[6];
    if (ndim < 1) throw FormatError("vstn: rank 0 in " + origin);
    std::size_t off = 7;
    if (n < off + 4 * std::size_t(ndim)) throw FormatError("vstn: truncated dims in " + origin);
    Shape shape(static_cast<std::size_t>(ndim));
    std::int64_t numel = 1;
    for (int i = 0; i < ndim; ++i, off += 4) {
        const std::uint32_t d = detail::get_u32_le(p + off);
        if (d == 0 || d > 0x7fffffffu) throw FormatError("vstn: invalid dim " + std::to_string(d) + " in " + origin);
        shape[std::size_t(i)] = int(d);
        numel *= d;
        if (numel > (std::int64_t(1) << 33)) throw FormatError("vstn: implausible element count in " + origin);
    }
    const std::size_t elem = dtype == VstnDtype::F32 ? 4 : 1;
    const std::size_t want = off + elem * std::size_t(numel);
    if (n < want) throw FormatError("vstn: truncated payload in " + origin);
    if (n > want) throw FormatError("vstn: trailing bytes after payload in " + origin);
    std::vector<float> data(static_cast<std::size_t>(numel));
    if (dtype == VstnDtype::F32) {
        for (std::size_t i = 0; i < data.size(); ++i)
            data[i] = std::bit_cast<float>(detail::get_u32_le(p + off + 4 * i));
    } else {
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = float(p[off + i]);
    }
    if (dtype_out) *dtype_out = dtype;
    return Tensor32(shape, std::move(data));
}

inline void write_vstn(const std::string& path, const Tensor32& t, VstnDtype dtype = VstnDtype::F32) {
    detail::write_file_bytes(path, encode_vstn(t, dtype));
}

inline Tensor32 read_vstn(const std::string& path, VstnDtype* dtype_out = nullptr) {
    return decode_vstn(detail::read_file_bytes(path), path, dtype_out);
}

// 8-bit binary PGM ("P5"), pixel = round(255 * value) with values clamped
// to [0,1] first. Header: "P5\n<width> <height>\n255\n".
inline void write_pgm(const std::string& path, const Tensor32& t) {
    if (t.ndim() != 3 || t.shape()[0] != 1)
        throw InputError("write_pgm: expected a [1,H,W] map, got " + shape_str(t.shape()));
    const int h = t.shape()[1], w = t.shape()[2];
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + std::size_t(h) * std::size_t(w));
    for (float v : t.data()) {
        const double c = std::clamp(double(v), 0.0, 1.0);
        out.push_back(char(std::uint8_t(std::lround(255.0 * c))));
    }
    detail::write_file_bytes(path, out);
}

// ---------------------------------------------------------------------------
// Flat key=value text files (manifests, run configs)
// ---------------------------------------------------------------------------

// Blank lines and '#' comments are skipped; everything else must be key=value.
// Order is preserved; duplicate keys are a format error.
inline std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text,
                                                                      const std::string& origin) {
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t pos = 0;
    int lineno = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t");
        line = line.substr(first, last - first + 1);
        if (line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos || eq == 0)
            throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
        std::string key = line.substr(0, eq);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        std::string val = line.substr(eq + 1);
        while (!val.empty() && (val.front() == ' ' || val.front() == '\t')) val.erase(val.begin());
        for (const auto& [k, v] : out)
            if (k == key) throw FormatError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        out.emplace_back(std::move(key), std::move(val));
    }
    return out;
}

inline std::vector<std::pair<std::string, std::string>> read_kv_file(const std::string& path) {
    return parse_kv_text(detail::read_file_bytes(path), path);
}

inline long long kv_to_int(const std::string& key, const std::string& val) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(val, &used);
        if (used != val.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw FormatError("key '" + key + "': expected integer, got '" + val + "'");
    }
}

inline std::uint64_t kv_to_u64(const std::string& key, const std::string& val) {
    try {
        std::size_t used = 0;
        if (!val.empty() && val[0] == '-') throw std::invalid_argument("negative");
        const unsigned long long v = std::stoull(val, &used);
        if (used != val.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw FormatError("key '" + key + "': expected unsigned integer, got '" + val + "'");
    }
}

inline double kv_to_double(const std::string& key, const std::string& val) {
    try {
        std::size_t used = 0;
        const double v = std::stod(val, &used);
        if (used != val.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw FormatError("key '" + key + "': expected number, got '" + val + "'");
    }
}

// Shortest decimal form that parses back to the identical double.
inline std::string format_double(double v) {
    for (int prec = 1; prec <= 17; ++prec) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    return std::to_string(v);
}

} // namespace vseg
