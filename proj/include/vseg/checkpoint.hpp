#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/networks.hpp"
#include "vseg/tensor_io.hpp"

namespace vseg {

// Checkpoint container. Layout:
//   "VSCK" | u8 version=1 |
//   u32 LE length + arch/config key=value text block |
//   u32 LE tensor count |
//   per tensor: u32 LE name length | name | u32 LE blob length | VSTN blob
// The arch block makes a checkpoint self-describing: loading needs no side
// channel. Parameter order in the file is the ParamSet order, preserved on
// load so optimizer state and serialization stay aligned.
struct Checkpoint {
    std::string kind;     // "joint" (encoder+decoder+segnet) or "segnet"
    ArchConfig arch;
    int z_channels = 0;   // latent channels at the segnet input
    ModelTriple32 triple; // populated when kind == "joint"
    ParamSet32 net;       // populated when kind == "segnet"
};

namespace detail {

inline void put_block(std::string& out, const std::string& block) {
    put_u32_le(out, std::uint32_t(block.size()));
    out += block;
}

inline void put_named_tensors(std::string& out, const std::string& prefix, const ParamSet32& ps) {
    for (const auto& [name, t] : ps.items) {
        const std::string full = prefix + "/" + name;
        put_block(out, full);
        put_block(out, encode_vstn(t, VstnDtype::F32));
    }
}

struct BlockReader {
    const std::string& bytes;
    std::size_t off = 0;
    const std::string& origin;

    std::uint32_t u32() {
        if (off + 4 > bytes.size()) throw FormatError("vsck: truncated at offset " + std::to_string(off) + " in " + origin);
        const std::uint32_t v = get_u32_le(reinterpret_cast<const unsigned char*>(bytes.data()) + off);
        off += 4;
        return v;
    }

    std::string block() {
        const std::uint32_t len = u32();
        if (off + len > bytes.size()) throw FormatError("vsck: truncated block in " + origin);
        std::string b = bytes.substr(off, len);
        off += len;
        return b;
    }
};

inline std::string arch_block(const std::string& kind, const ArchConfig& arch, int z_channels,
                              const std::vector<std::pair<std::string, std::uint64_t>>& seeds) {
    std::string b;
    b += "model=" + kind + "\n";
    b += "height=" + std::to_string(arch.height) + "\n";
    b += "width=" + std::to_string(arch.width) + "\n";
    b += "base_width=" + std::to_string(arch.base_width) + "\n";
    b += "latent_dim=" + std::to_string(arch.latent_dim) + "\n";
    b += "dropout_rate=" + format_double(arch.dropout_rate) + "\n";
    b += "z_channels=" + std::to_string(z_channels) + "\n";
    for (const auto& [k, v] : seeds) b += k + "=" + std::to_string(v) + "\n";
    return b;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const ModelTriple32& model) {
    std::string out = "VSCK";
    out.push_back(char(1));
    detail::put_block(out, detail::arch_block("joint", model.arch, model.arch.latent_dim,
                                              {{"encoder_seed", model.encoder.rng_seed},
                                               {"decoder_seed", model.decoder.rng_seed},
                                               {"segnet_seed", model.segnet.rng_seed}}));
    const std::uint32_t count =
        std::uint32_t(model.encoder.items.size() + model.decoder.items.size() + model.segnet.items.size());
    detail::put_u32_le(out, count);
    detail::put_named_tensors(out, "encoder", model.encoder);
    detail::put_named_tensors(out, "decoder", model.decoder);
    detail::put_named_tensors(out, "segnet", model.segnet);
    detail::write_file_bytes(path, out);
}

inline void save_checkpoint(const std::string& path, const ParamSet32& net, const ArchConfig& arch, int z_channels) {
    std::string out = "VSCK";
    out.push_back(char(1));
    detail::put_block(out, detail::arch_block("segnet", arch, z_channels, {{"net_seed", net.rng_seed}}));
    detail::put_u32_le(out, std::uint32_t(net.items.size()));
    detail::put_named_tensors(out, "net", net);
    detail::write_file_bytes(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    const std::string bytes = detail::read_file_bytes(path);
    if (bytes.size() < 5 || std::string_view(bytes.data(), 4) != "VSCK")
        throw FormatError("vsck: bad magic in " + path);
    if (bytes[4] != 1) throw FormatError("vsck: unsupported version " + std::to_string(int(bytes[4])) + " in " + path);
    detail::BlockReader rd{bytes, 5, path};
    const std::string arch_text = rd.block();

    Checkpoint ck;
    std::uint64_t enc_seed = 0, dec_seed = 0, seg_seed = 0, net_seed = 0;
    bool have_model = false;
    for (const auto& [key, val] : parse_kv_text(arch_text, path + " (arch block)")) {
        if (key == "model") { ck.kind = val; have_model = true; }
        else if (key == "height") ck.arch.height = int(kv_to_int(key, val));
        else if (key == "width") ck.arch.width = int(kv_to_int(key, val));
        else if (key == "base_width") ck.arch.base_width = int(kv_to_int(key, val));
        else if (key == "latent_dim") ck.arch.latent_dim = int(kv_to_int(key, val));
        else if (key == "dropout_rate") ck.arch.dropout_rate = kv_to_double(key, val);
        else if (key == "z_channels") ck.z_channels = int(kv_to_int(key, val));
        else if (key == "encoder_seed") enc_seed = kv_to_u64(key, val);
        else if (key == "decoder_seed") dec_seed = kv_to_u64(key, val);
        else if (key == "segnet_seed") seg_seed = kv_to_u64(key, val);
        else if (key == "net_seed") net_seed = kv_to_u64(key, val);
        else throw FormatError("vsck: unknown arch key '" + key + "' in " + path);
    }
    if (!have_model || (ck.kind != "joint" && ck.kind != "segnet"))
        throw FormatError("vsck: missing or unknown model kind in " + path);
    try {
        ck.arch.validate();
    } catch (const ConfigError& e) {
        throw FormatError("vsck: invalid arch in " + path + ": " + e.what());
    }

    const std::uint32_t count = rd.u32();
    ck.triple.arch = ck.arch;
    ck.triple.encoder.rng_seed = enc_seed;
    ck.triple.decoder.rng_seed = dec_seed;
    ck.triple.segnet.rng_seed = seg_seed;
    ck.net.rng_seed = net_seed;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string full = rd.block();
        const std::string blob = rd.block();
        const auto slash = full.find('/');
        if (slash == std::string::npos) throw FormatError("vsck: tensor name '" + full + "' lacks a set prefix in " + path);
        const std::string prefix = full.substr(0, slash), name = full.substr(slash + 1);
        Tensor32 t = decode_vstn(blob, path + " (" + full + ")");
        if (ck.kind == "joint") {
            if (prefix == "encoder") ck.triple.encoder.add(name, t);
            else if (prefix == "decoder") ck.triple.decoder.add(name, t);
            else if (prefix == "segnet") ck.triple.segnet.add(name, t);
            else throw FormatError("vsck: unexpected set '" + prefix + "' in joint checkpoint " + path);
        } else {
            if (prefix != "net") throw FormatError("vsck: unexpected set '" + prefix + "' in segnet checkpoint " + path);
            ck.net.add(name, t);
        }
    }
    if (rd.off != bytes.size()) throw FormatError("vsck: trailing bytes after tensors in " + path);
    return ck;
}

} // namespace vseg
