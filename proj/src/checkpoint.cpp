#include "msd/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace msd {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'D', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw FormatError("truncated checkpoint");
    return v;
}

void put_str(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_str(std::istream& in) {
    const std::uint32_t n = get_u32(in);
    if (n > (1u << 20)) throw FormatError("implausible string length in checkpoint");
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw FormatError("truncated checkpoint");
    return s;
}

void put_params(std::ostream& out, const ParamSet<float>& ps) {
    put_u32(out, static_cast<std::uint32_t>(ps.entries.size()));
    for (const auto& e : ps.entries) {
        put_str(out, e.name);
        put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
        for (int d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(e.value.data()),
                  static_cast<std::streamsize>(e.value.size() * sizeof(float)));
    }
}

ParamSet<float> get_params(std::istream& in) {
    ParamSet<float> ps;
    const std::uint32_t count = get_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = get_str(in);
        const std::uint32_t ndim = get_u32(in);
        if (ndim > 8) throw FormatError("implausible parameter rank in checkpoint");
        std::vector<int> shape(ndim);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = static_cast<int>(get_u32(in));
            n *= static_cast<std::size_t>(d);
        }
        auto& e = ps.add(name, shape);
        in.read(reinterpret_cast<char*>(e.value.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
        if (in.gcount() != static_cast<std::streamsize>(n * sizeof(float)))
            throw FormatError("truncated parameter blob: " + name);
    }
    return ps;
}

}  // namespace

const ParamSet<float>& Checkpoint::section(const std::string& name) const {
    for (const auto& [n, ps] : sections)
        if (n == name) return ps;
    throw ContractError("checkpoint has no section: " + name);
}

ParamSet<float>& Checkpoint::section(const std::string& name) {
    for (auto& [n, ps] : sections)
        if (n == name) return ps;
    throw ContractError("checkpoint has no section: " + name);
}

bool Checkpoint::has_section(const std::string& name) const {
    for (const auto& [n, ps] : sections)
        if (n == name) return true;
    return false;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IOError("cannot open for writing: " + path);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(ckpt.kind));
    put_u32(out, static_cast<std::uint32_t>(ckpt.frozen_variant));
    const auto& e = ckpt.model.enc;
    for (int v : {e.patch_size, e.embed_dim, e.depth, e.heads, e.mid_layer, e.ms_channels,
                  e.optical_channels, e.mlp_hidden, e.pos_grid})
        put_u32(out, static_cast<std::uint32_t>(v));
    for (int v : {ckpt.model.heads.hidden, ckpt.model.heads.bottleneck_ms,
                  ckpt.model.heads.bottleneck_opt})
        put_u32(out, static_cast<std::uint32_t>(v));
    put_u32(out, static_cast<std::uint32_t>(ckpt.sections.size()));
    for (const auto& [name, ps] : ckpt.sections) {
        put_str(out, name);
        put_params(out, ps);
    }
    if (!out) throw IOError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open: " + path);
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    const std::uint32_t version = get_u32(in);
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.kind = static_cast<CheckpointKind>(get_u32(in));
    ckpt.frozen_variant = static_cast<FrozenVariantTag>(get_u32(in));
    auto& e = ckpt.model.enc;
    for (int* v : {&e.patch_size, &e.embed_dim, &e.depth, &e.heads, &e.mid_layer, &e.ms_channels,
                   &e.optical_channels, &e.mlp_hidden, &e.pos_grid})
        *v = static_cast<int>(get_u32(in));
    for (int* v : {&ckpt.model.heads.hidden, &ckpt.model.heads.bottleneck_ms,
                   &ckpt.model.heads.bottleneck_opt})
        *v = static_cast<int>(get_u32(in));
    const std::uint32_t n_sections = get_u32(in);
    if (n_sections > 64) throw FormatError("implausible section count in checkpoint");
    for (std::uint32_t i = 0; i < n_sections; ++i) {
        std::string name = get_str(in);
        ckpt.sections.emplace_back(std::move(name), get_params(in));
    }
    return ckpt;
}

}  // namespace msd
