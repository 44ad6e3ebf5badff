#include "gmx/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "gmx/error.hpp"

namespace gmx {

namespace {

constexpr char kMagic[4] = {'G', 'M', 'X', 'W'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kDtypeF32 = 0;

void require_little_endian() {
    const std::uint32_t probe = 1;
    unsigned char byte0;
    std::memcpy(&byte0, &probe, 1);
    if (byte0 != 1) throw IoError("weights: big-endian hosts are not supported");
}

void put_u32(std::string& out, std::uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), 4);
}

void put_f32(std::string& out, float v) {
    out.append(reinterpret_cast<const char*>(&v), 4);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IoError("weights: truncated archive");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    float f32() {
        need(4);
        float v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

struct LoadedTensor {
    Shape shape;
    std::vector<double> values;
};

}  // namespace

void save_weights(const std::string& path, const ParamStore& store) {
    require_little_endian();

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(store.size()));
    for (const auto& e : store.entries()) {
        put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out.append(e.name);
        const Shape& sh = e.tensor.shape();
        put_u32(out, static_cast<std::uint32_t>(sh.size()));
        for (int64_t d : sh) put_u32(out, static_cast<std::uint32_t>(d));
        put_u32(out, kDtypeF32);
        for (double v : e.tensor.data()) put_f32(out, static_cast<float>(v));
    }

    const std::filesystem::path target(path);
    const std::filesystem::path dir =
        target.has_parent_path() ? target.parent_path() : std::filesystem::path(".");
    const std::filesystem::path tmp = dir / (target.filename().string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("weights: cannot open '" + tmp.string() + "' for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        f.flush();
        if (!f) throw IoError("weights: write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, target, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("weights: cannot rename temp file onto '" + path + "'");
    }
}

void load_weights(const std::string& path, const ParamStore& store) {
    require_little_endian();

    std::string buf;
    {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("weights: cannot open '" + path + "'");
        std::ostringstream ss;
        ss << f.rdbuf();
        buf = ss.str();
    }

    Reader r{buf};
    const std::string magic = r.bytes(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw IoError("weights: bad magic in '" + path + "'");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw IoError("weights: unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32();

    // Stage the whole archive before touching the store.
    std::map<std::string, LoadedTensor> staged;
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        const std::uint32_t ndim = r.u32();
        Shape shape(ndim);
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<int64_t>(r.u32());
            numel *= static_cast<std::size_t>(shape[d]);
        }
        const std::uint32_t dtype = r.u32();
        if (dtype != kDtypeF32)
            throw IoError("weights: unsupported dtype " + std::to_string(dtype) +
                          " for tensor '" + name + "'");
        LoadedTensor lt;
        lt.shape = shape;
        lt.values.resize(numel);
        for (std::size_t i = 0; i < numel; ++i) lt.values[i] = static_cast<double>(r.f32());
        if (!staged.emplace(name, std::move(lt)).second)
            throw IoError("weights: duplicate tensor '" + name + "' in archive");
    }
    if (r.pos != buf.size()) throw IoError("weights: trailing bytes after last tensor");

    // Validate in store order so the first mismatch reported is deterministic
    // and names a tensor whenever one is missing or misshapen.
    for (const auto& e : store.entries()) {
        auto it = staged.find(e.name);
        if (it == staged.end())
            throw IoError("weights: archive is missing tensor '" + e.name + "'");
        if (it->second.shape != e.tensor.shape())
            throw IoError("weights: shape mismatch for '" + e.name + "': archive " +
                          shape_str(it->second.shape) + ", model " +
                          shape_str(e.tensor.shape()));
    }
    if (staged.size() != store.size())
        throw IoError("weights: archive has " + std::to_string(staged.size()) +
                      " tensors, model expects " + std::to_string(store.size()));

    // All checks passed; commit.
    for (const auto& e : store.entries()) {
        Tensor t = e.tensor;
        t.data() = staged.at(e.name).values;
    }
}

}  // namespace gmx
