#include "pgx/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace pgx {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");

void put_u32(std::ofstream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t get_u32(std::ifstream& is, const std::filesystem::path& path) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) fail("checkpoint: truncated file " + path.string());
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail_io("checkpoint: cannot open for write: " + path.string());
    os.write("PGXC", 4);
    put_u32(os, kCheckpointVersion);
    for (const auto& [name, t] : tensors) {
        put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) put_u32(os, static_cast<uint32_t>(d));
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!os) fail("checkpoint: write failed: " + path.string());
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail_io("checkpoint: cannot open: " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "PGXC", 4) != 0)
        fail("checkpoint: bad magic in " + path.string());
    uint32_t version = get_u32(is, path);
    if (version != kCheckpointVersion)
        fail("checkpoint: unsupported format version " + std::to_string(version) + " in " + path.string());
    TensorMap out;
    while (true) {
        uint32_t name_len = 0;
        if (!is.read(reinterpret_cast<char*>(&name_len), 4)) break;  // clean EOF
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) fail("checkpoint: truncated name in " + path.string());
        uint32_t rank = get_u32(is, path);
        Shape shape(rank);
        for (uint32_t i = 0; i < rank; ++i) shape[i] = get_u32(is, path);
        TensorF t(shape);
        if (!is.read(reinterpret_cast<char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(float))))
            fail("checkpoint: truncated values for '" + name + "' in " + path.string());
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace pgx
