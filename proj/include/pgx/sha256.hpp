#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace pgx {

// Minimal SHA-256, used for run manifests and reproducibility checks.
class Sha256 {
public:
    Sha256();
    void update(const void* data, size_t len);
    std::string hex_digest();  // finalizes

    static std::string of_bytes(const void* data, size_t len);
    static std::string of_string(const std::string& s);
    static std::string of_file(const std::filesystem::path& path);

private:
    void process_block(const uint8_t* block);
    uint32_t h_[8];
    uint8_t buf_[64];
    size_t buf_len_ = 0;
    uint64_t total_ = 0;
    bool finalized_ = false;
};

}  // namespace pgx
