#pragma once

#include <filesystem>
#include <string>

#include "pgx/tensor.hpp"

namespace pgx {

// Flat `key = value` configuration with '#' comments and dotted key prefixes.
// Unknown keys are rejected at load time.
struct RunConfig {
    std::string profile_name = "desk";
    int image_h = 16, image_w = 16;
    int latent_dim = 32;
    int base_width = 32;
    int emb_dim = 64;
    int schedule_steps = 100;
    double beta_min = 0.006, beta_max = 0.128;
    int schedule_stride = 5;
    int head_slices = 4, head_features = 2, head_classes = 2;
    double ae_lr = 2e-4;
    int ae_batch = 16, ae_epochs = 24;
    double head_lr = 1e-2;
    int head_batch = 8, head_epochs = 70;
    int data_cases = 600;
    double class1_prior = 0.45;
    double test_fraction = 0.2, val_fraction = 0.2;
    uint64_t seed = 42;
    double alpha_sigma = 2.0;
    double rho = 0.5;

    void validate() const;
    // canonical dump (sorted keys); its SHA-256 is the config hash
    std::string canonical() const;
    std::string hash() const;
};

RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& text, const std::string& origin = "<string>");

}  // namespace pgx
