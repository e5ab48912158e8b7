#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pgx/config.hpp"
#include "pgx/counterfactual.hpp"
#include "pgx/metrics.hpp"
#include "pgx/reasoning.hpp"

namespace pgx {

// Stage drivers shared by the CLI and the acceptance suite. Every stage
// writes its outputs plus a run.json manifest recording the config hash,
// seed, input checkpoint hashes, and the hash of every emitted file.

void stage_gen_data(const RunConfig& cfg, const std::filesystem::path& out_dir);

struct AeTrainSummary {
    int steps = 0;
    double first_epoch_loss = 0;
    double final_epoch_loss = 0;
};

AeTrainSummary stage_train_ae(const RunConfig& cfg, const std::filesystem::path& data_dir,
                              const std::filesystem::path& out_dir);

struct ReconSummary {
    int n_slices = 0;
    double mean_l1 = 0;
};

ReconSummary stage_reconstruct(const RunConfig& cfg, const std::filesystem::path& ae_path,
                               const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                               const std::string& split, int limit_cases = 0);

struct HeadTrainSummary {
    int best_epoch = -1;
    double best_val_auc = 0;
};

HeadTrainSummary stage_train_head(const RunConfig& cfg, const std::filesystem::path& ae_path,
                                  const std::filesystem::path& data_dir, const std::filesystem::path& out_dir);

MetricsReport stage_eval(const RunConfig& cfg, const std::filesystem::path& ae_path,
                         const std::filesystem::path& head_path, const std::filesystem::path& data_dir,
                         const std::filesystem::path& out_dir, const std::string& split);

std::vector<ClassSpecificSet> stage_reason(const RunConfig& cfg, const std::filesystem::path& ae_path,
                                           const std::filesystem::path& head_path,
                                           const std::filesystem::path& data_dir,
                                           const std::filesystem::path& out_dir, const std::string& split,
                                           double rho);

struct CounterfactualOptions {
    std::vector<std::string> case_ids;    // empty: take the first `limit` cases of `split`
    std::string split = "test";
    int limit = 4;
    bool auto_features = true;            // take the class-specific set of `cls`
    std::vector<std::pair<int, int>> features;  // explicit (n, m) when not auto
    int cls = 1;
    bool enhance = true, mitigate = true;
    double alpha_sigma = 2.0;
    std::string reference_split = "train";  // cohort for sigma and auto features
};

std::vector<CounterfactualResult> stage_counterfactual(const RunConfig& cfg, const std::filesystem::path& ae_path,
                                                       const std::filesystem::path& head_path,
                                                       const std::filesystem::path& data_dir,
                                                       const std::filesystem::path& out_dir,
                                                       const CounterfactualOptions& opt);

// Builds a CaseRecord (slices + label + planted factors when present) from a
// manifest entry.
CaseRecord case_from_manifest(const DatasetManifest& manifest, const std::string& case_id);

// Per-feature standard deviation of s over a cohort; the unit for alpha.
std::vector<double> cohort_feature_stddev(const CohortReasoning& cohort);

}  // namespace pgx
