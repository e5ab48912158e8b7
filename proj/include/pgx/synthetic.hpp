#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pgx/rng.hpp"
#include "pgx/tensor.hpp"

namespace pgx {

// Planted per-slice semantic factors.
struct FactorVector {
    double lung_area_scale = 1.0;  // [0.5, 1.0]
    double opacity_level = 0.0;    // [0, 1]
    double vessel_density = 0.0;   // [0, 1]
};

struct FactorRange {
    double lo = 0, hi = 0;
    double draw(RngStream& rng) const { return rng.uniform(lo, hi); }
};

struct SliceFactorRanges {
    FactorRange lung_area, opacity, vessels;
};

// Decision rule evaluated on the factors of one designated slice:
// label 1 iff (opacity > opacity_thr AND vessels > vessel_thr)
//          OR lung_area < area_thr.
struct PlantedRule {
    int slice = 2;
    double opacity_thr = 0.6;
    double vessel_thr = 0.5;
    double area_thr = 0.65;
    bool evaluate(const std::vector<FactorVector>& factors) const;
};

struct GenConfig {
    int n_slices = 4;
    int height = 16, width = 16;
    double class1_prior = 0.45;
    PlantedRule rule;
    // factor ranges indexed [class][slice]
    std::vector<std::vector<SliceFactorRanges>> ranges;

    static GenConfig defaults(int n_slices = 4, int height = 16, int width = 16);
    void validate() const;
};

struct CaseRecord {
    std::string case_id;
    int label = 0;
    std::vector<TensorF> slices;        // [H,W] each, values in [-1, 1]
    std::vector<FactorVector> factors;  // empty for ingested external data
    bool has_factors() const { return !factors.empty(); }
};

// Deterministic for a given (seed, case_index, class_label, config).
CaseRecord generate_case(uint64_t seed, int64_t case_index, int class_label, const GenConfig& cfg);

// Renders one slice from explicit factors (used by generate_case and by
// factor-monotonicity tests).
TensorF render_slice(uint64_t seed, int64_t case_index, int slice_idx, const FactorVector& f, const GenConfig& cfg);

// Non-learned factor estimates measured from the image itself.
struct MeasuredFactors {
    double lung_area = 0;  // foreground fraction of the frame
    double opacity = 0;    // mean in-band excess intensity over the lung
    double vessels = 0;    // thin bright ridge pixels per frame pixel
    bool degenerate = false;
};

MeasuredFactors measure_factors(const TensorF& slice);

// ---------------------------------------------------------------------------
// Dataset manifests
// ---------------------------------------------------------------------------

struct ManifestRow {
    std::string case_id;
    int label = 0;
    std::string split;  // "train" | "val" | "test" | ""
    int slice_idx = 0;
    double lung_area = 0, opacity = 0, vessels = 0;  // planted ground truth; 0 for external data
    bool has_factors = true;
};

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<ManifestRow> rows;

    std::vector<std::string> case_ids() const;                      // unique, in first-seen order
    int label_of(const std::string& case_id) const;
    int slice_count(const std::string& case_id) const;
    std::filesystem::path slice_path(const std::string& case_id, int slice_idx) const;
    DatasetManifest filter_split(const std::string& split) const;
    std::vector<FactorVector> factors_of(const std::string& case_id) const;
};

void save_manifest_csv(const DatasetManifest& m, const std::filesystem::path& csv_path);
DatasetManifest load_manifest_csv(const std::filesystem::path& csv_path);

struct SplitResult {
    DatasetManifest train, val, test;
};

// Case-level disjoint, label-stratified split. Fractions are of the whole
// dataset; the remainder after test and val becomes train.
SplitResult split_dataset(const DatasetManifest& m, double test_fraction, double val_fraction, uint64_t seed);

// Tags rows in-place instead of returning three manifests.
void assign_splits(DatasetManifest& m, double test_fraction, double val_fraction, uint64_t seed);

// Ingest a directory of per-case PGM slices plus a (case_id,label) CSV.
// Slice files are expected as <case_id>_<k>.pgm with k starting at 0.
DatasetManifest load_external(const std::filesystem::path& dir, const std::filesystem::path& labels_csv);

// Reads a slice image from a manifest entry as a [-1,1] tensor.
TensorF load_slice(const DatasetManifest& m, const std::string& case_id, int slice_idx);

}  // namespace pgx
