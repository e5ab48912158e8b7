#pragma once

#include <filesystem>
#include <vector>

#include "pgx/diffusion.hpp"
#include "pgx/rng.hpp"
#include "pgx/synthetic.hpp"
#include "pgx/tensor.hpp"

namespace pgx {

struct HeadConfig {
    int n_slices = 4;    // N
    int m_features = 2;  // M per slice
    int n_classes = 2;   // C
    int latent_dim = 32;

    int feature_count() const { return n_slices * m_features; }
    // fixed flattening of (n, m) into the feature vector
    int flat_index(int n, int m) const { return n * m_features + m; }
    void validate() const;
};

// Two linear layers, no biases anywhere: s_{n,m} = <W1[n] row m, z_n>,
// y_c = <W2 row c, s>. The absence of bias terms is what makes the
// per-feature contribution decomposition sum exactly to the class score.
struct PrognosticHead {
    HeadConfig cfg;
    std::vector<TensorF> w1;  // N tensors of shape [M, D]
    TensorF w2;               // [C, N*M]

    static PrognosticHead init(HeadConfig cfg, uint64_t seed);
    void save(const std::filesystem::path& path) const;
    static PrognosticHead load(const std::filesystem::path& path);
    double w2_at(int c, int n, int m) const { return w2.at2(c, cfg.flat_index(n, m)); }
};

// Inference-side math runs in double over the float32 weights.
std::vector<double> extract_features(const std::vector<std::vector<float>>& latents, const PrognosticHead& head);

struct ScoreVector {
    std::vector<double> y;  // length C
    std::vector<double> p;  // softmax of y
};

ScoreVector score(const std::vector<double>& s, const PrognosticHead& head);

// Eq.-style weighted objective: -(1 - p_i) * log(p_i), natural log, with the
// probability floored at 1e-12 inside the log.
double weighted_loss(const std::vector<double>& y, int true_class);

// Partition [0, n_slices) into N contiguous, maximally even regions and draw
// one index uniformly from each; indices are returned in region order.
std::vector<int> sample_slices(int total_slices, int n_regions, RngStream& rng);

// Deterministic evaluation-time pick: the center slice of each region.
std::vector<int> region_centers(int total_slices, int n_regions);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct HeadTrainOptions {
    int epochs = 70;
    int batch = 8;
    double lr = 1e-2;
    uint64_t seed = 0;
};

struct HeadEpochStats {
    int epoch = 0;
    double train_loss = 0;
    double val_auc = 0;
};

struct HeadTrainResult {
    PrognosticHead head;  // checkpoint with the highest validation AUC
    std::vector<HeadEpochStats> history;
    int best_epoch = -1;
    double best_val_auc = 0;
};

// Latents per case (outer index = case order, inner = slice position).
using CaseLatents = std::vector<std::vector<std::vector<float>>>;

// Encodes every slice of every case with the frozen encoder.
CaseLatents encode_cases(const DatasetManifest& manifest, const DiffusionAutoencoder& ae);

// Trains W1/W2 on the weighted objective with per-epoch slice re-sampling;
// model selection keeps the epoch with the highest validation AUC.
HeadTrainResult train_head(const DatasetManifest& train, const DatasetManifest& val,
                           const DiffusionAutoencoder& ae, HeadConfig cfg, const HeadTrainOptions& opt);

// Same, but on precomputed latents (used by tests with synthetic latents).
HeadTrainResult train_head_on_latents(const CaseLatents& train_latents, const std::vector<int>& train_labels,
                                      const CaseLatents& val_latents, const std::vector<int>& val_labels,
                                      HeadConfig cfg, const HeadTrainOptions& opt);

// Probability of class 1 for one case under deterministic slice selection.
double predict_prob1(const std::vector<std::vector<float>>& case_latents, const PrognosticHead& head);

}  // namespace pgx
