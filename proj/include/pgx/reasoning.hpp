#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pgx/head.hpp"

namespace pgx {

// Contribution of each feature to the class-c score:
// v^(c)_{n,m} = W2[c][n,m] * s[n,m]; the entries sum exactly to y_c.
struct DecisionVector {
    int cls = 0;
    std::vector<double> v;
};

DecisionVector decision_vector(const std::vector<double>& s, const PrognosticHead& head, int cls);

struct CaseReasoning {
    std::string case_id;
    int true_label = 0;
    int predicted = 0;
    std::vector<double> y;
    std::vector<double> s;
    std::vector<std::vector<double>> v;  // [class][feature]
};

struct CohortReasoning {
    HeadConfig cfg;
    std::vector<CaseReasoning> cases;
    // per class: mean contribution over cases predicted as that class (in)
    // and over all other cases (out); undefined when a side is empty
    std::vector<std::vector<double>> mu_in, mu_out;
    std::vector<bool> stats_defined;
    std::vector<int> predicted_count;
};

CohortReasoning cohort_reasoning(const CaseLatents& latents, const std::vector<std::string>& case_ids,
                                 const std::vector<int>& labels, const PrognosticHead& head);

// Convenience wrapper that encodes the manifest cohort first.
CohortReasoning cohort_reasoning(const DatasetManifest& manifest, const DiffusionAutoencoder& ae,
                                 const PrognosticHead& head);

struct ClassSpecificFeature {
    int slice = 0, feature = 0;
    double sigma = 0;   // mu_in - mu_out
    double mu_in = 0, mu_out = 0;
};

struct ClassSpecificSet {
    int cls = 0;
    std::vector<ClassSpecificFeature> features;  // sorted by descending sigma
};

// Features with positive in-class mean contribution whose specificity score
// reaches rho times the best score. An empty set is returned when no feature
// separates the classes at all.
ClassSpecificSet identify_class_specific(const CohortReasoning& cohort, int cls, double rho = 0.5);

// reasoning.csv + heatmap.pgm (rows = cases, cols = C*N*M contributions).
// Gray mapping: g = round(255*(v - min)/(max - min)) over the whole matrix,
// all-128 when the matrix is constant.
void emit_reasoning_csv(const CohortReasoning& cohort, const std::filesystem::path& csv_path);
void emit_reasoning_heatmap(const CohortReasoning& cohort, const std::filesystem::path& pgm_path);
// per-class slice of the same globally-normalized matrix
void emit_reasoning_heatmap_class(const CohortReasoning& cohort, int cls, const std::filesystem::path& pgm_path);
void emit_class_specific_csv(const std::vector<ClassSpecificSet>& sets, const std::filesystem::path& csv_path);

}  // namespace pgx
