#pragma once

#include <string>
#include <vector>

namespace pgx {

struct Prediction {
    int true_label = 0;   // 0 or 1
    double prob1 = 0.0;   // predicted probability of class 1
};

using PredictionSet = std::vector<Prediction>;

// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
// ties counting one half. Errors if either class is absent.
double auc(const PredictionSet& preds);

struct ConfusionMetrics {
    double accuracy = 0, sensitivity = 0, specificity = 0;
};

// Threshold rule: prob1 >= threshold classifies as positive (ties positive).
ConfusionMetrics confusion_metrics(const PredictionSet& preds, double threshold = 0.5);

// J_w = w*Se + (1-w)*Sp. This is the form consistent with the reference
// operating points used in the test suite.
double weighted_youden(double sensitivity, double specificity, double w);

// The classical literature form, 2*(w*Se + (1-w)*Sp) - 1; kept for comparison.
double weighted_youden_literature(double sensitivity, double specificity, double w);

struct MetricsReport {
    double auc = 0, accuracy = 0, sensitivity = 0, specificity = 0;
    std::vector<std::pair<double, double>> j_w;  // (w, J_w)
};

MetricsReport compute_metrics(const PredictionSet& preds, const std::vector<double>& youden_weights = {0.5, 0.6});

}  // namespace pgx
