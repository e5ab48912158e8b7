#include "pgx/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "pgx/tensor.hpp"

namespace pgx {

double auc(const PredictionSet& preds) {
    int64_t n1 = 0, n0 = 0;
    for (const auto& p : preds) (p.true_label == 1 ? n1 : n0)++;
    if (n1 == 0 || n0 == 0) fail("auc: both classes must be present");

    // average ranks with tie groups sharing their mean rank
    std::vector<size_t> order(preds.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return preds[a].prob1 < preds[b].prob1; });
    double rank_sum_pos = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && preds[order[j + 1]].prob1 == preds[order[i]].prob1) ++j;
        double avg_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k)
            if (preds[order[k]].true_label == 1) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    double u = rank_sum_pos - static_cast<double>(n1) * (static_cast<double>(n1) + 1.0) / 2.0;
    return u / (static_cast<double>(n1) * static_cast<double>(n0));
}

ConfusionMetrics confusion_metrics(const PredictionSet& preds, double threshold) {
    int64_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (const auto& p : preds) {
        bool pos = p.prob1 >= threshold;
        if (p.true_label == 1)
            (pos ? tp : fn)++;
        else
            (pos ? fp : tn)++;
    }
    if (tp + fn == 0 || tn + fp == 0) fail("confusion_metrics: both classes must be present");
    ConfusionMetrics m;
    m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(preds.size());
    m.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
    m.specificity = static_cast<double>(tn) / static_cast<double>(tn + fp);
    return m;
}

double weighted_youden(double sensitivity, double specificity, double w) {
    return w * sensitivity + (1.0 - w) * specificity;
}

double weighted_youden_literature(double sensitivity, double specificity, double w) {
    return 2.0 * (w * sensitivity + (1.0 - w) * specificity) - 1.0;
}

MetricsReport compute_metrics(const PredictionSet& preds, const std::vector<double>& youden_weights) {
    MetricsReport r;
    r.auc = auc(preds);
    ConfusionMetrics c = confusion_metrics(preds);
    r.accuracy = c.accuracy;
    r.sensitivity = c.sensitivity;
    r.specificity = c.specificity;
    for (double w : youden_weights) r.j_w.emplace_back(w, weighted_youden(c.sensitivity, c.specificity, w));
    return r;
}

}  // namespace pgx
