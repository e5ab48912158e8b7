#pragma once

// Test-only reference implementations, kept independent of the library code
// they are used to check.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "pgx/graph.hpp"
#include "pgx/metrics.hpp"

namespace oracle {

// Brute-force pairwise AUC: O(n^2) enumeration, ties count one half.
inline double auc_bruteforce(const pgx::PredictionSet& preds) {
    double wins = 0;
    int64_t pairs = 0;
    for (const auto& p : preds) {
        if (p.true_label != 1) continue;
        for (const auto& q : preds) {
            if (q.true_label != 0) continue;
            ++pairs;
            if (p.prob1 > q.prob1)
                wins += 1.0;
            else if (p.prob1 == q.prob1)
                wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<size_t> order(v.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(ra.size());
    mb /= static_cast<double>(rb.size());
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(da * db);
}

// Central finite differences against reverse-mode gradients.
//
// BuildFn receives a tape plus the leaf ids for `inputs` (in order) and
// returns the scalar loss node. The same builder is re-invoked on perturbed
// copies of the inputs, so it must be a pure function of them.
template <typename BuildFn>
struct FdReport {
    double max_abs_err = 0;
    double max_grad_mag = 0;
    double rel_err() const { return max_abs_err / std::max(1e-12, max_grad_mag); }
};

template <typename BuildFn>
FdReport<BuildFn> fd_check(BuildFn build, const std::vector<pgx::TensorD>& inputs, double h = 1e-3) {
    pgx::Tape<double> tape;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) ids.push_back(tape.leaf(t, true));
    int loss = build(tape, ids);
    tape.backward(loss);

    auto eval = [&](const std::vector<pgx::TensorD>& xs) {
        pgx::Tape<double> t2;
        std::vector<int> id2;
        id2.reserve(xs.size());
        for (const auto& x : xs) id2.push_back(t2.leaf(x, false));
        return t2.val(build(t2, id2))[0];
    };

    FdReport<BuildFn> rep;
    for (size_t i = 0; i < inputs.size(); ++i) {
        // inputs that do not reach the loss carry an implicit zero gradient
        pgx::TensorD g = tape.grad_set(ids[i]) ? tape.grad(ids[i]) : pgx::TensorD::zeros(inputs[i].shape);
        for (int64_t k = 0; k < inputs[i].numel(); ++k) {
            std::vector<pgx::TensorD> plus = inputs, minus = inputs;
            plus[i][k] += h;
            minus[i][k] -= h;
            double fd = (eval(plus) - eval(minus)) / (2 * h);
            rep.max_abs_err = std::max(rep.max_abs_err, std::fabs(fd - g[k]));
            rep.max_grad_mag = std::max(rep.max_grad_mag, std::fabs(fd));
        }
    }
    return rep;
}

}  // namespace oracle
