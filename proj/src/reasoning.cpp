#include "pgx/reasoning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "pgx/pgm.hpp"

namespace pgx {

DecisionVector decision_vector(const std::vector<double>& s, const PrognosticHead& head, int cls) {
    if (cls < 0 || cls >= head.cfg.n_classes) fail("decision_vector: class out of range");
    if (static_cast<int>(s.size()) != head.cfg.feature_count())
        fail("decision_vector: feature vector length mismatch");
    DecisionVector dv;
    dv.cls = cls;
    dv.v.resize(s.size());
    for (int i = 0; i < head.cfg.feature_count(); ++i)
        dv.v[static_cast<size_t>(i)] = static_cast<double>(head.w2.at2(cls, i)) * s[static_cast<size_t>(i)];
    return dv;
}

CohortReasoning cohort_reasoning(const CaseLatents& latents, const std::vector<std::string>& case_ids,
                                 const std::vector<int>& labels, const PrognosticHead& head) {
    if (latents.empty()) fail("cohort_reasoning: empty cohort");
    if (latents.size() != case_ids.size() || latents.size() != labels.size())
        fail("cohort_reasoning: case ids / labels / latents size mismatch");
    const HeadConfig& cfg = head.cfg;
    CohortReasoning out;
    out.cfg = cfg;
    for (size_t i = 0; i < latents.size(); ++i) {
        auto centers = region_centers(static_cast<int>(latents[i].size()), cfg.n_slices);
        std::vector<std::vector<float>> picked;
        for (int idx : centers) picked.push_back(latents[i][static_cast<size_t>(idx)]);
        CaseReasoning cr;
        cr.case_id = case_ids[i];
        cr.true_label = labels[i];
        cr.s = extract_features(picked, head);
        ScoreVector sv = score(cr.s, head);
        cr.y = sv.y;
        cr.predicted = static_cast<int>(std::max_element(sv.y.begin(), sv.y.end()) - sv.y.begin());
        for (int c = 0; c < cfg.n_classes; ++c) cr.v.push_back(decision_vector(cr.s, head, c).v);
        out.cases.push_back(std::move(cr));
    }

    const int F = cfg.feature_count();
    out.mu_in.assign(static_cast<size_t>(cfg.n_classes), std::vector<double>(static_cast<size_t>(F), 0.0));
    out.mu_out.assign(static_cast<size_t>(cfg.n_classes), std::vector<double>(static_cast<size_t>(F), 0.0));
    out.stats_defined.assign(static_cast<size_t>(cfg.n_classes), false);
    out.predicted_count.assign(static_cast<size_t>(cfg.n_classes), 0);
    for (const auto& cr : out.cases) out.predicted_count[static_cast<size_t>(cr.predicted)]++;
    for (int c = 0; c < cfg.n_classes; ++c) {
        int64_t n_in = out.predicted_count[static_cast<size_t>(c)];
        int64_t n_out = static_cast<int64_t>(out.cases.size()) - n_in;
        if (n_in == 0 || n_out == 0) continue;  // flagged undefined, not fabricated
        for (const auto& cr : out.cases) {
            auto& target = (cr.predicted == c) ? out.mu_in[static_cast<size_t>(c)] : out.mu_out[static_cast<size_t>(c)];
            for (int f = 0; f < F; ++f) target[static_cast<size_t>(f)] += cr.v[static_cast<size_t>(c)][static_cast<size_t>(f)];
        }
        for (int f = 0; f < F; ++f) {
            out.mu_in[static_cast<size_t>(c)][static_cast<size_t>(f)] /= static_cast<double>(n_in);
            out.mu_out[static_cast<size_t>(c)][static_cast<size_t>(f)] /= static_cast<double>(n_out);
        }
        out.stats_defined[static_cast<size_t>(c)] = true;
    }
    return out;
}

CohortReasoning cohort_reasoning(const DatasetManifest& manifest, const DiffusionAutoencoder& ae,
                                 const PrognosticHead& head) {
    auto ids = manifest.case_ids();
    if (ids.empty()) fail("cohort_reasoning: empty cohort");
    CaseLatents latents = encode_cases(manifest, ae);
    std::vector<int> labels;
    for (const auto& id : ids) labels.push_back(manifest.label_of(id));
    return cohort_reasoning(latents, ids, labels, head);
}

ClassSpecificSet identify_class_specific(const CohortReasoning& cohort, int cls, double rho) {
    if (cls < 0 || cls >= cohort.cfg.n_classes) fail("identify_class_specific: class out of range");
    if (!(rho > 0.0 && rho <= 1.0)) fail("identify_class_specific: rho must be in (0, 1]");
    if (!cohort.stats_defined[static_cast<size_t>(cls)])
        fail("identify_class_specific: statistics undefined for class " + std::to_string(cls) +
             " (cohort has no cases predicted as one side); enlarge or rebalance the cohort");
    const int F = cohort.cfg.feature_count();
    const auto& mu_in = cohort.mu_in[static_cast<size_t>(cls)];
    const auto& mu_out = cohort.mu_out[static_cast<size_t>(cls)];
    double sigma_max = 0;
    for (int f = 0; f < F; ++f) sigma_max = std::max(sigma_max, mu_in[static_cast<size_t>(f)] - mu_out[static_cast<size_t>(f)]);
    ClassSpecificSet out;
    out.cls = cls;
    if (sigma_max <= 0) return out;  // nothing separates the classes
    for (int n = 0; n < cohort.cfg.n_slices; ++n)
        for (int m = 0; m < cohort.cfg.m_features; ++m) {
            int f = cohort.cfg.flat_index(n, m);
            double sigma = mu_in[static_cast<size_t>(f)] - mu_out[static_cast<size_t>(f)];
            if (mu_in[static_cast<size_t>(f)] > 0 && sigma > 0 && sigma >= rho * sigma_max)
                out.features.push_back({n, m, sigma, mu_in[static_cast<size_t>(f)], mu_out[static_cast<size_t>(f)]});
        }
    std::sort(out.features.begin(), out.features.end(),
              [](const ClassSpecificFeature& a, const ClassSpecificFeature& b) {
                  if (a.sigma != b.sigma) return a.sigma > b.sigma;
                  return std::make_pair(a.slice, a.feature) < std::make_pair(b.slice, b.feature);
              });
    return out;
}

void emit_reasoning_csv(const CohortReasoning& cohort, const std::filesystem::path& csv_path) {
    std::ofstream os(csv_path);
    if (!os) fail("reasoning: cannot open for write: " + csv_path.string());
    os << "case_id,true_label,predicted";
    for (int c = 0; c < cohort.cfg.n_classes; ++c)
        for (int n = 0; n < cohort.cfg.n_slices; ++n)
            for (int m = 0; m < cohort.cfg.m_features; ++m) os << ",v" << c << "_" << n << "_" << m;
    os << "\n";
    os.precision(9);
    for (const auto& cr : cohort.cases) {
        os << cr.case_id << ',' << cr.true_label << ',' << cr.predicted;
        for (int c = 0; c < cohort.cfg.n_classes; ++c)
            for (int f = 0; f < cohort.cfg.feature_count(); ++f)
                os << ',' << cr.v[static_cast<size_t>(c)][static_cast<size_t>(f)];
        os << "\n";
    }
    if (!os) fail("reasoning: write failed: " + csv_path.string());
}

namespace {

struct GrayMap {
    double lo = 0, hi = 0;
    uint8_t map(double v) const {
        if (hi <= lo) return 128;
        double g = 255.0 * (v - lo) / (hi - lo);
        return static_cast<uint8_t>(std::clamp(g + 0.5, 0.0, 255.0));
    }
};

GrayMap global_gray_map(const CohortReasoning& cohort) {
    GrayMap gm;
    bool first = true;
    for (const auto& cr : cohort.cases)
        for (const auto& vc : cr.v)
            for (double v : vc) {
                if (first) {
                    gm.lo = gm.hi = v;
                    first = false;
                } else {
                    gm.lo = std::min(gm.lo, v);
                    gm.hi = std::max(gm.hi, v);
                }
            }
    return gm;
}

}  // namespace

void emit_reasoning_heatmap(const CohortReasoning& cohort, const std::filesystem::path& pgm_path) {
    GrayMap gm = global_gray_map(cohort);
    const int F = cohort.cfg.feature_count();
    PgmImage img;
    img.height = static_cast<int64_t>(cohort.cases.size());
    img.width = static_cast<int64_t>(cohort.cfg.n_classes) * F;
    img.pixels.resize(static_cast<size_t>(img.height * img.width));
    for (size_t r = 0; r < cohort.cases.size(); ++r)
        for (int c = 0; c < cohort.cfg.n_classes; ++c)
            for (int f = 0; f < F; ++f)
                img.pixels[r * static_cast<size_t>(img.width) + static_cast<size_t>(c * F + f)] =
                    gm.map(cohort.cases[r].v[static_cast<size_t>(c)][static_cast<size_t>(f)]);
    write_pgm(pgm_path, img);
}

void emit_reasoning_heatmap_class(const CohortReasoning& cohort, int cls, const std::filesystem::path& pgm_path) {
    GrayMap gm = global_gray_map(cohort);
    const int F = cohort.cfg.feature_count();
    PgmImage img;
    img.height = static_cast<int64_t>(cohort.cases.size());
    img.width = F;
    img.pixels.resize(static_cast<size_t>(img.height * img.width));
    for (size_t r = 0; r < cohort.cases.size(); ++r)
        for (int f = 0; f < F; ++f)
            img.pixels[r * static_cast<size_t>(F) + static_cast<size_t>(f)] =
                gm.map(cohort.cases[r].v[static_cast<size_t>(cls)][static_cast<size_t>(f)]);
    write_pgm(pgm_path, img);
}

void emit_class_specific_csv(const std::vector<ClassSpecificSet>& sets, const std::filesystem::path& csv_path) {
    std::ofstream os(csv_path);
    if (!os) fail("reasoning: cannot open for write: " + csv_path.string());
    os << "class,slice,feature,sigma,mu_in,mu_out\n";
    os.precision(9);
    for (const auto& set : sets)
        for (const auto& f : set.features)
            os << set.cls << ',' << f.slice << ',' << f.feature << ',' << f.sigma << ',' << f.mu_in << ','
               << f.mu_out << "\n";
    if (!os) fail("reasoning: write failed: " + csv_path.string());
}

}  // namespace pgx
