#include "pgx/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "pgx/checkpoint.hpp"
#include "pgx/pgm.hpp"

namespace pgx {

void ManipulationSpec::validate(const HeadConfig& cfg) const {
    if (slice < 0 || slice >= cfg.n_slices) fail("spec: slice index " + std::to_string(slice) + " out of range");
    if (feature < 0 || feature >= cfg.m_features) fail("spec: feature index " + std::to_string(feature) + " out of range");
    if (cls < 0 || cls >= cfg.n_classes) fail("spec: class index " + std::to_string(cls) + " out of range");
    if (!(alpha > 0) || !std::isfinite(alpha)) fail("spec: step size alpha must be finite and > 0");
}

std::vector<double> feature_gradient(const PrognosticHead& head, int n, int m) {
    if (n < 0 || n >= head.cfg.n_slices || m < 0 || m >= head.cfg.m_features)
        fail("feature_gradient: indices out of range");
    const TensorF& w = head.w1[static_cast<size_t>(n)];
    std::vector<double> g(static_cast<size_t>(head.cfg.latent_dim));
    for (int d = 0; d < head.cfg.latent_dim; ++d) g[static_cast<size_t>(d)] = w.at2(m, d);
    return g;
}

std::vector<double> feature_gradient_autodiff(const PrognosticHead& head, int n, int m,
                                              const std::vector<float>& z_n) {
    if (static_cast<int>(z_n.size()) != head.cfg.latent_dim) fail("feature_gradient: latent dimension mismatch");
    Tape<double> tape;
    int z = tape.leaf(TensorD({head.cfg.latent_dim, 1}, std::vector<double>(z_n.begin(), z_n.end())), true);
    int w = tape.leaf(head.w1[static_cast<size_t>(n)].cast<double>(), false);
    int s_all = tape.matmul(w, z);  // [M,1]
    TensorD pick = TensorD::zeros({1, head.cfg.m_features});
    pick.at2(0, m) = 1.0;
    int s = tape.sum_all(tape.matmul(tape.leaf(pick), s_all));
    tape.backward(s);
    return tape.grad(z).data;
}

namespace {

double gradient_norm(const PrognosticHead& head, int n, int m) {
    auto g = feature_gradient(head, n, m);
    double acc = 0;
    for (double v : g) acc += v * v;
    return std::sqrt(acc);
}

}  // namespace

std::vector<double> manipulate(const std::vector<double>& z_n, const ManipulationSpec& spec,
                               const PrognosticHead& head) {
    spec.validate(head.cfg);
    if (static_cast<int>(z_n.size()) != head.cfg.latent_dim) fail("manipulate: latent dimension mismatch");
    auto g = feature_gradient(head, spec.slice, spec.feature);
    double norm = gradient_norm(head, spec.slice, spec.feature);
    double w2v = head.w2_at(spec.cls, spec.slice, spec.feature);
    if (norm == 0.0 || w2v == 0.0)
        fail("manipulate: feature (" + std::to_string(spec.slice) + "," + std::to_string(spec.feature) +
             ") is inert for class " + std::to_string(spec.cls));
    double sign = (w2v > 0 ? 1.0 : -1.0) * (spec.direction == Direction::Enhance ? 1.0 : -1.0);
    std::vector<double> out(z_n.size());
    for (size_t d = 0; d < z_n.size(); ++d) out[d] = z_n[d] + spec.alpha * sign * g[d] / norm;
    return out;
}

double predicted_contribution_change(const PrognosticHead& head, int n, int m, int c, double alpha) {
    if (n < 0 || n >= head.cfg.n_slices || m < 0 || m >= head.cfg.m_features || c < 0 || c >= head.cfg.n_classes)
        fail("predicted_contribution_change: indices out of range");
    return alpha * std::fabs(head.w2_at(c, n, m)) * gradient_norm(head, n, m);
}

ApplyVerifyResult apply_and_verify(const std::vector<std::vector<double>>& latents, const ManipulationSpec& spec,
                                   const PrognosticHead& head) {
    spec.validate(head.cfg);
    if (static_cast<int>(latents.size()) != head.cfg.n_slices)
        fail("apply_and_verify: expected " + std::to_string(head.cfg.n_slices) + " latents");

    // double-precision feature path mirroring extract_features
    auto features_of = [&](const std::vector<std::vector<double>>& ls) {
        std::vector<double> s(static_cast<size_t>(head.cfg.feature_count()));
        for (int n = 0; n < head.cfg.n_slices; ++n) {
            const TensorF& w = head.w1[static_cast<size_t>(n)];
            for (int m = 0; m < head.cfg.m_features; ++m) {
                double acc = 0;
                for (int d = 0; d < head.cfg.latent_dim; ++d)
                    acc += static_cast<double>(w.at2(m, d)) * ls[static_cast<size_t>(n)][static_cast<size_t>(d)];
                s[static_cast<size_t>(head.cfg.flat_index(n, m))] = acc;
            }
        }
        return s;
    };

    ApplyVerifyResult r;
    r.s_before = features_of(latents);
    int fi = head.cfg.flat_index(spec.slice, spec.feature);
    double w2v = head.w2_at(spec.cls, spec.slice, spec.feature);
    r.v_before = w2v * r.s_before[static_cast<size_t>(fi)];

    r.z_prime = manipulate(latents[static_cast<size_t>(spec.slice)], spec, head);
    auto latents_after = latents;
    latents_after[static_cast<size_t>(spec.slice)] = r.z_prime;
    r.s_after = features_of(latents_after);
    r.v_measured = w2v * r.s_after[static_cast<size_t>(fi)];

    double delta = predicted_contribution_change(head, spec.slice, spec.feature, spec.cls, spec.alpha);
    double signed_delta = spec.direction == Direction::Enhance ? delta : -delta;
    r.v_predicted = r.v_before + signed_delta;

    double err = std::fabs((r.v_measured - r.v_before) - signed_delta);
    if (err > 1e-5 * std::fabs(signed_delta))
        fail("apply_and_verify: measured contribution change " + std::to_string(r.v_measured - r.v_before) +
             " deviates from the closed form " + std::to_string(signed_delta) +
             " beyond 1e-5 relative; decomposition or normalization is broken");
    for (int n = 0; n < head.cfg.n_slices; ++n) {
        if (n == spec.slice) continue;
        for (int m = 0; m < head.cfg.m_features; ++m) {
            int i = head.cfg.flat_index(n, m);
            if (r.s_after[static_cast<size_t>(i)] != r.s_before[static_cast<size_t>(i)])
                fail("apply_and_verify: feature locality violated at slice " + std::to_string(n));
        }
    }
    return r;
}

CounterfactualResult generate_counterfactual(const CaseRecord& rec, const ManipulationSpec& spec,
                                             const CounterfactualContext& ctx, const PrognosticHead& head) {
    if (!ctx.model) fail("generate_counterfactual: model required");
    spec.validate(head.cfg);
    if (spec.slice >= static_cast<int>(rec.slices.size()))
        fail("generate_counterfactual: case '" + rec.case_id + "' has no slice " + std::to_string(spec.slice));
    const DiffusionAutoencoder& ae = *ctx.model;
    const NoiseSchedule& sched = ae.schedule();

    const TensorF& x0 = rec.slices[static_cast<size_t>(spec.slice)];
    std::vector<float> z_f = ae.encode(x0);
    std::vector<double> z(z_f.begin(), z_f.end());

    // per-case stochastic code: x_T = sqrt(abar_T) x0 + sqrt(1-abar_T) eps,
    // cached on disk so repeated runs decode from the identical seed
    TensorF x_T;
    std::filesystem::path cache_file;
    if (!ctx.cache_dir.empty()) {
        std::filesystem::create_directories(ctx.cache_dir);
        cache_file = ctx.cache_dir / (rec.case_id + "_s" + std::to_string(spec.slice) + "_xt.pgxc");
    }
    if (!cache_file.empty() && std::filesystem::exists(cache_file)) {
        TensorMap m = load_checkpoint(cache_file);
        auto it = m.find("x_T");
        if (it == m.end()) fail("counterfactual: cache file " + cache_file.string() + " lacks x_T");
        x_T = it->second;
    } else {
        RngStream rng(ctx.seed, rec.case_id, static_cast<uint64_t>(spec.slice));
        TensorF eps(x0.shape);
        for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = static_cast<float>(rng.normal());
        x_T = q_sample(x0, sched.steps, eps, sched);
        if (!cache_file.empty()) save_checkpoint(cache_file, {{"x_T", x_T}});
    }

    CounterfactualResult res;
    res.spec = spec;
    res.z_original = z;

    std::vector<std::vector<double>> latents;
    for (const auto& s : rec.slices) {
        auto zf = ae.encode(s);
        latents.emplace_back(zf.begin(), zf.end());
    }
    ApplyVerifyResult av = apply_and_verify(latents, spec, head);
    res.z_manipulated = av.z_prime;
    res.v_before = av.v_before;
    res.v_predicted = av.v_predicted;
    res.v_measured = av.v_measured;

    std::vector<float> z_cf(av.z_prime.begin(), av.z_prime.end());
    res.decoded_original = ae.reconstruct(z_f, x_T, ctx.stride);
    res.decoded_counterfactual = ae.reconstruct(z_cf, x_T, ctx.stride);

    if (ctx.measure_oracle) {
        res.factors_original = measure_factors(clamp_unit(res.decoded_original));
        res.factors_counterfactual = measure_factors(clamp_unit(res.decoded_counterfactual));
    }
    return res;
}

namespace {

uint8_t diff_to_gray(float d) {
    double g = 128.0 + 63.75 * static_cast<double>(d);
    return static_cast<uint8_t>(std::clamp(g + 0.5, 0.0, 255.0));
}

struct PanelKey {
    std::string case_id;
    int slice, feature, cls;
    bool operator<(const PanelKey& o) const {
        return std::tie(case_id, slice, feature, cls) < std::tie(o.case_id, o.slice, o.feature, o.cls);
    }
};

}  // namespace

void emit_panels(const std::vector<CounterfactualResult>& results, const std::filesystem::path& out_dir) {
    if (results.empty()) fail("emit_panels: no results");
    std::filesystem::create_directories(out_dir);

    std::map<PanelKey, std::map<Direction, const CounterfactualResult*>> grouped;
    for (const auto& r : results)
        grouped[{r.spec.case_id, r.spec.slice, r.spec.feature, r.spec.cls}][r.spec.direction] = &r;

    std::ofstream csv(out_dir / "counterfactuals.csv");
    if (!csv) fail("emit_panels: cannot open csv in " + out_dir.string());
    csv << "case_id,slice,feature,class,direction,alpha,v,v_pred,v_meas,d_lung_area,d_opacity,d_vessels\n";
    csv.precision(9);

    for (const auto& [key, dirs] : grouped) {
        const CounterfactualResult* any = dirs.begin()->second;
        int64_t H = any->decoded_original.shape[0], W = any->decoded_original.shape[1];
        int64_t panel_w = 3 * W + 2 * kPanelGutter;
        PgmImage panel;
        panel.height = H;
        panel.width = panel_w;
        panel.pixels.assign(static_cast<size_t>(H * panel_w), 128);

        auto blit = [&](const TensorF& img, int64_t col0) {
            TensorF c = clamp_unit(img);
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j)
                    panel.pixels[static_cast<size_t>(i * panel_w + col0 + j)] = unit_to_pixel(c[i * W + j]);
        };
        blit(any->decoded_original, 0);
        auto enh = dirs.find(Direction::Enhance);
        auto mit = dirs.find(Direction::Mitigate);
        if (enh != dirs.end()) blit(enh->second->decoded_counterfactual, W + kPanelGutter);
        if (mit != dirs.end()) blit(mit->second->decoded_counterfactual, 2 * (W + kPanelGutter));

        std::string stem = key.case_id + "_n" + std::to_string(key.slice) + "_m" + std::to_string(key.feature) +
                           "_c" + std::to_string(key.cls);
        write_pgm(out_dir / ("panel_" + stem + ".pgm"), panel);

        for (const auto& [dir, r] : dirs) {
            PgmImage diff;
            diff.height = H;
            diff.width = W;
            diff.pixels.resize(static_cast<size_t>(H * W));
            for (int64_t i = 0; i < H * W; ++i)
                diff.pixels[static_cast<size_t>(i)] =
                    diff_to_gray(r->decoded_counterfactual[i] - r->decoded_original[i]);
            write_pgm(out_dir / ("diff_" + std::string(direction_name(dir)) + "_" + stem + ".pgm"), diff);

            csv << key.case_id << ',' << key.slice << ',' << key.feature << ',' << key.cls << ','
                << direction_name(dir) << ',' << r->spec.alpha << ',' << r->v_before << ',' << r->v_predicted << ','
                << r->v_measured;
            if (r->factors_original && r->factors_counterfactual) {
                csv << ',' << (r->factors_counterfactual->lung_area - r->factors_original->lung_area) << ','
                    << (r->factors_counterfactual->opacity - r->factors_original->opacity) << ','
                    << (r->factors_counterfactual->vessels - r->factors_original->vessels);
            } else {
                csv << ",,,";
            }
            csv << "\n";
        }
    }
    if (!csv) fail("emit_panels: csv write failed");
}

}  // namespace pgx
