#include "pgx/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "pgx/pgm.hpp"
#include "pgx/sha256.hpp"

namespace pgx {

namespace {

namespace fs = std::filesystem;

ModelConfig model_config_of(const RunConfig& cfg) {
    ModelConfig mc;
    mc.height = cfg.image_h;
    mc.width = cfg.image_w;
    mc.latent_dim = cfg.latent_dim;
    mc.base_width = cfg.base_width;
    mc.emb_dim = cfg.emb_dim;
    return mc;
}

HeadConfig head_config_of(const RunConfig& cfg) {
    HeadConfig hc;
    hc.n_slices = cfg.head_slices;
    hc.m_features = cfg.head_features;
    hc.n_classes = cfg.head_classes;
    hc.latent_dim = cfg.latent_dim;
    return hc;
}

DatasetManifest load_data(const fs::path& data_dir) {
    fs::path csv = data_dir / "manifest.csv";
    if (!fs::exists(csv)) fail_io("pipeline: no manifest.csv under " + data_dir.string());
    return load_manifest_csv(csv);
}

DiffusionAutoencoder load_model(const fs::path& ae_path) {
    if (!fs::exists(ae_path)) fail_io("pipeline: missing checkpoint " + ae_path.string());
    return DiffusionAutoencoder::load(ae_path);
}

PrognosticHead load_head_ckpt(const fs::path& head_path) {
    if (!fs::exists(head_path)) fail_io("pipeline: missing checkpoint " + head_path.string());
    return PrognosticHead::load(head_path);
}

// run.json: config hash, seed, input checkpoint hashes, output file hashes
void write_run_manifest(const fs::path& out_dir, const std::string& stage, const RunConfig& cfg,
                        const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
    nlohmann::json j;
    j["stage"] = stage;
    j["config_hash"] = cfg.hash();
    j["seed"] = cfg.seed;
    nlohmann::json in_j = nlohmann::json::object();
    for (const auto& p : inputs) in_j[p.filename().string()] = Sha256::of_file(p);
    j["inputs"] = in_j;
    nlohmann::json out_j = nlohmann::json::object();
    for (const auto& p : outputs) out_j[fs::relative(p, out_dir).string()] = Sha256::of_file(p);
    j["outputs"] = out_j;
    std::ofstream os(out_dir / "run.json");
    if (!os) fail_io("pipeline: cannot write run manifest in " + out_dir.string());
    os << j.dump(2) << "\n";
}

TensorF batch_of(const std::vector<const TensorF*>& slices) {
    int64_t H = slices[0]->shape[0], W = slices[0]->shape[1];
    TensorF out({static_cast<int64_t>(slices.size()), 1, H, W});
    for (size_t b = 0; b < slices.size(); ++b)
        std::copy(slices[b]->data.begin(), slices[b]->data.end(), out.data.begin() + static_cast<int64_t>(b) * H * W);
    return out;
}

// the stochastic code policy shared by reconstruct and counterfactual:
// x_T = q_sample(x0, T) with a per-(case, slice) named noise stream
TensorF stochastic_code(const TensorF& x0, const NoiseSchedule& sched, uint64_t seed, const std::string& case_id,
                        int slice_idx) {
    RngStream rng(seed, case_id, static_cast<uint64_t>(slice_idx));
    TensorF eps(x0.shape);
    for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = static_cast<float>(rng.normal());
    return q_sample(x0, sched.steps, eps, sched);
}

}  // namespace

CaseRecord case_from_manifest(const DatasetManifest& manifest, const std::string& case_id) {
    CaseRecord rec;
    rec.case_id = case_id;
    rec.label = manifest.label_of(case_id);
    int n = manifest.slice_count(case_id);
    if (n == 0) fail("pipeline: case '" + case_id + "' has no slices");
    for (int k = 0; k < n; ++k) rec.slices.push_back(load_slice(manifest, case_id, k));
    rec.factors = manifest.factors_of(case_id);
    return rec;
}

void stage_gen_data(const RunConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    GenConfig gen = GenConfig::defaults(cfg.head_slices, cfg.image_h, cfg.image_w);
    gen.class1_prior = cfg.class1_prior;
    gen.validate();
    fs::create_directories(out_dir / "slices");

    DatasetManifest manifest;
    manifest.root = out_dir;
    RngStream label_rng(cfg.seed, "label");
    std::vector<fs::path> outputs;
    for (int i = 0; i < cfg.data_cases; ++i) {
        int label = label_rng.uniform() < cfg.class1_prior ? 1 : 0;
        CaseRecord rec = generate_case(cfg.seed, i, label, gen);
        for (int k = 0; k < static_cast<int>(rec.slices.size()); ++k) {
            fs::path p = manifest.slice_path(rec.case_id, k);
            write_pgm(p, tensor_to_pgm(rec.slices[static_cast<size_t>(k)]));
            outputs.push_back(p);
            ManifestRow row;
            row.case_id = rec.case_id;
            row.label = rec.label;
            row.slice_idx = k;
            row.lung_area = rec.factors[static_cast<size_t>(k)].lung_area_scale;
            row.opacity = rec.factors[static_cast<size_t>(k)].opacity_level;
            row.vessels = rec.factors[static_cast<size_t>(k)].vessel_density;
            manifest.rows.push_back(row);
        }
    }
    assign_splits(manifest, cfg.test_fraction, cfg.val_fraction, cfg.seed);
    fs::path csv = out_dir / "manifest.csv";
    save_manifest_csv(manifest, csv);
    outputs.push_back(csv);
    write_run_manifest(out_dir, "gen-data", cfg, {}, outputs);
}

AeTrainSummary stage_train_ae(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    DatasetManifest manifest = load_data(data_dir);
    DatasetManifest train = manifest.filter_split("train");
    if (train.rows.empty()) fail("train-ae: empty train split");

    std::vector<TensorF> slices;
    for (const auto& id : train.case_ids())
        for (int k = 0; k < train.slice_count(id); ++k) slices.push_back(load_slice(train, id, k));

    DiffusionAutoencoder model(model_config_of(cfg), NoiseSchedule::make(cfg.schedule_steps, cfg.beta_min, cfg.beta_max));
    model.init_params(cfg.seed);
    Adam<float> adam(cfg.ae_lr);
    RngStream shuffle(cfg.seed, "ae.shuffle"), t_rng(cfg.seed, "ae.t"), noise(cfg.seed, "ae.noise");

    std::ofstream log(out_dir / "ae_train_log.csv");
    log << "epoch,mean_loss\n";
    log.precision(7);

    AeTrainSummary summary;
    std::vector<size_t> order(slices.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < cfg.ae_epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle.uniform_int(static_cast<int64_t>(i)))]);
        double loss_sum = 0;
        int batches = 0;
        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.ae_batch)) {
            size_t bsz = std::min(static_cast<size_t>(cfg.ae_batch), order.size() - off);
            std::vector<const TensorF*> ptrs;
            for (size_t b = 0; b < bsz; ++b) ptrs.push_back(&slices[order[off + b]]);
            loss_sum += model.train_step(batch_of(ptrs), adam, t_rng, noise);
            ++batches;
            ++summary.steps;
        }
        double mean_loss = loss_sum / std::max(1, batches);
        log << epoch << ',' << mean_loss << "\n";
        if (epoch == 0) summary.first_epoch_loss = mean_loss;
        summary.final_epoch_loss = mean_loss;
    }
    fs::path ckpt = out_dir / "ae.pgxc";
    model.save(ckpt);
    write_run_manifest(out_dir, "train-ae", cfg, {}, {ckpt, out_dir / "ae_train_log.csv"});
    return summary;
}

ReconSummary stage_reconstruct(const RunConfig& cfg, const fs::path& ae_path, const fs::path& data_dir,
                               const fs::path& out_dir, const std::string& split, int limit_cases) {
    cfg.validate();
    fs::create_directories(out_dir);
    DiffusionAutoencoder model = load_model(ae_path);
    DatasetManifest manifest = load_data(data_dir);
    DatasetManifest part = split.empty() ? manifest : manifest.filter_split(split);
    auto ids = part.case_ids();
    if (ids.empty()) fail("reconstruct: no cases in split '" + split + "'");
    if (limit_cases > 0 && static_cast<int>(ids.size()) > limit_cases)
        ids.resize(static_cast<size_t>(limit_cases));

    std::ofstream err_csv(out_dir / "recon_error.csv");
    err_csv << "case_id,slice_idx,l1\n";
    err_csv.precision(7);

    ReconSummary summary;
    double total = 0;
    std::vector<fs::path> outputs;
    for (const auto& id : ids) {
        for (int k = 0; k < part.slice_count(id); ++k) {
            TensorF x0 = load_slice(part, id, k);
            std::vector<float> z = model.encode(x0);
            TensorF x_T = stochastic_code(x0, model.schedule(), cfg.seed, id, k);
            TensorF recon = clamp_unit(model.reconstruct(z, x_T, cfg.schedule_stride));
            double l1 = 0;
            for (int64_t i = 0; i < x0.numel(); ++i) l1 += std::fabs(static_cast<double>(recon[i]) - x0[i]);
            l1 /= static_cast<double>(x0.numel());
            err_csv << id << ',' << k << ',' << l1 << "\n";
            total += l1;
            ++summary.n_slices;
            fs::path p = out_dir / ("recon_" + id + "_" + std::to_string(k) + ".pgm");
            write_pgm(p, tensor_to_pgm(recon));
            outputs.push_back(p);
        }
    }
    summary.mean_l1 = total / std::max(1, summary.n_slices);
    err_csv.close();
    outputs.push_back(out_dir / "recon_error.csv");
    write_run_manifest(out_dir, "reconstruct", cfg, {ae_path}, outputs);
    return summary;
}

HeadTrainSummary stage_train_head(const RunConfig& cfg, const fs::path& ae_path, const fs::path& data_dir,
                                  const fs::path& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    DiffusionAutoencoder model = load_model(ae_path);
    DatasetManifest manifest = load_data(data_dir);
    DatasetManifest train = manifest.filter_split("train"), val = manifest.filter_split("val");
    HeadTrainOptions opt;
    opt.epochs = cfg.head_epochs;
    opt.batch = cfg.head_batch;
    opt.lr = cfg.head_lr;
    opt.seed = cfg.seed;
    HeadTrainResult result = train_head(train, val, model, head_config_of(cfg), opt);

    std::ofstream hist(out_dir / "head_history.csv");
    hist << "epoch,train_loss,val_auc\n";
    hist.precision(7);
    for (const auto& st : result.history) hist << st.epoch << ',' << st.train_loss << ',' << st.val_auc << "\n";
    hist.close();

    fs::path ckpt = out_dir / "head.pgxc";
    result.head.save(ckpt);
    write_run_manifest(out_dir, "train-head", cfg, {ae_path}, {ckpt, out_dir / "head_history.csv"});
    HeadTrainSummary s;
    s.best_epoch = result.best_epoch;
    s.best_val_auc = result.best_val_auc;
    return s;
}

MetricsReport stage_eval(const RunConfig& cfg, const fs::path& ae_path, const fs::path& head_path,
                         const fs::path& data_dir, const fs::path& out_dir, const std::string& split) {
    cfg.validate();
    fs::create_directories(out_dir);
    DiffusionAutoencoder model = load_model(ae_path);
    PrognosticHead head = load_head_ckpt(head_path);
    DatasetManifest manifest = load_data(data_dir);
    DatasetManifest part = manifest.filter_split(split);
    auto ids = part.case_ids();
    if (ids.empty()) fail("eval: no cases in split '" + split + "'");

    CaseLatents latents = encode_cases(part, model);
    PredictionSet preds;
    std::ofstream pred_csv(out_dir / "predictions.csv");
    pred_csv << "case_id,true_label,prob1,predicted\n";
    pred_csv.precision(9);
    for (size_t i = 0; i < ids.size(); ++i) {
        double p1 = predict_prob1(latents[i], head);
        int truth = part.label_of(ids[i]);
        preds.push_back({truth, p1});
        pred_csv << ids[i] << ',' << truth << ',' << p1 << ',' << (p1 >= 0.5 ? 1 : 0) << "\n";
    }
    pred_csv.close();

    MetricsReport report = compute_metrics(preds);
    std::ofstream met_csv(out_dir / "metrics.csv");
    met_csv << "metric,value\n";
    met_csv.precision(9);
    met_csv << "auc," << report.auc << "\naccuracy," << report.accuracy << "\nsensitivity," << report.sensitivity
            << "\nspecificity," << report.specificity << "\n";
    for (const auto& [w, j] : report.j_w) met_csv << "j_" << w << ',' << j << "\n";
    met_csv.close();
    write_run_manifest(out_dir, "eval", cfg, {ae_path, head_path},
                       {out_dir / "predictions.csv", out_dir / "metrics.csv"});
    return report;
}

std::vector<double> cohort_feature_stddev(const CohortReasoning& cohort) {
    const int F = cohort.cfg.feature_count();
    std::vector<double> mean(static_cast<size_t>(F), 0), sq(static_cast<size_t>(F), 0);
    for (const auto& cr : cohort.cases)
        for (int f = 0; f < F; ++f) {
            mean[static_cast<size_t>(f)] += cr.s[static_cast<size_t>(f)];
            sq[static_cast<size_t>(f)] += cr.s[static_cast<size_t>(f)] * cr.s[static_cast<size_t>(f)];
        }
    double n = static_cast<double>(cohort.cases.size());
    std::vector<double> out(static_cast<size_t>(F));
    for (int f = 0; f < F; ++f) {
        double m = mean[static_cast<size_t>(f)] / n;
        out[static_cast<size_t>(f)] = std::sqrt(std::max(0.0, sq[static_cast<size_t>(f)] / n - m * m));
    }
    return out;
}

std::vector<ClassSpecificSet> stage_reason(const RunConfig& cfg, const fs::path& ae_path, const fs::path& head_path,
                                           const fs::path& data_dir, const fs::path& out_dir,
                                           const std::string& split, double rho) {
    cfg.validate();
    fs::create_directories(out_dir);
    DiffusionAutoencoder model = load_model(ae_path);
    PrognosticHead head = load_head_ckpt(head_path);
    DatasetManifest manifest = load_data(data_dir);
    DatasetManifest part = manifest.filter_split(split);
    if (part.rows.empty()) fail("reason: no cases in split '" + split + "'");

    CohortReasoning cohort = cohort_reasoning(part, model, head);
    std::vector<fs::path> outputs;
    fs::path csv = out_dir / "reasoning.csv";
    emit_reasoning_csv(cohort, csv);
    outputs.push_back(csv);
    fs::path heat = out_dir / "heatmap.pgm";
    emit_reasoning_heatmap(cohort, heat);
    outputs.push_back(heat);
    for (int c = 0; c < cohort.cfg.n_classes; ++c) {
        fs::path p = out_dir / ("heatmap_c" + std::to_string(c) + ".pgm");
        emit_reasoning_heatmap_class(cohort, c, p);
        outputs.push_back(p);
    }
    std::vector<ClassSpecificSet> sets;
    for (int c = 0; c < cohort.cfg.n_classes; ++c) {
        if (!cohort.stats_defined[static_cast<size_t>(c)]) continue;  // skipped, not fabricated
        sets.push_back(identify_class_specific(cohort, c, rho));
    }
    fs::path cs_csv = out_dir / "class_specific.csv";
    emit_class_specific_csv(sets, cs_csv);
    outputs.push_back(cs_csv);
    write_run_manifest(out_dir, "reason", cfg, {ae_path, head_path}, outputs);
    return sets;
}

std::vector<CounterfactualResult> stage_counterfactual(const RunConfig& cfg, const fs::path& ae_path,
                                                       const fs::path& head_path, const fs::path& data_dir,
                                                       const fs::path& out_dir, const CounterfactualOptions& opt) {
    cfg.validate();
    fs::create_directories(out_dir);
    DiffusionAutoencoder model = load_model(ae_path);
    PrognosticHead head = load_head_ckpt(head_path);
    DatasetManifest manifest = load_data(data_dir);

    DatasetManifest ref = manifest.filter_split(opt.reference_split);
    if (ref.rows.empty()) fail("counterfactual: reference split '" + opt.reference_split + "' is empty");
    CohortReasoning cohort = cohort_reasoning(ref, model, head);
    std::vector<double> sigma = cohort_feature_stddev(cohort);

    std::vector<std::pair<int, int>> features = opt.features;
    if (opt.auto_features) {
        ClassSpecificSet set = identify_class_specific(cohort, opt.cls, cfg.rho);
        if (set.features.empty()) fail("counterfactual: no class-specific features identified for class " + std::to_string(opt.cls));
        features.clear();
        for (const auto& f : set.features) features.emplace_back(f.slice, f.feature);
    }
    if (features.empty()) fail("counterfactual: no target features given");

    std::vector<std::string> ids = opt.case_ids;
    if (ids.empty()) {
        DatasetManifest part = manifest.filter_split(opt.split);
        ids = part.case_ids();
        if (ids.empty()) fail("counterfactual: no cases in split '" + opt.split + "'");
        if (opt.limit > 0 && static_cast<int>(ids.size()) > opt.limit) ids.resize(static_cast<size_t>(opt.limit));
    }

    CounterfactualContext ctx;
    ctx.model = &model;
    ctx.stride = cfg.schedule_stride;
    ctx.seed = cfg.seed;
    ctx.cache_dir = out_dir / "cache";

    std::vector<Direction> directions;
    if (opt.enhance) directions.push_back(Direction::Enhance);
    if (opt.mitigate) directions.push_back(Direction::Mitigate);
    if (directions.empty()) fail("counterfactual: at least one direction required");

    std::vector<CounterfactualResult> results;
    for (const auto& id : ids) {
        CaseRecord rec = case_from_manifest(manifest, id);
        for (auto [n, m] : features) {
            double a = opt.alpha_sigma * sigma[static_cast<size_t>(head.cfg.flat_index(n, m))];
            for (Direction d : directions) {
                ManipulationSpec spec;
                spec.case_id = id;
                spec.slice = n;
                spec.feature = m;
                spec.cls = opt.cls;
                spec.direction = d;
                spec.alpha = a;
                results.push_back(generate_counterfactual(rec, spec, ctx, head));
            }
        }
    }
    emit_panels(results, out_dir);

    std::vector<fs::path> outputs;
    for (const auto& entry : fs::recursive_directory_iterator(out_dir))
        if (entry.is_regular_file() && entry.path().filename() != "run.json") outputs.push_back(entry.path());
    std::sort(outputs.begin(), outputs.end());
    write_run_manifest(out_dir, "counterfactual", cfg, {ae_path, head_path}, outputs);
    return results;
}

}  // namespace pgx
