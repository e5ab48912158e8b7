#include "pgx/head.hpp"

#include <algorithm>
#include <cmath>

#include "pgx/checkpoint.hpp"
#include "pgx/metrics.hpp"

namespace pgx {

void HeadConfig::validate() const {
    if (n_slices < 1 || m_features < 1 || n_classes < 2 || latent_dim < 1)
        fail("HeadConfig: all extents must be positive (and at least two classes)");
}

PrognosticHead PrognosticHead::init(HeadConfig cfg, uint64_t seed) {
    cfg.validate();
    PrognosticHead h;
    h.cfg = cfg;
    RngStream rng(seed, "head.init");
    for (int n = 0; n < cfg.n_slices; ++n)
        h.w1.push_back(init_weight<float>({cfg.m_features, cfg.latent_dim}, cfg.latent_dim, rng));
    h.w2 = init_weight<float>({cfg.n_classes, cfg.feature_count()}, cfg.feature_count(), rng);
    return h;
}

void PrognosticHead::save(const std::filesystem::path& path) const {
    TensorMap map;
    for (int n = 0; n < cfg.n_slices; ++n) map["w1." + std::to_string(n)] = w1[static_cast<size_t>(n)];
    for (int c = 0; c < cfg.n_classes; ++c) {
        TensorF row({cfg.feature_count()});
        for (int i = 0; i < cfg.feature_count(); ++i) row[i] = w2.at2(c, i);
        map["w2." + std::to_string(c)] = row;
    }
    map["head.config"] = TensorF({4}, {static_cast<float>(cfg.n_slices), static_cast<float>(cfg.m_features),
                                       static_cast<float>(cfg.n_classes), static_cast<float>(cfg.latent_dim)});
    save_checkpoint(path, map);
}

PrognosticHead PrognosticHead::load(const std::filesystem::path& path) {
    TensorMap map = load_checkpoint(path);
    auto it = map.find("head.config");
    if (it == map.end()) fail("head: checkpoint " + path.string() + " lacks head.config");
    PrognosticHead h;
    h.cfg.n_slices = static_cast<int>(it->second[0]);
    h.cfg.m_features = static_cast<int>(it->second[1]);
    h.cfg.n_classes = static_cast<int>(it->second[2]);
    h.cfg.latent_dim = static_cast<int>(it->second[3]);
    h.cfg.validate();
    for (int n = 0; n < h.cfg.n_slices; ++n) {
        auto w = map.find("w1." + std::to_string(n));
        if (w == map.end()) fail("head: checkpoint missing w1." + std::to_string(n));
        if (w->second.shape != Shape{h.cfg.m_features, h.cfg.latent_dim})
            fail("head: w1." + std::to_string(n) + " has shape " + shape_str(w->second.shape));
        h.w1.push_back(w->second);
    }
    h.w2 = TensorF({h.cfg.n_classes, h.cfg.feature_count()});
    for (int c = 0; c < h.cfg.n_classes; ++c) {
        auto w = map.find("w2." + std::to_string(c));
        if (w == map.end()) fail("head: checkpoint missing w2." + std::to_string(c));
        if (w->second.shape != Shape{h.cfg.feature_count()})
            fail("head: w2." + std::to_string(c) + " has shape " + shape_str(w->second.shape));
        for (int i = 0; i < h.cfg.feature_count(); ++i) h.w2.at2(c, i) = w->second[i];
    }
    return h;
}

std::vector<double> extract_features(const std::vector<std::vector<float>>& latents, const PrognosticHead& head) {
    const HeadConfig& cfg = head.cfg;
    if (static_cast<int>(latents.size()) != cfg.n_slices)
        fail("extract_features: expected " + std::to_string(cfg.n_slices) + " latents, got " +
             std::to_string(latents.size()));
    std::vector<double> s(static_cast<size_t>(cfg.feature_count()));
    for (int n = 0; n < cfg.n_slices; ++n) {
        const auto& z = latents[static_cast<size_t>(n)];
        if (static_cast<int>(z.size()) != cfg.latent_dim)
            fail("extract_features: latent " + std::to_string(n) + " has dimension " + std::to_string(z.size()) +
                 ", expected " + std::to_string(cfg.latent_dim));
        const TensorF& w = head.w1[static_cast<size_t>(n)];
        for (int m = 0; m < cfg.m_features; ++m) {
            double acc = 0;
            for (int d = 0; d < cfg.latent_dim; ++d) acc += static_cast<double>(w.at2(m, d)) * z[static_cast<size_t>(d)];
            s[static_cast<size_t>(cfg.flat_index(n, m))] = acc;
        }
    }
    return s;
}

ScoreVector score(const std::vector<double>& s, const PrognosticHead& head) {
    const HeadConfig& cfg = head.cfg;
    if (static_cast<int>(s.size()) != cfg.feature_count())
        fail("score: feature vector length " + std::to_string(s.size()) + ", expected " +
             std::to_string(cfg.feature_count()));
    ScoreVector out;
    out.y.resize(static_cast<size_t>(cfg.n_classes));
    for (int c = 0; c < cfg.n_classes; ++c) {
        // summed in flat-index order from the same per-feature products that
        // decision vectors expose, so the decomposition identity is exact
        double acc = 0;
        for (int i = 0; i < cfg.feature_count(); ++i) acc += static_cast<double>(head.w2.at2(c, i)) * s[static_cast<size_t>(i)];
        out.y[static_cast<size_t>(c)] = acc;
    }
    double mx = *std::max_element(out.y.begin(), out.y.end());
    double sum = 0;
    out.p.resize(out.y.size());
    for (size_t c = 0; c < out.y.size(); ++c) {
        out.p[c] = std::exp(out.y[c] - mx);
        sum += out.p[c];
    }
    for (auto& p : out.p) p /= sum;
    return out;
}

double weighted_loss(const std::vector<double>& y, int true_class) {
    if (true_class < 0 || true_class >= static_cast<int>(y.size()))
        fail("weighted_loss: class index " + std::to_string(true_class) + " out of range");
    double mx = *std::max_element(y.begin(), y.end());
    double sum = 0;
    for (double v : y) sum += std::exp(v - mx);
    double p = std::exp(y[static_cast<size_t>(true_class)] - mx) / sum;
    return -(1.0 - p) * std::log(std::max(p, 1e-12));
}

std::vector<int> sample_slices(int total_slices, int n_regions, RngStream& rng) {
    if (total_slices < n_regions)
        fail("sample_slices: " + std::to_string(total_slices) + " slices cannot fill " + std::to_string(n_regions) +
             " regions");
    std::vector<int> out;
    out.reserve(static_cast<size_t>(n_regions));
    int base = total_slices / n_regions, extra = total_slices % n_regions;
    int start = 0;
    for (int r = 0; r < n_regions; ++r) {
        int len = base + (r < extra ? 1 : 0);
        out.push_back(start + static_cast<int>(rng.uniform_int(len)));
        start += len;
    }
    return out;
}

std::vector<int> region_centers(int total_slices, int n_regions) {
    if (total_slices < n_regions) fail("region_centers: fewer slices than regions");
    std::vector<int> out;
    int base = total_slices / n_regions, extra = total_slices % n_regions;
    int start = 0;
    for (int r = 0; r < n_regions; ++r) {
        int len = base + (r < extra ? 1 : 0);
        out.push_back(start + (len - 1) / 2);
        start += len;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

CaseLatents encode_cases(const DatasetManifest& manifest, const DiffusionAutoencoder& ae) {
    CaseLatents out;
    for (const auto& id : manifest.case_ids()) {
        std::vector<std::vector<float>> per_case;
        int n = manifest.slice_count(id);
        for (int k = 0; k < n; ++k) per_case.push_back(ae.encode(load_slice(manifest, id, k)));
        out.push_back(std::move(per_case));
    }
    return out;
}

double predict_prob1(const std::vector<std::vector<float>>& case_latents, const PrognosticHead& head) {
    auto centers = region_centers(static_cast<int>(case_latents.size()), head.cfg.n_slices);
    std::vector<std::vector<float>> picked;
    picked.reserve(centers.size());
    for (int idx : centers) picked.push_back(case_latents[static_cast<size_t>(idx)]);
    ScoreVector sv = score(extract_features(picked, head), head);
    return sv.p[1];
}

namespace {

PrognosticHead head_from_params(const HeadConfig& cfg, ParamStore<float>& params) {
    PrognosticHead h;
    h.cfg = cfg;
    for (int n = 0; n < cfg.n_slices; ++n) h.w1.push_back(params.get("w1." + std::to_string(n)).value);
    h.w2 = params.get("w2").value;
    return h;
}

double val_auc_of(const CaseLatents& latents, const std::vector<int>& labels, const PrognosticHead& head) {
    PredictionSet preds;
    for (size_t i = 0; i < latents.size(); ++i)
        preds.push_back({labels[i], predict_prob1(latents[i], head)});
    return auc(preds);
}

}  // namespace

HeadTrainResult train_head_on_latents(const CaseLatents& train_latents, const std::vector<int>& train_labels,
                                      const CaseLatents& val_latents, const std::vector<int>& val_labels,
                                      HeadConfig cfg, const HeadTrainOptions& opt) {
    cfg.validate();
    if (train_latents.empty() || val_latents.empty()) fail("train_head: empty split");
    const int N = cfg.n_slices, M = cfg.m_features, C = cfg.n_classes, D = cfg.latent_dim;
    const int NM = cfg.feature_count();

    ParamStore<float> params;
    RngStream init(opt.seed, "head.init");
    for (int n = 0; n < N; ++n)
        params.create("w1." + std::to_string(n), init_weight<float>({M, D}, D, init));
    params.create("w2", init_weight<float>({C, NM}, NM, init));
    Adam<float> adam(opt.lr);

    RngStream shuffle(opt.seed, "head.shuffle");
    RngStream slice_rng(opt.seed, "head.slices");

    HeadTrainResult result;
    std::vector<size_t> order(train_latents.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle.uniform_int(static_cast<int64_t>(i)))]);

        double loss_sum = 0;
        int batches = 0;
        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(opt.batch)) {
            size_t bsz = std::min(static_cast<size_t>(opt.batch), order.size() - off);
            // per-epoch re-sampled slice positions within regions
            std::vector<TensorF> z_n(static_cast<size_t>(N), TensorF({static_cast<int64_t>(bsz), D}));
            TensorD onehot_d({static_cast<int64_t>(bsz), C});
            for (size_t b = 0; b < bsz; ++b) {
                const auto& lat = train_latents[order[off + b]];
                auto picks = sample_slices(static_cast<int>(lat.size()), N, slice_rng);
                for (int n = 0; n < N; ++n) {
                    const auto& z = lat[static_cast<size_t>(picks[static_cast<size_t>(n)])];
                    if (static_cast<int>(z.size()) != D) fail("train_head: latent dimension mismatch");
                    for (int d = 0; d < D; ++d)
                        z_n[static_cast<size_t>(n)].at2(static_cast<int64_t>(b), d) = z[static_cast<size_t>(d)];
                }
                onehot_d.at2(static_cast<int64_t>(b), train_labels[order[off + b]]) = 1.0;
            }

            Tape<float> tape;
            std::vector<int> s_parts;
            for (int n = 0; n < N; ++n) {
                int zid = tape.leaf(z_n[static_cast<size_t>(n)], false);
                s_parts.push_back(tape.matmul(zid, tape.param(params, "w1." + std::to_string(n)), false, true));
            }
            int s = tape.concat(s_parts);
            int y = tape.matmul(s, tape.param(params, "w2"), false, true);
            int p = tape.softmax(y);
            int onehot = tape.leaf(onehot_d.cast<float>(), false);
            int ones_c = tape.leaf(TensorF::full({C, 1}, 1.0f), false);
            int picked = tape.matmul(tape.mul(p, onehot), ones_c);
            int lp = tape.log(picked);
            int neg1 = tape.leaf(TensorF::scalar(-1.0f), false);
            int one_minus = tape.add(tape.leaf(TensorF::full({static_cast<int64_t>(bsz), 1}, 1.0f), false),
                                     tape.mul(picked, neg1));
            int loss = tape.mean_all(tape.mul(tape.mul(one_minus, lp), neg1));
            loss_sum += tape.val(loss)[0];
            ++batches;
            tape.backward(loss);
            adam.step(params);
        }

        PrognosticHead current = head_from_params(cfg, params);
        HeadEpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_sum / std::max(1, batches);
        st.val_auc = val_auc_of(val_latents, val_labels, current);
        result.history.push_back(st);
        if (st.val_auc > result.best_val_auc || result.best_epoch < 0) {
            result.best_val_auc = st.val_auc;
            result.best_epoch = epoch;
            result.head = current;
        }
    }
    return result;
}

HeadTrainResult train_head(const DatasetManifest& train, const DatasetManifest& val,
                           const DiffusionAutoencoder& ae, HeadConfig cfg, const HeadTrainOptions& opt) {
    if (train.rows.empty() || val.rows.empty()) fail("train_head: empty split");
    CaseLatents train_lat = encode_cases(train, ae);
    CaseLatents val_lat = encode_cases(val, ae);
    std::vector<int> train_labels, val_labels;
    for (const auto& id : train.case_ids()) train_labels.push_back(train.label_of(id));
    for (const auto& id : val.case_ids()) val_labels.push_back(val.label_of(id));
    return train_head_on_latents(train_lat, train_labels, val_lat, val_labels, cfg, opt);
}

}  // namespace pgx
