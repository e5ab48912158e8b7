// Python bindings for the core operations: schedule math, the DDIM step,
// synthetic case generation and factor measurement, head arithmetic, latent
// manipulation, and the evaluation metrics.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pgx/checkpoint.hpp"
#include "pgx/counterfactual.hpp"
#include "pgx/diffusion.hpp"
#include "pgx/head.hpp"
#include "pgx/metrics.hpp"
#include "pgx/reasoning.hpp"
#include "pgx/synthetic.hpp"

namespace py = pybind11;
using namespace pgx;

namespace {

TensorF tensor2d_from(py::array_t<float, py::array::c_style | py::array::forcecast> a) {
    if (a.ndim() != 2) fail("expected a 2-d array");
    TensorF t({a.shape(0), a.shape(1)});
    std::copy(a.data(), a.data() + t.numel(), t.data.begin());
    return t;
}

py::array_t<float> to_numpy(const TensorF& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<float> out(shape);
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

NoiseSchedule schedule_from(const std::vector<double>& betas) {
    NoiseSchedule s;
    s.steps = static_cast<int>(betas.size());
    double acc = 1.0;
    for (double b : betas) {
        s.betas.push_back(b);
        acc *= 1.0 - b;
        s.alphas_cum.push_back(acc);
    }
    return s;
}

PrognosticHead head_from(const std::vector<py::array_t<float, py::array::c_style | py::array::forcecast>>& w1,
                         py::array_t<float, py::array::c_style | py::array::forcecast> w2) {
    if (w1.empty() || w2.ndim() != 2) fail("head: need N first-layer matrices and a [C, N*M] second layer");
    PrognosticHead h;
    h.cfg.n_slices = static_cast<int>(w1.size());
    h.cfg.m_features = static_cast<int>(w1[0].shape(0));
    h.cfg.latent_dim = static_cast<int>(w1[0].shape(1));
    h.cfg.n_classes = static_cast<int>(w2.shape(0));
    if (w2.shape(1) != h.cfg.feature_count()) fail("head: second layer must be [C, N*M]");
    for (const auto& w : w1) h.w1.push_back(tensor2d_from(w));
    h.w2 = tensor2d_from(w2);
    return h;
}

std::vector<std::vector<float>> latents_from(py::array_t<float, py::array::c_style | py::array::forcecast> z) {
    if (z.ndim() != 2) fail("latents: expected [N, D]");
    std::vector<std::vector<float>> out;
    for (py::ssize_t n = 0; n < z.shape(0); ++n)
        out.emplace_back(z.data() + n * z.shape(1), z.data() + (n + 1) * z.shape(1));
    return out;
}

py::dict measured_to_dict(const MeasuredFactors& m) {
    py::dict d;
    d["lung_area"] = m.lung_area;
    d["opacity"] = m.opacity;
    d["vessels"] = m.vessels;
    d["degenerate"] = m.degenerate;
    return d;
}

}  // namespace

PYBIND11_MODULE(_pgx, m) {
    m.doc() = "explainable prognosis pipeline: core operations";

    py::register_exception<Error>(m, "PgxError");

    // ---- schedule / diffusion ----
    m.def(
        "make_schedule",
        [](int steps, double beta_min, double beta_max) {
            NoiseSchedule s = NoiseSchedule::make(steps, beta_min, beta_max);
            py::dict d;
            d["betas"] = py::cast(s.betas);
            d["alphas_cum"] = py::cast(s.alphas_cum);
            return d;
        },
        py::arg("steps"), py::arg("beta_min"), py::arg("beta_max"));

    m.def(
        "q_sample",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> x0, int t,
           py::array_t<float, py::array::c_style | py::array::forcecast> eps, const std::vector<double>& betas) {
            return to_numpy(q_sample(tensor2d_from(x0), t, tensor2d_from(eps), schedule_from(betas)));
        },
        py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("betas"));

    m.def(
        "ddim_step",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> x_t, int t_hi, int t_lo,
           py::array_t<float, py::array::c_style | py::array::forcecast> eps_hat, const std::vector<double>& betas) {
            return to_numpy(ddim_step_to(tensor2d_from(x_t), t_hi, t_lo, tensor2d_from(eps_hat), schedule_from(betas)));
        },
        py::arg("x_t"), py::arg("t_hi"), py::arg("t_lo"), py::arg("eps_hat"), py::arg("betas"));

    // ---- synthetic data ----
    m.def(
        "generate_case",
        [](uint64_t seed, int64_t case_index, int label, int n_slices, int height, int width) {
            GenConfig cfg = GenConfig::defaults(n_slices, height, width);
            CaseRecord rec = generate_case(seed, case_index, label, cfg);
            py::array_t<float> slices({static_cast<py::ssize_t>(rec.slices.size()), static_cast<py::ssize_t>(height),
                                       static_cast<py::ssize_t>(width)});
            for (size_t k = 0; k < rec.slices.size(); ++k)
                std::copy(rec.slices[k].data.begin(), rec.slices[k].data.end(),
                          slices.mutable_data() + static_cast<py::ssize_t>(k) * height * width);
            py::list factors;
            for (const auto& f : rec.factors) {
                py::dict d;
                d["lung_area_scale"] = f.lung_area_scale;
                d["opacity_level"] = f.opacity_level;
                d["vessel_density"] = f.vessel_density;
                factors.append(d);
            }
            py::dict out;
            out["case_id"] = rec.case_id;
            out["label"] = rec.label;
            out["slices"] = slices;
            out["factors"] = factors;
            return out;
        },
        py::arg("seed"), py::arg("case_index"), py::arg("label"), py::arg("n_slices") = 4, py::arg("height") = 16,
        py::arg("width") = 16);

    m.def(
        "measure_factors",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> img) {
            return measured_to_dict(measure_factors(tensor2d_from(img)));
        },
        py::arg("image"));

    // ---- head arithmetic ----
    m.def(
        "extract_features",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> latents,
           const std::vector<py::array_t<float, py::array::c_style | py::array::forcecast>>& w1,
           py::array_t<float, py::array::c_style | py::array::forcecast> w2) {
            return extract_features(latents_from(latents), head_from(w1, w2));
        },
        py::arg("latents"), py::arg("w1"), py::arg("w2"));

    m.def(
        "score",
        [](const std::vector<double>& s,
           const std::vector<py::array_t<float, py::array::c_style | py::array::forcecast>>& w1,
           py::array_t<float, py::array::c_style | py::array::forcecast> w2) {
            ScoreVector sv = score(s, head_from(w1, w2));
            py::dict d;
            d["y"] = py::cast(sv.y);
            d["p"] = py::cast(sv.p);
            return d;
        },
        py::arg("s"), py::arg("w1"), py::arg("w2"));

    m.def("weighted_loss", &weighted_loss, py::arg("y"), py::arg("true_class"));

    m.def(
        "decision_vector",
        [](const std::vector<double>& s,
           const std::vector<py::array_t<float, py::array::c_style | py::array::forcecast>>& w1,
           py::array_t<float, py::array::c_style | py::array::forcecast> w2, int cls) {
            return decision_vector(s, head_from(w1, w2), cls).v;
        },
        py::arg("s"), py::arg("w1"), py::arg("w2"), py::arg("cls"));

    // ---- counterfactual arithmetic ----
    m.def(
        "manipulate",
        [](const std::vector<double>& z_n,
           const std::vector<py::array_t<float, py::array::c_style | py::array::forcecast>>& w1,
           py::array_t<float, py::array::c_style | py::array::forcecast> w2, int slice, int feature, int cls,
           const std::string& direction, double alpha) {
            ManipulationSpec spec;
            spec.slice = slice;
            spec.feature = feature;
            spec.cls = cls;
            spec.direction = direction == "mitigate" ? Direction::Mitigate : Direction::Enhance;
            spec.alpha = alpha;
            return manipulate(z_n, spec, head_from(w1, w2));
        },
        py::arg("z"), py::arg("w1"), py::arg("w2"), py::arg("slice"), py::arg("feature"), py::arg("cls"),
        py::arg("direction"), py::arg("alpha"));

    m.def(
        "predicted_contribution_change",
        [](const std::vector<py::array_t<float, py::array::c_style | py::array::forcecast>>& w1,
           py::array_t<float, py::array::c_style | py::array::forcecast> w2, int slice, int feature, int cls,
           double alpha) { return predicted_contribution_change(head_from(w1, w2), slice, feature, cls, alpha); },
        py::arg("w1"), py::arg("w2"), py::arg("slice"), py::arg("feature"), py::arg("cls"), py::arg("alpha"));

    // ---- metrics ----
    m.def(
        "auc",
        [](const std::vector<int>& labels, const std::vector<double>& probs) {
            if (labels.size() != probs.size()) fail("auc: labels and probs must align");
            PredictionSet preds;
            for (size_t i = 0; i < labels.size(); ++i) preds.push_back({labels[i], probs[i]});
            return auc(preds);
        },
        py::arg("labels"), py::arg("probs"));

    m.def(
        "confusion_metrics",
        [](const std::vector<int>& labels, const std::vector<double>& probs, double threshold) {
            PredictionSet preds;
            for (size_t i = 0; i < labels.size(); ++i) preds.push_back({labels[i], probs[i]});
            ConfusionMetrics c = confusion_metrics(preds, threshold);
            py::dict d;
            d["accuracy"] = c.accuracy;
            d["sensitivity"] = c.sensitivity;
            d["specificity"] = c.specificity;
            return d;
        },
        py::arg("labels"), py::arg("probs"), py::arg("threshold") = 0.5);

    m.def("weighted_youden", &weighted_youden, py::arg("sensitivity"), py::arg("specificity"), py::arg("w"));
    m.def("weighted_youden_literature", &weighted_youden_literature, py::arg("sensitivity"), py::arg("specificity"),
          py::arg("w"));

    // ---- checkpoints ----
    m.def(
        "load_checkpoint",
        [](const std::string& path) {
            py::dict d;
            for (auto& [name, t] : load_checkpoint(path)) d[py::str(name)] = to_numpy(t);
            return d;
        },
        py::arg("path"));
}
