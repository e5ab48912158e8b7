#include "pgx/diffusion.hpp"

#include <cmath>

#include "pgx/checkpoint.hpp"

namespace pgx {

NoiseSchedule NoiseSchedule::make(int steps, double beta_min, double beta_max) {
    if (steps < 1) fail("make_schedule: steps must be >= 1");
    if (!(beta_min > 0) || !(beta_min <= beta_max) || !(beta_max < 1))
        fail("make_schedule: need 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.steps = steps;
    s.betas.resize(static_cast<size_t>(steps));
    s.alphas_cum.resize(static_cast<size_t>(steps));
    double acc = 1.0;
    for (int t = 0; t < steps; ++t) {
        double beta = steps == 1 ? beta_min
                                 : beta_min + (beta_max - beta_min) * static_cast<double>(t) / (steps - 1);
        s.betas[static_cast<size_t>(t)] = beta;
        acc *= 1.0 - beta;
        s.alphas_cum[static_cast<size_t>(t)] = acc;
    }
    return s;
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == 0) return 1.0;
    if (t < 0 || t > steps) fail("schedule: timestep " + std::to_string(t) + " outside [0," + std::to_string(steps) + "]");
    return alphas_cum[static_cast<size_t>(t - 1)];
}

TensorF q_sample(const TensorF& x0, int t, const TensorF& eps, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.steps) fail("q_sample: timestep " + std::to_string(t) + " outside [1," + std::to_string(sched.steps) + "]");
    if (!x0.same_shape(eps)) fail("q_sample: noise shape " + shape_str(eps.shape) + " != signal shape " + shape_str(x0.shape));
    double ab = sched.alpha_bar(t);
    double cs = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
    TensorF out(x0.shape);
    for (int64_t i = 0; i < x0.numel(); ++i)
        out[i] = static_cast<float>(cs * static_cast<double>(x0[i]) + cn * static_cast<double>(eps[i]));
    return out;
}

TensorF ddim_step_to(const TensorF& x_t, int t_hi, int t_lo, const TensorF& eps_hat, const NoiseSchedule& sched) {
    if (t_hi < 1 || t_hi > sched.steps) fail("ddim_step: source timestep " + std::to_string(t_hi) + " outside [1," + std::to_string(sched.steps) + "]");
    if (t_lo < 0 || t_lo >= t_hi) fail("ddim_step: target timestep must satisfy 0 <= t_lo < t_hi");
    if (!x_t.same_shape(eps_hat)) fail("ddim_step: eps shape " + shape_str(eps_hat.shape) + " != state shape " + shape_str(x_t.shape));
    for (int64_t i = 0; i < eps_hat.numel(); ++i)
        if (!std::isfinite(eps_hat[i])) fail("ddim_step: non-finite denoiser output");
    double a_hi = sched.alpha_bar(t_hi), a_lo = sched.alpha_bar(t_lo);
    double inv_sa = 1.0 / std::sqrt(a_hi);
    double c_hi = std::sqrt(1.0 - a_hi), sa_lo = std::sqrt(a_lo), c_lo = std::sqrt(1.0 - a_lo);
    TensorF out(x_t.shape);
    for (int64_t i = 0; i < x_t.numel(); ++i) {
        double e = eps_hat[i];
        double x0_pred = (static_cast<double>(x_t[i]) - c_hi * e) * inv_sa;
        out[i] = static_cast<float>(sa_lo * x0_pred + c_lo * e);
    }
    return out;
}

TensorF clamp_unit(const TensorF& x) {
    TensorF out = x;
    for (auto& v : out.data) v = std::clamp(v, -1.0f, 1.0f);
    return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

DiffusionAutoencoder::DiffusionAutoencoder(ModelConfig cfg, NoiseSchedule sched)
    : cfg_(cfg), sched_(std::move(sched)) {
    if (cfg_.height % 4 != 0 || cfg_.width % 4 != 0)
        fail("model: image extents must be divisible by 4 for the two-level stack");
}

namespace {

int gn_groups_for(int channels) { return channels >= 8 ? 8 : 1; }

}  // namespace

void DiffusionAutoencoder::init_params(uint64_t seed) {
    RngStream rng(seed, "init");
    const int w1 = cfg_.base_width, w2 = 2 * cfg_.base_width;
    const int E = cfg_.emb_dim, D = cfg_.latent_dim;
    const int64_t flat = static_cast<int64_t>(w2) * (cfg_.height / 4) * (cfg_.width / 4);

    auto conv = [&](const std::string& name, int out_c, int in_c, int k) {
        params_.create(name + ".w", init_weight<float>({out_c, in_c, k, k}, static_cast<int64_t>(in_c) * k * k, rng));
        params_.create(name + ".b", TensorF::zeros({out_c}));
    };
    auto linear = [&](const std::string& name, int64_t out_d, int64_t in_d) {
        params_.create(name + ".w", init_weight<float>({out_d, in_d}, in_d, rng));
        params_.create(name + ".b", TensorF::zeros({out_d}));
    };
    auto gn = [&](const std::string& name, int c) {
        params_.create(name + ".g", TensorF::full({c}, 1.0f));
        params_.create(name + ".b", TensorF::zeros({c}));
    };
    auto block = [&](const std::string& name, int c) {
        gn(name + ".gn1", c);
        conv(name + ".conv1", c, c, 3);
        linear(name + ".emb", c, E);
        gn(name + ".gn2", c);
        conv(name + ".conv2", c, c, 3);
    };

    // encoder
    conv("enc.conv0", w1, 1, 3);
    gn("enc.gn0", w1);
    conv("enc.conv1", w2, w1, 3);
    gn("enc.gn1", w2);
    conv("enc.conv2", w2, w2, 3);
    gn("enc.gn2", w2);
    linear("enc.proj", D, flat);

    // denoiser
    linear("den.emb1", E, E);
    linear("den.emb2", E, E);
    linear("den.zproj", E, D);
    conv("den.in", w1, 1, 3);
    block("den.d0", w1);
    conv("den.down", w2, w1, 3);
    block("den.d1", w2);
    block("den.mid", w2);
    conv("den.up", w1, w2, 3);
    block("den.u0", w1);
    gn("den.out.gn", w1);
    conv("den.out", 1, w1, 3);
}

TensorF DiffusionAutoencoder::time_embedding(const std::vector<int>& ts) const {
    const int E = cfg_.emb_dim;
    const int half = E / 2;
    TensorF emb({static_cast<int64_t>(ts.size()), E});
    for (size_t b = 0; b < ts.size(); ++b)
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
            double a = static_cast<double>(ts[b]) * freq;
            emb.at2(static_cast<int64_t>(b), 2 * i) = static_cast<float>(std::sin(a));
            emb.at2(static_cast<int64_t>(b), 2 * i + 1) = static_cast<float>(std::cos(a));
        }
    return emb;
}

int DiffusionAutoencoder::build_encoder(Tape<float>& tape, int x) const {
    auto& P = const_cast<ParamStore<float>&>(params_);
    const int w1 = cfg_.base_width, w2 = 2 * cfg_.base_width;
    auto conv = [&](int in, const char* name, int stride) {
        return tape.conv2d(in, tape.param(P, std::string(name) + ".w"), tape.param(P, std::string(name) + ".b"),
                           stride, 1);
    };
    auto gn = [&](int in, const char* name, int c) {
        return tape.group_norm(in, tape.param(P, std::string(name) + ".g"), tape.param(P, std::string(name) + ".b"),
                               gn_groups_for(c));
    };
    int h = conv(x, "enc.conv0", 1);
    h = tape.silu(gn(h, "enc.gn0", w1));
    h = conv(h, "enc.conv1", 2);
    h = tape.silu(gn(h, "enc.gn1", w2));
    h = conv(h, "enc.conv2", 2);
    h = tape.silu(gn(h, "enc.gn2", w2));
    int64_t B = tape.val(x).shape[0];
    int64_t flat = static_cast<int64_t>(w2) * (cfg_.height / 4) * (cfg_.width / 4);
    h = tape.reshape(h, {B, flat});
    int z = tape.matmul(h, tape.param(P, "enc.proj.w"), false, true);
    return tape.add(z, tape.param(P, "enc.proj.b"));
}

int DiffusionAutoencoder::build_denoiser(Tape<float>& tape, int x_t, int temb, int z) const {
    auto& P = const_cast<ParamStore<float>&>(params_);
    const int w1 = cfg_.base_width, w2 = 2 * cfg_.base_width;
    int64_t B = tape.val(x_t).shape[0];

    auto linear = [&](int in, const char* name) {
        int y = tape.matmul(in, tape.param(P, std::string(name) + ".w"), false, true);
        return tape.add(y, tape.param(P, std::string(name) + ".b"));
    };
    auto conv = [&](int in, const char* name, int stride) {
        return tape.conv2d(in, tape.param(P, std::string(name) + ".w"), tape.param(P, std::string(name) + ".b"),
                           stride, 1);
    };
    auto gn = [&](int in, const char* name, int c) {
        return tape.group_norm(in, tape.param(P, std::string(name) + ".g"), tape.param(P, std::string(name) + ".b"),
                               gn_groups_for(c));
    };

    // conditioning vector shared by every block
    int cond = tape.silu(tape.add(linear(tape.silu(linear(temb, "den.emb1")), "den.emb2"), linear(z, "den.zproj")));

    auto block = [&](int in, const std::string& name, int c) {
        int h = conv(tape.silu(gn(in, (name + ".gn1").c_str(), c)), (name + ".conv1").c_str(), 1);
        int cb = linear(cond, (name + ".emb").c_str());
        h = tape.add(h, tape.reshape(cb, {B, c, 1, 1}));
        h = conv(tape.silu(gn(h, (name + ".gn2").c_str(), c)), (name + ".conv2").c_str(), 1);
        return tape.add(in, h);
    };

    int h = conv(x_t, "den.in", 1);
    h = block(h, "den.d0", w1);
    int skip = h;
    h = conv(h, "den.down", 2);
    h = block(h, "den.d1", w2);
    h = block(h, "den.mid", w2);
    h = conv(tape.upsample2x(h), "den.up", 1);
    h = tape.add(h, skip);
    h = block(h, "den.u0", w1);
    h = tape.silu(gn(h, "den.out.gn", w1));
    return conv(h, "den.out", 1);
}

TensorF DiffusionAutoencoder::encode_batch(const TensorF& x0) const {
    if (x0.rank() != 4 || x0.shape[1] != 1 || x0.shape[2] != cfg_.height || x0.shape[3] != cfg_.width)
        fail("encode: expected [B,1," + std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) +
             "], got " + shape_str(x0.shape));
    Tape<float> tape;
    int x = tape.leaf(x0, false);
    int z = build_encoder(tape, x);
    return tape.val(z);
}

std::vector<float> DiffusionAutoencoder::encode(const TensorF& slice) const {
    if (slice.rank() != 2) fail("encode: expected a [H,W] slice, got " + shape_str(slice.shape));
    TensorF batch({1, 1, slice.shape[0], slice.shape[1]}, slice.data);
    TensorF z = encode_batch(batch);
    return z.data;
}

TensorF DiffusionAutoencoder::predict_eps(const TensorF& x_t, const std::vector<int>& ts, const TensorF& z) const {
    if (x_t.rank() != 4) fail("predict_eps: expected [B,1,H,W], got " + shape_str(x_t.shape));
    if (static_cast<int64_t>(ts.size()) != x_t.shape[0]) fail("predict_eps: one timestep per batch element required");
    Tape<float> tape;
    int x = tape.leaf(x_t, false);
    int temb = tape.leaf(time_embedding(ts), false);
    int zid = tape.leaf(z, false);
    int eps = build_denoiser(tape, x, temb, zid);
    return tape.val(eps);
}

TensorF DiffusionAutoencoder::ddim_step(const TensorF& x_t, int t, const std::vector<float>& z) const {
    if (t < 1) fail("ddim_step: timestep must be >= 1");
    TensorF xb({1, 1, x_t.shape[0], x_t.shape[1]}, x_t.data);
    TensorF zb({1, static_cast<int64_t>(z.size())}, z);
    TensorF eps = predict_eps(xb, {t}, zb);
    TensorF eps2({x_t.shape[0], x_t.shape[1]}, eps.data);
    return ddim_step_to(x_t, t, t - 1, eps2, sched_);
}

TensorF DiffusionAutoencoder::reconstruct(const std::vector<float>& z, const TensorF& x_T, int stride) const {
    if (stride < 1) fail("reconstruct: stride must be >= 1");
    if (sched_.steps < 1) fail("reconstruct: empty schedule");
    if (x_T.rank() != 2 || x_T.shape[0] != cfg_.height || x_T.shape[1] != cfg_.width)
        fail("reconstruct: stochastic code must be [" + std::to_string(cfg_.height) + "," +
             std::to_string(cfg_.width) + "], got " + shape_str(x_T.shape));
    std::vector<int> sources;
    for (int t = sched_.steps; t > 0; t -= stride) sources.push_back(t);
    if (sources.empty()) fail("reconstruct: empty timestep subsequence");
    TensorF x = x_T;
    TensorF zb({1, static_cast<int64_t>(z.size())}, z);
    for (int t : sources) {
        int t_lo = std::max(t - stride, 0);
        TensorF xb({1, 1, x.shape[0], x.shape[1]}, x.data);
        TensorF eps = predict_eps(xb, {t}, zb);
        TensorF eps2({x.shape[0], x.shape[1]}, eps.data);
        x = ddim_step_to(x, t, t_lo, eps2, sched_);
    }
    return x;
}

namespace {

struct TrainGraph {
    Tape<float> tape;
    int loss = -1;
};

}  // namespace

float DiffusionAutoencoder::train_step(const TensorF& x0, Adam<float>& adam, RngStream& t_rng,
                                       RngStream& noise_rng) {
    if (x0.rank() != 4 || x0.shape[0] < 1) fail("train_step: nonempty [B,1,H,W] batch required");
    int64_t B = x0.shape[0];
    int64_t npix = x0.numel() / B;

    std::vector<int> ts(static_cast<size_t>(B));
    TensorF eps(x0.shape), x_t(x0.shape);
    for (int64_t b = 0; b < B; ++b) {
        int t = 1 + static_cast<int>(t_rng.uniform_int(sched_.steps));
        ts[static_cast<size_t>(b)] = t;
        double cs = std::sqrt(sched_.alpha_bar(t)), cn = std::sqrt(1.0 - sched_.alpha_bar(t));
        for (int64_t i = 0; i < npix; ++i) {
            float e = static_cast<float>(noise_rng.normal());
            eps[b * npix + i] = e;
            x_t[b * npix + i] = static_cast<float>(cs * x0[b * npix + i] + cn * e);
        }
    }

    Tape<float> tape;
    int x0_id = tape.leaf(x0, false);
    int xt_id = tape.leaf(x_t, false);
    int temb = tape.leaf(time_embedding(ts), false);
    int z = build_encoder(tape, x0_id);
    int eps_hat = build_denoiser(tape, xt_id, temb, z);
    int loss = tape.l1_loss(eps_hat, tape.leaf(eps, false));
    float loss_v = tape.val(loss)[0];
    if (!std::isfinite(loss_v)) fail("train_step: non-finite loss");
    tape.backward(loss);
    adam.step(params_);
    return loss_v;
}

float DiffusionAutoencoder::eval_loss(const TensorF& x0, RngStream& t_rng, RngStream& noise_rng) const {
    int64_t B = x0.shape[0];
    int64_t npix = x0.numel() / B;
    std::vector<int> ts(static_cast<size_t>(B));
    TensorF eps(x0.shape), x_t(x0.shape);
    for (int64_t b = 0; b < B; ++b) {
        int t = 1 + static_cast<int>(t_rng.uniform_int(sched_.steps));
        ts[static_cast<size_t>(b)] = t;
        double cs = std::sqrt(sched_.alpha_bar(t)), cn = std::sqrt(1.0 - sched_.alpha_bar(t));
        for (int64_t i = 0; i < npix; ++i) {
            float e = static_cast<float>(noise_rng.normal());
            eps[b * npix + i] = e;
            x_t[b * npix + i] = static_cast<float>(cs * x0[b * npix + i] + cn * e);
        }
    }
    TensorF eps_hat = predict_eps(x_t, ts, encode_batch(x0));
    double acc = 0;
    for (int64_t i = 0; i < eps.numel(); ++i) acc += std::fabs(static_cast<double>(eps_hat[i]) - eps[i]);
    return static_cast<float>(acc / static_cast<double>(eps.numel()));
}

void DiffusionAutoencoder::save(const std::filesystem::path& path) const {
    TensorMap map;
    for (const auto& name : params_.names()) map[name] = params_.get(name).value;
    TensorF betas({sched_.steps});
    for (int t = 0; t < sched_.steps; ++t) betas[t] = static_cast<float>(sched_.betas[static_cast<size_t>(t)]);
    map["schedule.betas"] = betas;
    map["model.config"] = TensorF({5}, {static_cast<float>(cfg_.height), static_cast<float>(cfg_.width),
                                        static_cast<float>(cfg_.latent_dim), static_cast<float>(cfg_.base_width),
                                        static_cast<float>(cfg_.emb_dim)});
    save_checkpoint(path, map);
}

DiffusionAutoencoder DiffusionAutoencoder::load(const std::filesystem::path& path) {
    TensorMap map = load_checkpoint(path);
    auto cfg_it = map.find("model.config");
    auto betas_it = map.find("schedule.betas");
    if (cfg_it == map.end() || betas_it == map.end())
        fail("model: checkpoint " + path.string() + " lacks model.config/schedule.betas");
    ModelConfig cfg;
    cfg.height = static_cast<int>(cfg_it->second[0]);
    cfg.width = static_cast<int>(cfg_it->second[1]);
    cfg.latent_dim = static_cast<int>(cfg_it->second[2]);
    cfg.base_width = static_cast<int>(cfg_it->second[3]);
    cfg.emb_dim = static_cast<int>(cfg_it->second[4]);
    NoiseSchedule sched;
    sched.steps = static_cast<int>(betas_it->second.numel());
    double acc = 1.0;
    for (int t = 0; t < sched.steps; ++t) {
        double beta = betas_it->second[t];
        sched.betas.push_back(beta);
        acc *= 1.0 - beta;
        sched.alphas_cum.push_back(acc);
    }
    DiffusionAutoencoder model(cfg, sched);
    model.init_params(0);  // layout; values overwritten below
    for (const auto& name : model.params_.names()) {
        auto it = map.find(name);
        if (it == map.end()) fail("model: checkpoint " + path.string() + " missing parameter '" + name + "'");
        if (it->second.shape != model.params_.get(name).value.shape)
            fail("model: checkpoint parameter '" + name + "' has shape " + shape_str(it->second.shape) +
                 ", expected " + shape_str(model.params_.get(name).value.shape));
        model.params_.get(name).value = it->second;
    }
    return model;
}

}  // namespace pgx
