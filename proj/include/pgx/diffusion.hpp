#pragma once

#include <filesystem>
#include <vector>

#include "pgx/graph.hpp"
#include "pgx/optim.hpp"
#include "pgx/rng.hpp"
#include "pgx/tensor.hpp"

namespace pgx {

// Cumulative signal levels for the forward/reverse diffusion recursions.
// alpha_bar(t) is strictly decreasing in t, with alpha_bar(0) defined as 1.
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> betas;       // beta_t for t = 1..T (index t-1)
    std::vector<double> alphas_cum;  // cumulative products (index t-1)

    static NoiseSchedule make(int steps, double beta_min, double beta_max);
    double alpha_bar(int t) const;  // valid for t in [0, T]
};

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps
TensorF q_sample(const TensorF& x0, int t, const TensorF& eps, const NoiseSchedule& sched);

// Deterministic reverse update from t_hi to t_lo (< t_hi) given the
// predicted noise. Pure function; coefficients evaluated in double.
TensorF ddim_step_to(const TensorF& x_t, int t_hi, int t_lo, const TensorF& eps_hat, const NoiseSchedule& sched);

struct ModelConfig {
    int height = 16, width = 16;
    int latent_dim = 32;
    int base_width = 32;
    int emb_dim = 64;
};

// Encoder + conditional denoiser trained in tandem on the noise-prediction
// objective; reconstruction runs the strided DDIM recursion conditioned on z.
class DiffusionAutoencoder {
public:
    DiffusionAutoencoder(ModelConfig cfg, NoiseSchedule sched);

    void init_params(uint64_t seed);

    // deterministic latent for a [H,W] slice (or [B,1,H,W] batch)
    std::vector<float> encode(const TensorF& slice) const;
    TensorF encode_batch(const TensorF& x0) const;  // [B,1,H,W] -> [B,D]

    // predicted noise for a batch at per-sample timesteps
    TensorF predict_eps(const TensorF& x_t, const std::vector<int>& ts, const TensorF& z) const;

    // single-case Eq.-style reverse step from t to t-1
    TensorF ddim_step(const TensorF& x_t, int t, const std::vector<float>& z) const;

    // full reverse recursion from x_T, visiting t = T, T-stride, ... , then 0
    TensorF reconstruct(const std::vector<float>& z, const TensorF& x_T, int stride) const;

    // one tandem optimization step on a batch of clean slices [B,1,H,W];
    // returns the scalar loss
    float train_step(const TensorF& x0, Adam<float>& adam, RngStream& t_rng, RngStream& noise_rng);

    // loss only (no update); used for held-out monitoring
    float eval_loss(const TensorF& x0, RngStream& t_rng, RngStream& noise_rng) const;

    void save(const std::filesystem::path& path) const;
    static DiffusionAutoencoder load(const std::filesystem::path& path);

    const ModelConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return sched_; }
    ParamStore<float>& params() { return params_; }
    const ParamStore<float>& params() const { return params_; }

private:
    ModelConfig cfg_;
    NoiseSchedule sched_;
    ParamStore<float> params_;

    TensorF time_embedding(const std::vector<int>& ts) const;
    int build_encoder(Tape<float>& tape, int x) const;
    int build_denoiser(Tape<float>& tape, int x_t, int temb, int z) const;
    friend struct DiffusionGraphProbe;
};

// clamp to [-1,1] for display/export only
TensorF clamp_unit(const TensorF& x);

}  // namespace pgx
