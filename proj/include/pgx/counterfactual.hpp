#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pgx/diffusion.hpp"
#include "pgx/head.hpp"
#include "pgx/synthetic.hpp"

namespace pgx {

enum class Direction { Enhance, Mitigate };

inline const char* direction_name(Direction d) { return d == Direction::Enhance ? "enhance" : "mitigate"; }

struct ManipulationSpec {
    std::string case_id;
    int slice = 0;    // n
    int feature = 0;  // m
    int cls = 0;      // c
    Direction direction = Direction::Enhance;
    double alpha = 0;  // step size, must be > 0

    void validate(const HeadConfig& cfg) const;
};

// grad_{z_n} s_{n,m}: for the linear first layer this is exactly row m of
// W1[n]. The autodiff variant recomputes it through the tape and exists so
// the two routes can be cross-checked.
std::vector<double> feature_gradient(const PrognosticHead& head, int n, int m);
std::vector<double> feature_gradient_autodiff(const PrognosticHead& head, int n, int m,
                                              const std::vector<float>& z_n);

// z' = z +- alpha * sgn(W2[c][n,m]) * g/|g|. The gradient is unit-normalized
// so the closed-form contribution change below holds exactly.
std::vector<double> manipulate(const std::vector<double>& z_n, const ManipulationSpec& spec,
                               const PrognosticHead& head);

// |contribution change| = alpha * |W2[c][n,m]| * ||W1[n] row m||_2
double predicted_contribution_change(const PrognosticHead& head, int n, int m, int c, double alpha);

struct ApplyVerifyResult {
    std::vector<double> z_prime;
    double v_before = 0;
    double v_predicted = 0;  // v_before plus the signed predicted change
    double v_measured = 0;   // recomputed through the head with z' substituted
    std::vector<double> s_before, s_after;
};

// Runs the manipulation, recomputes features and contributions, and fails
// hard if the measured change deviates from the closed form by more than
// 1e-5 relative; features of untouched slices must be bit-identical.
ApplyVerifyResult apply_and_verify(const std::vector<std::vector<double>>& latents, const ManipulationSpec& spec,
                                   const PrognosticHead& head);

struct CounterfactualResult {
    ManipulationSpec spec;
    std::vector<double> z_original, z_manipulated;
    double v_before = 0, v_predicted = 0, v_measured = 0;
    TensorF decoded_original;       // unclamped
    TensorF decoded_counterfactual; // unclamped, same x_T / schedule / stride
    std::optional<MeasuredFactors> factors_original, factors_counterfactual;
};

struct CounterfactualContext {
    const DiffusionAutoencoder* model = nullptr;
    int stride = 5;
    uint64_t seed = 0;
    std::filesystem::path cache_dir;  // per-case stochastic codes persist here
    bool measure_oracle = true;       // run measure_factors on decoded pairs
};

// Loads (or draws and caches) the per-case x_T, decodes both latents with it,
// and measures the factor oracle on the decoded pair.
CounterfactualResult generate_counterfactual(const CaseRecord& rec, const ManipulationSpec& spec,
                                             const CounterfactualContext& ctx, const PrognosticHead& head);

// Per-(case, feature, class) panel: [original | enhanced | mitigated] with a
// 2-pixel mid-gray gutter, plus per-direction difference images mapped by
// g = 128 + 63.75 * (cf - original), and a CSV of the numeric outcomes.
void emit_panels(const std::vector<CounterfactualResult>& results, const std::filesystem::path& out_dir);

constexpr int kPanelGutter = 2;

}  // namespace pgx
