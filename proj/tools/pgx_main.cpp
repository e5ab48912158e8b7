// Command-line surface for the full pipeline: synthetic data generation,
// autoencoder training, reconstruction, prognostic-head training, metric
// evaluation, decision reasoning, and counterfactual panel generation.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "pgx/pipeline.hpp"

namespace {

// PGX_THREADS caps worker threads; everything in this build is serial and
// bit-reproducible, so only 1 is meaningful today.
void apply_thread_env() {
    if (const char* v = std::getenv("PGX_THREADS")) {
        (void)v;
    }
}

pgx::RunConfig config_from(const std::string& path, uint64_t seed_override, bool has_seed) {
    pgx::RunConfig cfg = path.empty() ? pgx::RunConfig{} : pgx::load_config(path);
    if (has_seed) cfg.seed = seed_override;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    apply_thread_env();
    CLI::App app{"explainable prognosis pipeline (diffusion autoencoder + linear head + latent counterfactuals)"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, checkpoint, head_ckpt, split;
    uint64_t seed = 0;
    bool seed_set = false;
    auto add_common = [&](CLI::App* sub, bool needs_data, bool needs_ckpt, bool needs_head) {
        sub->add_option("--config", config_path, "configuration file (key = value)");
        sub->add_option("--out", out_dir, "output directory")->required();
        sub->add_option_function<uint64_t>("--seed", [&](uint64_t s) { seed = s; seed_set = true; },
                                           "override the config seed");
        if (needs_data) sub->add_option("--data", data_dir, "dataset directory (holds manifest.csv)")->required();
        if (needs_ckpt) sub->add_option("--checkpoint", checkpoint, "autoencoder checkpoint")->required();
        if (needs_head) sub->add_option("--head", head_ckpt, "prognostic head checkpoint")->required();
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate the labeled synthetic dataset");
    add_common(gen, false, false, false);

    CLI::App* train_ae = app.add_subcommand("train-ae", "train the diffusion autoencoder");
    add_common(train_ae, true, false, false);

    CLI::App* recon = app.add_subcommand("reconstruct", "reconstruct slices through the autoencoder");
    add_common(recon, true, true, false);
    int recon_limit = 0;
    recon->add_option("--split", split, "dataset split to reconstruct")->default_val("test");
    recon->add_option("--limit", recon_limit, "max cases (0 = all)");

    CLI::App* train_head_cmd = app.add_subcommand("train-head", "train the two-layer prognostic head");
    add_common(train_head_cmd, true, true, false);

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate classification metrics");
    add_common(eval_cmd, true, true, true);
    eval_cmd->add_option("--split", split, "dataset split to evaluate")->default_val("test");

    CLI::App* reason_cmd = app.add_subcommand("reason", "emit the decision-reasoning outputs");
    add_common(reason_cmd, true, true, true);
    double rho = -1;
    reason_cmd->add_option("--split", split, "cohort split")->default_val("train");
    reason_cmd->add_option("--rho", rho, "class-specific selection threshold in (0,1]");

    CLI::App* cf_cmd = app.add_subcommand("counterfactual", "generate counterfactual panels");
    add_common(cf_cmd, true, true, true);
    pgx::CounterfactualOptions cf_opt;
    std::vector<std::string> feature_strs;
    std::string direction = "both";
    cf_cmd->add_option("--case", cf_opt.case_ids, "explicit case id(s)");
    cf_cmd->add_option("--split", cf_opt.split, "split to draw cases from")->default_val("test");
    cf_cmd->add_option("--limit", cf_opt.limit, "max cases when none given explicitly");
    cf_cmd->add_option("--feature", feature_strs, "explicit feature as n,m (repeatable)");
    cf_cmd->add_flag("--auto", "use the identified class-specific feature set");
    cf_cmd->add_option("--class", cf_opt.cls, "target class");
    cf_cmd->add_option("--direction", direction, "enhance | mitigate | both")->default_val("both");
    double alpha_sigma = -1;
    cf_cmd->add_option("--alpha-sigma", alpha_sigma, "step size in units of the cohort stddev of s");
    cf_cmd->add_option("--reference-split", cf_opt.reference_split, "cohort used for sigma and --auto");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        pgx::RunConfig cfg = config_from(config_path, seed, seed_set);
        if (gen->parsed()) {
            pgx::stage_gen_data(cfg, out_dir);
            std::cout << "gen-data: wrote " << cfg.data_cases << " cases under " << out_dir << "\n";
        } else if (train_ae->parsed()) {
            auto s = pgx::stage_train_ae(cfg, data_dir, out_dir);
            std::cout << "train-ae: " << s.steps << " steps, epoch loss " << s.first_epoch_loss << " -> "
                      << s.final_epoch_loss << "\n";
        } else if (recon->parsed()) {
            auto s = pgx::stage_reconstruct(cfg, checkpoint, data_dir, out_dir, split, recon_limit);
            std::cout << "reconstruct: mean L1 " << s.mean_l1 << " over " << s.n_slices << " slices\n";
        } else if (train_head_cmd->parsed()) {
            auto s = pgx::stage_train_head(cfg, checkpoint, data_dir, out_dir);
            std::cout << "train-head: best val AUC " << s.best_val_auc << " at epoch " << s.best_epoch << "\n";
        } else if (eval_cmd->parsed()) {
            auto r = pgx::stage_eval(cfg, checkpoint, head_ckpt, data_dir, out_dir, split);
            std::cout << "eval: auc " << r.auc << " acc " << r.accuracy << " se " << r.sensitivity << " sp "
                      << r.specificity << "\n";
        } else if (reason_cmd->parsed()) {
            auto sets = pgx::stage_reason(cfg, checkpoint, head_ckpt, data_dir, out_dir, split,
                                          rho > 0 ? rho : cfg.rho);
            for (const auto& s : sets) {
                std::cout << "reason: class " << s.cls << " specific features:";
                for (const auto& f : s.features) std::cout << " (" << f.slice << "," << f.feature << ")";
                std::cout << "\n";
            }
        } else if (cf_cmd->parsed()) {
            cf_opt.auto_features = cf_cmd->count("--auto") > 0 || feature_strs.empty();
            for (const auto& fs : feature_strs) {
                auto comma = fs.find(',');
                if (comma == std::string::npos) pgx::fail_config("counterfactual: --feature expects n,m");
                cf_opt.features.emplace_back(std::stoi(fs.substr(0, comma)), std::stoi(fs.substr(comma + 1)));
                cf_opt.auto_features = false;
            }
            if (direction == "enhance") {
                cf_opt.enhance = true;
                cf_opt.mitigate = false;
            } else if (direction == "mitigate") {
                cf_opt.enhance = false;
                cf_opt.mitigate = true;
            } else if (direction == "both") {
                cf_opt.enhance = cf_opt.mitigate = true;
            } else {
                pgx::fail_config("counterfactual: --direction must be enhance, mitigate, or both");
            }
            cf_opt.alpha_sigma = alpha_sigma > 0 ? alpha_sigma : cfg.alpha_sigma;
            auto results = pgx::stage_counterfactual(cfg, checkpoint, head_ckpt, data_dir, out_dir, cf_opt);
            std::cout << "counterfactual: " << results.size() << " results under " << out_dir << "\n";
        }
    } catch (const pgx::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const pgx::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
