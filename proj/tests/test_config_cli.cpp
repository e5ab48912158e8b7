#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "pgx/config.hpp"
#include "pgx/synthetic.hpp"

using namespace pgx;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    std::string cmd = std::string(PGX_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

fs::path make_config(const std::string& body, const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "pgx_cli_test";
    fs::create_directories(dir);
    fs::path p = dir / name;
    std::ofstream os(p);
    os << body;
    return p;
}

}  // namespace

TEST_CASE("config parsing: defaults, overrides, comments") {
    RunConfig cfg = parse_config("# comment only\n");
    CHECK(cfg.image_h == 16);
    CHECK(cfg.seed == 42);

    RunConfig cfg2 = parse_config(
        "image.h = 32\n"
        "image.w = 32   # inline comment\n"
        "ae.lr = 1e-4\n"
        "seed = 7\n");
    CHECK(cfg2.image_h == 32);
    CHECK(cfg2.ae_lr == doctest::Approx(1e-4));
    CHECK(cfg2.seed == 7);
}

TEST_CASE("config rejects unknown keys and bad values") {
    CHECK_THROWS_WITH_AS(parse_config("image.hh = 16\n"), doctest::Contains("unknown key"), ConfigError);
    CHECK_THROWS_AS(parse_config("image.h = banana\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("data.test_fraction = 1.5\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("schedule.beta_min = 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("image.h\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("reason.rho = 1.2\n"), ConfigError);
}

TEST_CASE("config hash is stable and sensitive") {
    RunConfig a = parse_config("");
    RunConfig b = parse_config("seed = 42\n");  // same as the default
    RunConfig c = parse_config("seed = 43\n");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash() != c.hash());
}

TEST_CASE("cli exit codes distinguish usage, config, and missing-file errors") {
    CHECK(run_cli("definitely-not-a-subcommand") == 2);
    CHECK(run_cli("gen-data") == 2);  // missing required --out
    CHECK(run_cli("--help") == 0);

    auto bad_cfg = make_config("image.h = -4\n", "bad.cfg");
    fs::path out = fs::temp_directory_path() / "pgx_cli_test" / "out_bad";
    CHECK(run_cli("gen-data --config " + bad_cfg.string() + " --out " + out.string()) == 3);

    auto unknown_key = make_config("nope = 1\n", "unknown.cfg");
    CHECK(run_cli("gen-data --config " + unknown_key.string() + " --out " + out.string()) == 3);

    CHECK(run_cli("gen-data --config /nonexistent/x.cfg --out " + out.string()) == 4);

    // missing checkpoint file
    auto tiny = make_config("data.cases = 12\nae.epochs = 1\n", "tiny.cfg");
    fs::path data = fs::temp_directory_path() / "pgx_cli_test" / "data";
    fs::remove_all(data);
    REQUIRE(run_cli("gen-data --config " + tiny.string() + " --out " + data.string()) == 0);
    fs::path out2 = fs::temp_directory_path() / "pgx_cli_test" / "out2";
    CHECK(run_cli("reconstruct --config " + tiny.string() + " --checkpoint /nonexistent/ae.pgxc --data " +
                  data.string() + " --out " + out2.string()) == 4);
}

TEST_CASE("gen-data stage contract: manifest plus pgm tree plus run manifest") {
    auto tiny = make_config("data.cases = 12\n", "gen.cfg");
    fs::path data = fs::temp_directory_path() / "pgx_cli_test" / "data_contract";
    fs::remove_all(data);
    REQUIRE(run_cli("gen-data --config " + tiny.string() + " --out " + data.string()) == 0);
    CHECK(fs::exists(data / "manifest.csv"));
    CHECK(fs::exists(data / "run.json"));
    DatasetManifest m = load_manifest_csv(data / "manifest.csv");
    CHECK(m.case_ids().size() == 12);
    for (const auto& id : m.case_ids())
        for (int k = 0; k < m.slice_count(id); ++k) CHECK(fs::exists(m.slice_path(id, k)));
    // splits are present and disjoint by construction of the tags
    int train = 0, val = 0, test = 0;
    for (const auto& id : m.case_ids()) {
        for (const auto& r : m.rows)
            if (r.case_id == id && r.slice_idx == 0) {
                if (r.split == "train") ++train;
                if (r.split == "val") ++val;
                if (r.split == "test") ++test;
                break;
            }
    }
    CHECK(train + val + test == 12);
    CHECK(test >= 2);
}
