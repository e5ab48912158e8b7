#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pgx/checkpoint.hpp"
#include "pgx/pgm.hpp"
#include "pgx/rng.hpp"
#include "pgx/sha256.hpp"

using namespace pgx;
namespace fs = std::filesystem;

namespace {
fs::path tmpdir() {
    auto p = fs::temp_directory_path() / "pgx_fmt_test";
    fs::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("checkpoint round-trips bit-exactly") {
    RngStream rng(1, "ckpt");
    TensorMap map;
    map["enc.w"] = TensorF({3, 4});
    for (auto& v : map["enc.w"].data) v = static_cast<float>(rng.normal());
    map["w2.0"] = TensorF({8});
    for (auto& v : map["w2.0"].data) v = static_cast<float>(rng.uniform(-5, 5));
    map["odd\xc3\xa9 name"] = TensorF({1}, {42.5f});

    auto p = tmpdir() / "roundtrip.pgxc";
    save_checkpoint(p, map);
    TensorMap back = load_checkpoint(p);
    REQUIRE(back.size() == map.size());
    for (auto& [name, t] : map) {
        REQUIRE(back.count(name) == 1);
        CHECK(back[name].shape == t.shape);
        CHECK(back[name].data == t.data);  // bit-exact
    }
    // header: magic + version
    std::ifstream is(p, std::ios::binary);
    char magic[4];
    is.read(magic, 4);
    CHECK(std::string(magic, 4) == "PGXC");
}

TEST_CASE("checkpoint rejects corrupt inputs") {
    auto p = tmpdir() / "bad.pgxc";
    {
        std::ofstream os(p, std::ios::binary);
        os << "NOPE";
    }
    CHECK_THROWS_AS(load_checkpoint(p), Error);
    CHECK_THROWS_AS(load_checkpoint(tmpdir() / "missing.pgxc"), IoError);
}

TEST_CASE("pgm round-trips 8-bit images and maps endpoints") {
    CHECK(pixel_to_unit(255) == doctest::Approx(1.0));
    CHECK(pixel_to_unit(0) == doctest::Approx(-1.0));
    CHECK(unit_to_pixel(1.0f) == 255);
    CHECK(unit_to_pixel(-1.0f) == 0);

    PgmImage img;
    img.height = 3;
    img.width = 5;
    RngStream rng(2, "pgm");
    img.pixels.resize(15);
    for (auto& px : img.pixels) px = static_cast<uint8_t>(rng.uniform_int(256));
    auto p = tmpdir() / "img.pgm";
    write_pgm(p, img);
    PgmImage back = read_pgm(p);
    CHECK(back.height == 3);
    CHECK(back.width == 5);
    CHECK(back.pixels == img.pixels);

    // quantize -> write -> read -> quantize is stable
    TensorF t = pgm_to_tensor(back);
    PgmImage again = tensor_to_pgm(t);
    CHECK(again.pixels == img.pixels);
}

TEST_CASE("pgm rejects color and truncated files") {
    auto p = tmpdir() / "color.pgm";
    {
        std::ofstream os(p, std::ios::binary);
        os << "P6\n2 2\n255\n";
        os.write("xxxxxxxxxxxx", 12);
    }
    CHECK_THROWS_WITH_AS(read_pgm(p), doctest::Contains("color"), Error);
    auto q = tmpdir() / "trunc.pgm";
    {
        std::ofstream os(q, std::ios::binary);
        os << "P5\n4 4\n255\n";
        os.write("ab", 2);
    }
    CHECK_THROWS_WITH_AS(read_pgm(q), doctest::Contains("truncated"), Error);
}

TEST_CASE("sha256 matches known vectors") {
    CHECK(Sha256::of_string("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(Sha256::of_string("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(Sha256::of_string("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    // streaming equals one-shot across block boundaries
    std::string long_msg(150, 'a');
    Sha256 s;
    s.update(long_msg.data(), 70);
    s.update(long_msg.data() + 70, 80);
    CHECK(s.hex_digest() == Sha256::of_string(long_msg));
}
