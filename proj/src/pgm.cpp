#include "pgx/pgm.hpp"

#include <cctype>
#include <fstream>

namespace pgx {

void write_pgm(const std::filesystem::path& path, const PgmImage& img) {
    if (img.pixels.size() != static_cast<size_t>(img.height * img.width))
        fail("pgm: pixel buffer does not match dimensions for " + path.string());
    std::ofstream os(path, std::ios::binary);
    if (!os) fail_io("pgm: cannot open for write: " + path.string());
    os << "P5\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!os) fail("pgm: write failed: " + path.string());
}

namespace {

// next whitespace-delimited token, skipping '#' comments
int64_t read_pnm_int(std::ifstream& is, const std::filesystem::path& path) {
    int c = is.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = is.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = is.get();
    }
    if (c == EOF) fail("pgm: truncated header in " + path.string());
    int64_t v = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        any = true;
        c = is.get();
    }
    if (!any) fail("pgm: malformed header in " + path.string());
    return v;
}

}  // namespace

PgmImage read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail_io("pgm: cannot open: " + path.string());
    char m0 = static_cast<char>(is.get()), m1 = static_cast<char>(is.get());
    if (m0 != 'P' || m1 != '5') {
        if (m0 == 'P' && (m1 == '6' || m1 == '3'))
            fail("pgm: " + path.string() + " is a color PNM, expected 8-bit grayscale P5");
        fail("pgm: bad magic in " + path.string() + ", expected P5");
    }
    PgmImage img;
    img.width = read_pnm_int(is, path);
    img.height = read_pnm_int(is, path);
    int64_t maxval = read_pnm_int(is, path);
    if (maxval != 255) fail("pgm: unsupported maxval " + std::to_string(maxval) + " in " + path.string());
    img.pixels.resize(static_cast<size_t>(img.width * img.height));
    if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
        fail("pgm: truncated pixel data in " + path.string());
    return img;
}

PgmImage tensor_to_pgm(const TensorF& t) {
    if (t.rank() != 2) fail("pgm: expected a 2-d tensor, got " + shape_str(t.shape));
    PgmImage img;
    img.height = t.shape[0];
    img.width = t.shape[1];
    img.pixels.resize(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) img.pixels[static_cast<size_t>(i)] = unit_to_pixel(t[i]);
    return img;
}

TensorF pgm_to_tensor(const PgmImage& img) {
    TensorF t({img.height, img.width});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = pixel_to_unit(img.pixels[static_cast<size_t>(i)]);
    return t;
}

}  // namespace pgx
