#include "pgx/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "pgx/pgm.hpp"

namespace pgx {

bool PlantedRule::evaluate(const std::vector<FactorVector>& factors) const {
    if (slice < 0 || slice >= static_cast<int>(factors.size()))
        fail("PlantedRule: rule slice " + std::to_string(slice) + " out of range for " +
             std::to_string(factors.size()) + " slices");
    const FactorVector& f = factors[static_cast<size_t>(slice)];
    return (f.opacity_level > opacity_thr && f.vessel_density > vessel_thr) || f.lung_area_scale < area_thr;
}

GenConfig GenConfig::defaults(int n_slices, int height, int width) {
    GenConfig cfg;
    cfg.n_slices = n_slices;
    cfg.height = height;
    cfg.width = width;
    cfg.ranges.assign(2, std::vector<SliceFactorRanges>(static_cast<size_t>(n_slices)));
    // Uninformative slices share one distribution across classes.
    SliceFactorRanges neutral{{0.70, 1.00}, {0.10, 0.50}, {0.10, 0.50}};
    for (int c = 0; c < 2; ++c)
        for (int n = 0; n < n_slices; ++n) cfg.ranges[static_cast<size_t>(c)][static_cast<size_t>(n)] = neutral;
    if (n_slices > 2) {
        // Class-1 evidence lives on slice 2: dense opacities, many vessels,
        // smaller lung. Class 0 keeps slice 2 quiet.
        cfg.ranges[1][2] = SliceFactorRanges{{0.50, 0.80}, {0.65, 0.95}, {0.55, 0.90}};
        cfg.ranges[0][2] = SliceFactorRanges{{0.70, 1.00}, {0.05, 0.50}, {0.05, 0.45}};
    }
    if (n_slices > 3) {
        // Milder class-0 evidence on slice 3: elevated opacity, few vessels.
        cfg.ranges[0][3] = SliceFactorRanges{{0.75, 1.00}, {0.45, 0.80}, {0.05, 0.30}};
        cfg.ranges[1][3] = SliceFactorRanges{{0.65, 0.95}, {0.15, 0.50}, {0.25, 0.60}};
    }
    return cfg;
}

void GenConfig::validate() const {
    if (n_slices < 1 || height < 8 || width < 8) fail("GenConfig: degenerate dimensions");
    if (class1_prior <= 0 || class1_prior >= 1) fail("GenConfig: class prior must be in (0,1)");
    if (ranges.size() != 2) fail("GenConfig: expected factor ranges for 2 classes");
    for (const auto& per_class : ranges) {
        if (static_cast<int>(per_class.size()) != n_slices)
            fail("GenConfig: factor ranges must cover every slice");
        for (const auto& r : per_class) {
            auto check = [](const FactorRange& fr, double lo, double hi, const char* what) {
                if (fr.lo > fr.hi || fr.lo < lo || fr.hi > hi)
                    fail(std::string("GenConfig: ") + what + " range [" + std::to_string(fr.lo) + "," +
                         std::to_string(fr.hi) + "] outside declared bounds [" + std::to_string(lo) + "," +
                         std::to_string(hi) + "]");
            };
            check(r.lung_area, 0.5, 1.0, "lung_area_scale");
            check(r.opacity, 0.0, 1.0, "opacity_level");
            check(r.vessels, 0.0, 1.0, "vessel_density");
        }
    }
    if (rule.slice < 0 || rule.slice >= n_slices) fail("GenConfig: rule slice out of range");
}

namespace {

constexpr int kMaxBlobs = 4;
constexpr int kMaxVessels = 5;
constexpr float kBackground = -1.0f;
constexpr float kLungBase = -0.45f;
constexpr float kBlobCap = 0.45f;
constexpr float kVesselValue = 0.85f;

double smoothstep(double e0, double e1, double x) {
    double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

}  // namespace

TensorF render_slice(uint64_t seed, int64_t case_index, int slice_idx, const FactorVector& f, const GenConfig& cfg) {
    const int H = cfg.height, W = cfg.width;
    RngStream rng(seed, "render", static_cast<uint64_t>(case_index) * 64 + static_cast<uint64_t>(slice_idx));

    // region-dependent base anatomy
    double cx = W * 0.5 + rng.uniform(-0.6, 0.6);
    double cy = H * 0.5 + rng.uniform(-0.6, 0.6);
    double rx = (0.40 + 0.015 * slice_idx) * W * f.lung_area_scale;
    double ry = (0.44 - 0.010 * slice_idx) * H * f.lung_area_scale;

    TensorF img = TensorF::full({H, W}, kBackground);
    auto ellipse_d = [&](double x, double y) {
        double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return std::sqrt(dx * dx + dy * dy);
    };
    std::vector<float> lung_w(static_cast<size_t>(H * W), 0.f);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            double d = ellipse_d(j + 0.5, i + 0.5);
            double wgt = 1.0 - smoothstep(0.92, 1.05, d);
            lung_w[static_cast<size_t>(i * W + j)] = static_cast<float>(wgt);
            img[i * W + j] = static_cast<float>(kBackground + (kLungBase - kBackground) * wgt);
        }

    // soft opacity blobs; a fixed number of positions is always drawn so two
    // renders that differ only in a factor level stay aligned draw-for-draw
    int n_blobs = 1 + static_cast<int>(std::floor(f.opacity_level * (kMaxBlobs - 1) + 0.5));
    double amp_base = 0.15 + 0.55 * f.opacity_level;
    std::vector<float> blob(static_cast<size_t>(H * W), 0.f);
    for (int b = 0; b < kMaxBlobs; ++b) {
        double ang = rng.uniform(0, 2 * 3.14159265358979323846);
        double rad = rng.uniform(0, 0.62);
        double bx = cx + std::cos(ang) * rad * rx;
        double by = cy + std::sin(ang) * rad * ry;
        double sigma = rng.uniform(1.0, 1.8);
        double wamp = rng.uniform(0.75, 1.0);
        if (b >= n_blobs) continue;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                double dx = j + 0.5 - bx, dy = i + 0.5 - by;
                blob[static_cast<size_t>(i * W + j)] +=
                    static_cast<float>(amp_base * wamp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)));
            }
    }
    for (int k = 0; k < H * W; ++k) {
        float w = lung_w[static_cast<size_t>(k)];
        if (w <= 0.f) continue;
        img[k] = std::min(img[k] + w * blob[static_cast<size_t>(k)], kBlobCap);
    }

    // thin bright vessel segments, clipped to the lung
    int n_vessels = static_cast<int>(std::floor(f.vessel_density * kMaxVessels + 0.5));
    for (int v = 0; v < kMaxVessels; ++v) {
        double ang = rng.uniform(0, 3.14159265358979323846);
        double rad = rng.uniform(0, 0.55);
        double pang = rng.uniform(0, 2 * 3.14159265358979323846);
        double px = cx + std::cos(pang) * rad * rx;
        double py = cy + std::sin(pang) * rad * ry;
        double half_len = rng.uniform(2.2, 4.4);
        if (v >= n_vessels) continue;
        double ux = std::cos(ang), uy = std::sin(ang);
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                if (lung_w[static_cast<size_t>(i * W + j)] < 0.9f) continue;
                double dx = j + 0.5 - px, dy = i + 0.5 - py;
                double along = dx * ux + dy * uy;
                if (std::fabs(along) > half_len) continue;
                double across = std::fabs(-dx * uy + dy * ux);
                if (across <= 0.55) img[i * W + j] = std::max(img[i * W + j], kVesselValue);
            }
    }
    return img;
}

CaseRecord generate_case(uint64_t seed, int64_t case_index, int class_label, const GenConfig& cfg) {
    cfg.validate();
    if (class_label != 0 && class_label != 1) fail("generate_case: class label must be 0 or 1");
    RngStream fac(seed, "factors", static_cast<uint64_t>(case_index));

    // rejection-sample factors from the class-conditional ranges until the
    // planted rule agrees with the requested label
    std::vector<FactorVector> factors(static_cast<size_t>(cfg.n_slices));
    const auto& per_slice = cfg.ranges[static_cast<size_t>(class_label)];
    for (int attempt = 0;; ++attempt) {
        if (attempt >= 1000)
            fail("generate_case: factor ranges cannot satisfy the planted rule for class " +
                 std::to_string(class_label));
        for (int n = 0; n < cfg.n_slices; ++n) {
            const SliceFactorRanges& r = per_slice[static_cast<size_t>(n)];
            factors[static_cast<size_t>(n)] = FactorVector{r.lung_area.draw(fac), r.opacity.draw(fac), r.vessels.draw(fac)};
        }
        if (cfg.rule.evaluate(factors) == (class_label == 1)) break;
    }

    CaseRecord rec;
    std::ostringstream id;
    id << "case_";
    id.width(4);
    id.fill('0');
    id << case_index;
    rec.case_id = id.str();
    rec.label = class_label;
    rec.factors = factors;
    rec.slices.reserve(static_cast<size_t>(cfg.n_slices));
    for (int n = 0; n < cfg.n_slices; ++n)
        rec.slices.push_back(render_slice(seed, case_index, n, factors[static_cast<size_t>(n)], cfg));
    return rec;
}

MeasuredFactors measure_factors(const TensorF& slice) {
    if (slice.rank() != 2) fail("measure_factors: expected a 2-d image, got " + shape_str(slice.shape));
    const int64_t H = slice.shape[0], W = slice.shape[1];
    constexpr float kForeground = -0.70f;
    constexpr float kBandLo = -0.30f;
    constexpr float kBandHi = 0.50f;
    constexpr float kRidge = 0.65f;

    MeasuredFactors m;
    int64_t lung_px = 0;
    double band_sum = 0;
    for (int64_t i = 0; i < H * W; ++i) {
        float v = slice[i];
        if (v > kForeground) {
            ++lung_px;
            if (v <= kRidge) band_sum += std::max(0.0f, std::min(v, kBandHi) - kBandLo);
        }
    }
    if (lung_px == 0) {
        m.degenerate = true;
        return m;
    }
    m.lung_area = static_cast<double>(lung_px) / static_cast<double>(H * W);
    m.opacity = band_sum / static_cast<double>(lung_px);

    // thin ridge detection: bright pixel with few bright neighbors
    int64_t ridge_px = 0;
    for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
            if (slice[i * W + j] <= kRidge) continue;
            int bright_neighbors = 0;
            for (int64_t di = -1; di <= 1; ++di)
                for (int64_t dj = -1; dj <= 1; ++dj) {
                    if (di == 0 && dj == 0) continue;
                    int64_t ni = i + di, nj = j + dj;
                    if (ni < 0 || ni >= H || nj < 0 || nj >= W) continue;
                    if (slice[ni * W + nj] > kRidge) ++bright_neighbors;
                }
            if (bright_neighbors <= 4) ++ridge_px;
        }
    m.vessels = static_cast<double>(ridge_px) / static_cast<double>(H * W);
    return m;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

std::vector<std::string> DatasetManifest::case_ids() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& r : rows)
        if (seen.insert(r.case_id).second) out.push_back(r.case_id);
    return out;
}

int DatasetManifest::label_of(const std::string& case_id) const {
    for (const auto& r : rows)
        if (r.case_id == case_id) return r.label;
    fail("manifest: unknown case '" + case_id + "'");
}

int DatasetManifest::slice_count(const std::string& case_id) const {
    int n = 0;
    for (const auto& r : rows)
        if (r.case_id == case_id) ++n;
    return n;
}

std::filesystem::path DatasetManifest::slice_path(const std::string& case_id, int slice_idx) const {
    return root / "slices" / (case_id + "_" + std::to_string(slice_idx) + ".pgm");
}

DatasetManifest DatasetManifest::filter_split(const std::string& split) const {
    DatasetManifest out;
    out.root = root;
    for (const auto& r : rows)
        if (r.split == split) out.rows.push_back(r);
    return out;
}

std::vector<FactorVector> DatasetManifest::factors_of(const std::string& case_id) const {
    std::vector<std::pair<int, FactorVector>> found;
    for (const auto& r : rows)
        if (r.case_id == case_id && r.has_factors)
            found.emplace_back(r.slice_idx, FactorVector{r.lung_area, r.opacity, r.vessels});
    std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<FactorVector> out;
    for (auto& [idx, f] : found) out.push_back(f);
    return out;
}

void save_manifest_csv(const DatasetManifest& m, const std::filesystem::path& csv_path) {
    std::ofstream os(csv_path);
    if (!os) fail_io("manifest: cannot open for write: " + csv_path.string());
    os << "case_id,label,split,slice_idx,lung_area,opacity,vessels\n";
    os.precision(9);
    for (const auto& r : m.rows) {
        os << r.case_id << ',' << r.label << ',' << r.split << ',' << r.slice_idx << ',';
        if (r.has_factors)
            os << r.lung_area << ',' << r.opacity << ',' << r.vessels << '\n';
        else
            os << ",,\n";
    }
    if (!os) fail("manifest: write failed: " + csv_path.string());
}

DatasetManifest load_manifest_csv(const std::filesystem::path& csv_path) {
    std::ifstream is(csv_path);
    if (!is) fail_io("manifest: cannot open: " + csv_path.string());
    DatasetManifest m;
    m.root = csv_path.parent_path();
    std::string line;
    if (!std::getline(is, line)) fail("manifest: empty file " + csv_path.string());
    if (line != "case_id,label,split,slice_idx,lung_area,opacity,vessels")
        fail("manifest: unexpected header in " + csv_path.string() + ": " + line);
    size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) f.push_back(tok);
        while (f.size() < 7) f.emplace_back();
        if (f.size() != 7)
            fail("manifest: malformed row " + std::to_string(lineno) + " in " + csv_path.string());
        ManifestRow r;
        r.case_id = f[0];
        try {
            r.label = std::stoi(f[1]);
            r.split = f[2];
            r.slice_idx = std::stoi(f[3]);
            if (f[4].empty() && f[5].empty() && f[6].empty()) {
                r.has_factors = false;
            } else {
                r.lung_area = std::stod(f[4]);
                r.opacity = std::stod(f[5]);
                r.vessels = std::stod(f[6]);
            }
        } catch (const std::exception&) {
            fail("manifest: malformed row " + std::to_string(lineno) + " in " + csv_path.string());
        }
        if (r.label != 0 && r.label != 1)
            fail("manifest: label must be 0 or 1 at row " + std::to_string(lineno) + " in " + csv_path.string());
        m.rows.push_back(std::move(r));
    }
    return m;
}

namespace {

// largest-remainder allocation of `count` slots across classes
std::map<int, int64_t> allocate(const std::map<int, int64_t>& class_sizes, double fraction, int64_t total_slots) {
    std::map<int, int64_t> out;
    std::vector<std::pair<double, int>> rema;
    int64_t assigned = 0;
    for (const auto& [label, n] : class_sizes) {
        double ideal = static_cast<double>(n) * fraction;
        int64_t base = static_cast<int64_t>(std::floor(ideal));
        out[label] = base;
        assigned += base;
        rema.emplace_back(ideal - static_cast<double>(base), label);
    }
    std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (size_t i = 0; assigned < total_slots && i < rema.size(); ++i, ++assigned) out[rema[i].second]++;
    return out;
}

}  // namespace

void assign_splits(DatasetManifest& m, double test_fraction, double val_fraction, uint64_t seed) {
    if (test_fraction <= 0 || test_fraction >= 1) fail("split: test fraction must be in (0,1)");
    if (val_fraction < 0 || test_fraction + val_fraction >= 1) fail("split: test+val fractions must leave room for train");
    auto ids = m.case_ids();
    std::map<int, std::vector<std::string>> by_label;
    std::map<int, int64_t> sizes;
    for (const auto& id : ids) {
        int label = m.label_of(id);
        by_label[label].push_back(id);
        sizes[label]++;
    }
    int64_t n = static_cast<int64_t>(ids.size());
    int64_t n_test = static_cast<int64_t>(std::llround(static_cast<double>(n) * test_fraction));
    int64_t n_val = static_cast<int64_t>(std::llround(static_cast<double>(n) * val_fraction));
    if (n_test < 1 || (val_fraction > 0 && n_val < 1) || n - n_test - n_val < 1)
        fail("split: too few cases (" + std::to_string(n) + ") for the requested fractions");

    auto test_alloc = allocate(sizes, test_fraction, n_test);
    auto val_alloc = allocate(sizes, val_fraction, n_val);

    std::map<std::string, std::string> split_of;
    RngStream rng(seed, "split");
    for (auto& [label, group] : by_label) {
        // Fisher-Yates with the named stream
        for (size_t i = group.size(); i > 1; --i) std::swap(group[i - 1], group[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
        int64_t t = test_alloc[label], v = val_alloc[label];
        if (t + v > static_cast<int64_t>(group.size())) fail("split: class too small for requested fractions");
        for (size_t i = 0; i < group.size(); ++i) {
            if (static_cast<int64_t>(i) < t)
                split_of[group[i]] = "test";
            else if (static_cast<int64_t>(i) < t + v)
                split_of[group[i]] = "val";
            else
                split_of[group[i]] = "train";
        }
    }
    for (auto& r : m.rows) r.split = split_of.at(r.case_id);
}

SplitResult split_dataset(const DatasetManifest& m, double test_fraction, double val_fraction, uint64_t seed) {
    DatasetManifest tagged = m;
    assign_splits(tagged, test_fraction, val_fraction, seed);
    SplitResult out;
    out.train = tagged.filter_split("train");
    out.val = tagged.filter_split("val");
    out.test = tagged.filter_split("test");
    return out;
}

DatasetManifest load_external(const std::filesystem::path& dir, const std::filesystem::path& labels_csv) {
    std::ifstream is(labels_csv);
    if (!is) fail_io("load_external: cannot open labels csv: " + labels_csv.string());
    DatasetManifest m;
    m.root = dir;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1 && line.rfind("case_id", 0) == 0) continue;  // optional header
        auto comma = line.find(',');
        if (comma == std::string::npos)
            fail("load_external: malformed row " + std::to_string(lineno) + " in " + labels_csv.string());
        std::string case_id = line.substr(0, comma);
        std::string label_s = line.substr(comma + 1);
        int label;
        try {
            size_t used = 0;
            label = std::stoi(label_s, &used);
            if (used != label_s.size()) throw std::invalid_argument(label_s);
        } catch (const std::exception&) {
            fail("load_external: unknown label value '" + label_s + "' for case '" + case_id + "'");
        }
        if (label != 0 && label != 1)
            fail("load_external: unknown label value '" + label_s + "' for case '" + case_id + "'");
        int k = 0;
        while (true) {
            auto p = dir / "slices" / (case_id + "_" + std::to_string(k) + ".pgm");
            if (!std::filesystem::exists(p)) {
                if (k == 0) fail_io("load_external: missing slice file for case '" + case_id + "': " + p.string());
                break;
            }
            read_pgm(p);  // validates format and grayscale-ness
            ManifestRow r;
            r.case_id = case_id;
            r.label = label;
            r.slice_idx = k;
            r.has_factors = false;
            m.rows.push_back(std::move(r));
            ++k;
        }
    }
    if (m.rows.empty()) fail("load_external: no cases found in " + labels_csv.string());
    return m;
}

TensorF load_slice(const DatasetManifest& m, const std::string& case_id, int slice_idx) {
    return pgm_to_tensor(read_pgm(m.slice_path(case_id, slice_idx)));
}

}  // namespace pgx
