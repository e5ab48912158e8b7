#include "pgx/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "pgx/sha256.hpp"

namespace pgx {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename T>
T parse_number(const std::string& v, const std::string& key) {
    std::istringstream ss(v);
    T out;
    ss >> out;
    if (ss.fail() || !ss.eof()) fail_config("config: cannot parse value '" + v + "' for key '" + key + "'");
    return out;
}

const std::map<std::string, Field>& schema() {
    auto num_field = [](auto member) {
        using M = decltype(member);
        return Field{
            [member](RunConfig& c, const std::string& key, const std::string& v) {
                c.*member = parse_number<std::remove_reference_t<decltype(std::declval<RunConfig>().*std::declval<M>())>>(v, key);
            },
            [member](const RunConfig& c) {
                std::ostringstream os;
                os.precision(17);
                os << c.*member;
                return os.str();
            }};
    };
    static const std::map<std::string, Field> s = {
        {"profile.name",
         {[](RunConfig& c, const std::string&, const std::string& v) { c.profile_name = v; },
          [](const RunConfig& c) { return c.profile_name; }}},
        {"image.h", num_field(&RunConfig::image_h)},
        {"image.w", num_field(&RunConfig::image_w)},
        {"latent.dim", num_field(&RunConfig::latent_dim)},
        {"model.base_width", num_field(&RunConfig::base_width)},
        {"model.emb_dim", num_field(&RunConfig::emb_dim)},
        {"schedule.steps", num_field(&RunConfig::schedule_steps)},
        {"schedule.beta_min", num_field(&RunConfig::beta_min)},
        {"schedule.beta_max", num_field(&RunConfig::beta_max)},
        {"schedule.stride", num_field(&RunConfig::schedule_stride)},
        {"head.slices", num_field(&RunConfig::head_slices)},
        {"head.features", num_field(&RunConfig::head_features)},
        {"head.classes", num_field(&RunConfig::head_classes)},
        {"ae.lr", num_field(&RunConfig::ae_lr)},
        {"ae.batch", num_field(&RunConfig::ae_batch)},
        {"ae.epochs", num_field(&RunConfig::ae_epochs)},
        {"head.lr", num_field(&RunConfig::head_lr)},
        {"head.batch", num_field(&RunConfig::head_batch)},
        {"head.epochs", num_field(&RunConfig::head_epochs)},
        {"data.cases", num_field(&RunConfig::data_cases)},
        {"data.class1_prior", num_field(&RunConfig::class1_prior)},
        {"data.test_fraction", num_field(&RunConfig::test_fraction)},
        {"data.val_fraction", num_field(&RunConfig::val_fraction)},
        {"seed", num_field(&RunConfig::seed)},
        {"cf.alpha_sigma", num_field(&RunConfig::alpha_sigma)},
        {"reason.rho", num_field(&RunConfig::rho)},
    };
    return s;
}

}  // namespace

void RunConfig::validate() const {
    auto positive = [](auto v, const char* what) {
        if (!(v > 0)) fail_config(std::string("config: ") + what + " must be positive");
    };
    positive(image_h, "image.h");
    positive(image_w, "image.w");
    positive(latent_dim, "latent.dim");
    positive(base_width, "model.base_width");
    positive(emb_dim, "model.emb_dim");
    positive(schedule_steps, "schedule.steps");
    positive(schedule_stride, "schedule.stride");
    positive(head_slices, "head.slices");
    positive(head_features, "head.features");
    positive(ae_lr, "ae.lr");
    positive(ae_batch, "ae.batch");
    positive(ae_epochs, "ae.epochs");
    positive(head_lr, "head.lr");
    positive(head_batch, "head.batch");
    positive(head_epochs, "head.epochs");
    positive(data_cases, "data.cases");
    positive(alpha_sigma, "cf.alpha_sigma");
    if (head_classes < 2) fail_config("config: head.classes must be >= 2");
    if (!(beta_min > 0 && beta_min <= beta_max && beta_max < 1))
        fail_config("config: schedule betas must satisfy 0 < beta_min <= beta_max < 1");
    if (!(class1_prior > 0 && class1_prior < 1)) fail_config("config: data.class1_prior must be in (0,1)");
    if (!(test_fraction > 0 && test_fraction < 1)) fail_config("config: data.test_fraction must be in (0,1)");
    if (!(val_fraction >= 0 && test_fraction + val_fraction < 1))
        fail_config("config: data.val_fraction leaves no training data");
    if (!(rho > 0 && rho <= 1)) fail_config("config: reason.rho must be in (0,1]");
    if (image_h % 4 != 0 || image_w % 4 != 0) fail_config("config: image extents must be divisible by 4");
}

std::string RunConfig::canonical() const {
    std::ostringstream os;
    for (const auto& [key, field] : schema()) os << key << " = " << field.get(*this) << "\n";
    return os.str();
}

std::string RunConfig::hash() const { return Sha256::of_string(canonical()); }

RunConfig parse_config(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            fail_config("config: missing '=' at " + origin + ":" + std::to_string(lineno));
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        auto it = schema().find(key);
        if (it == schema().end()) fail_config("config: unknown key '" + key + "' at " + origin + ":" + std::to_string(lineno));
        it->second.set(cfg, key, value);
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail_io("config: cannot open " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config(buf.str(), path.string());
}

}  // namespace pgx
