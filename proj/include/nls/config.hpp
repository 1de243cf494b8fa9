#pragma once

// Line-based `section.key = value` configuration with a typed key registry.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nls/data.hpp"
#include "nls/errors.hpp"
#include "nls/metrics.hpp"
#include "nls/models.hpp"
#include "nls/odesolve.hpp"
#include "nls/train.hpp"

namespace nls {

enum class EvalSource { model, initial, classical, masks };

inline std::string to_string(EvalSource s) {
    switch (s) {
        case EvalSource::model: return "model";
        case EvalSource::initial: return "initial";
        case EvalSource::classical: return "classical";
        case EvalSource::masks: return "masks";
    }
    return "?";
}

struct AppConfig {
    std::uint64_t seed = 0;
    ode::SolverConfig ode;
    TrainConfig train;
    GeneratorConfig data;
    /// Dataset directory; empty generates the data.* benchmark in memory.
    std::string data_dir;
    ModelKind model_kind = ModelKind::contour_evolution;
    int embed_channels = kDefaultEmbedChannels;
    ClassicalSpeedConfig classical;
    MetricConfig metrics;
    EvalSource eval_source = EvalSource::model;
    std::string eval_split = "val";
    std::string eval_masks_dir;
    int eval_limit = 0;
    /// Initial contour for evolve: LSTF distance map or mask image; empty
    /// uses a centred disk of a quarter of the shorter side.
    std::string evolve_init;
    double gradcheck_tolerance = 1e-4;

    /// Keys assigned by the file or an override.
    std::set<std::string> explicit_keys;

    bool is_set(const std::string& key) const { return explicit_keys.count(key) != 0; }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
bool parse_number(const std::string& s, T& out) {
    if (s.empty()) return false;
    const char* first = s.data();
    if (*first == '+') ++first;
    const auto [p, ec] = std::from_chars(first, s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    double back = 0.0;
    for (int prec = 1; prec <= 17; ++prec) {
        std::ostringstream t;
        t << std::setprecision(prec) << v;
        if (parse_number(t.str(), back) && back == v) return t.str();
    }
    return os.str();
}

}  // namespace detail

struct ConfigKey {
    std::string name;
    std::string type;
    std::string doc;
    std::function<void(AppConfig&, const std::string&)> set;
    std::function<std::string(const AppConfig&)> get;
};

namespace detail {

inline ConfigError type_error(const std::string& key, const std::string& type, const std::string& value) {
    return ConfigError("config key '" + key + "': expected " + type + ", got '" + value + "'");
}

template <class M>
ConfigKey float_key(std::string name, std::string doc, M member) {
    ConfigKey k{name, "float", std::move(doc), {}, {}};
    k.set = [name, member](AppConfig& c, const std::string& v) {
        double d = 0.0;
        if (!parse_number(v, d)) throw type_error(name, "float", v);
        member(c) = d;
    };
    k.get = [member](const AppConfig& c) { return format_double(member(c)); };
    return k;
}

template <class Int, class M>
ConfigKey int_key(std::string name, std::string doc, M member, const char* type = "integer") {
    ConfigKey k{name, type, std::move(doc), {}, {}};
    k.set = [name, member, type](AppConfig& c, const std::string& v) {
        Int i{};
        if (!parse_number(v, i)) throw type_error(name, type, v);
        member(c) = i;
    };
    k.get = [member](const AppConfig& c) { return std::to_string(member(c)); };
    return k;
}

template <class M>
ConfigKey bool_key(std::string name, std::string doc, M member) {
    ConfigKey k{name, "bool", std::move(doc), {}, {}};
    k.set = [name, member](AppConfig& c, const std::string& v) {
        if (v == "true" || v == "1") member(c) = true;
        else if (v == "false" || v == "0") member(c) = false;
        else throw type_error(name, "bool", v);
    };
    k.get = [member](const AppConfig& c) { return std::string(member(c) ? "true" : "false"); };
    return k;
}

template <class M>
ConfigKey string_key(std::string name, std::string doc, M member) {
    ConfigKey k{name, "string", std::move(doc), {}, {}};
    k.set = [member](AppConfig& c, const std::string& v) { member(c) = v; };
    k.get = [member](const AppConfig& c) { return member(c); };
    return k;
}

/// `type` lists the accepted words.
template <class Parse, class Print>
ConfigKey enum_key(std::string name, std::string type, std::string doc, Parse parse, Print print) {
    ConfigKey k{name, type, std::move(doc), {}, {}};
    k.set = [name, type, parse](AppConfig& c, const std::string& v) {
        if (!parse(c, v)) throw type_error(name, type, v);
    };
    k.get = print;
    return k;
}

}  // namespace detail

#define NLS_FIELD(expr) [](auto& c) -> auto& { return c.expr; }

inline const std::vector<ConfigKey>& config_keys() {
    using namespace detail;
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        k.push_back(int_key<std::uint64_t>("seed", "seed for data generation, model init and training",
                                           NLS_FIELD(seed), "unsigned integer"));

        k.push_back(float_key("ode.a_tol", "absolute error tolerance", NLS_FIELD(ode.a_tol)));
        k.push_back(float_key("ode.r_tol", "relative error tolerance", NLS_FIELD(ode.r_tol)));
        k.push_back(float_key("ode.t1", "integration end time (start is 0)", NLS_FIELD(ode.t1)));
        k.push_back(int_key<int>("ode.max_steps", "step budget per solve", NLS_FIELD(ode.max_steps)));
        k.push_back(float_key("ode.initial_dt", "first trial step; <= 0 picks t1/10", NLS_FIELD(ode.initial_dt)));
        k.push_back(enum_key(
            "ode.method", "one of rk45, rk4", "adaptive Dormand-Prince or fixed-step RK4",
            [](AppConfig& c, const std::string& v) {
                if (v == "rk45") c.ode.method = ode::Method::rk45_adaptive;
                else if (v == "rk4") c.ode.method = ode::Method::rk4_fixed;
                else return false;
                return true;
            },
            [](const AppConfig& c) { return std::string(c.ode.method == ode::Method::rk4_fixed ? "rk4" : "rk45"); }));
        k.push_back(int_key<int>("ode.fixed_steps", "steps of the fixed RK4 method", NLS_FIELD(ode.fixed_steps)));

        k.push_back(float_key("train.base_lr", "peak learning rate", NLS_FIELD(train.base_lr)));
        k.push_back(int_key<int>("train.rampup_steps", "linear warm-up length", NLS_FIELD(train.rampup_steps)));
        k.push_back(float_key("train.anneal_factor", "learning-rate multiplier per plateau",
                              NLS_FIELD(train.anneal_factor)));
        k.push_back(int_key<int>("train.plateau_patience", "evaluations without improvement per plateau",
                                 NLS_FIELD(train.plateau_patience)));
        k.push_back(float_key("train.plateau_threshold", "relative improvement that resets the plateau count",
                              NLS_FIELD(train.plateau_threshold)));
        k.push_back(int_key<int>("train.batch_size", "samples per step", NLS_FIELD(train.batch_size)));
        k.push_back(int_key<int>("train.max_steps", "optimizer steps", NLS_FIELD(train.max_steps)));
        k.push_back(int_key<int>("train.eval_every", "steps between validation passes", NLS_FIELD(train.eval_every)));
        k.push_back(int_key<int>("train.val_limit", "validation samples per pass; 0 = all", NLS_FIELD(train.val_limit)));
        k.push_back(float_key("train.loss_band_width", "narrow-band width of the loss in pixels",
                              NLS_FIELD(train.loss_band_width)));
        k.push_back(bool_key("train.use_narrow_band", "tanh narrow band on prediction and target",
                             NLS_FIELD(train.use_narrow_band)));
        k.push_back(bool_key("train.augment", "flip / scale / brightness augmentation", NLS_FIELD(train.augment)));

        k.push_back(string_key("data.dir", "dataset directory; empty generates in memory", NLS_FIELD(data_dir)));
        k.push_back(int_key<int>("data.train_count", "generated training samples", NLS_FIELD(data.train_count)));
        k.push_back(int_key<int>("data.val_count", "generated validation samples", NLS_FIELD(data.val_count)));
        k.push_back(int_key<int>("data.size", "generated image side in pixels", NLS_FIELD(data.size)));
        k.push_back(enum_key(
            "data.family", "one of disk, ellipse, blob, multi, mixed", "shape family",
            [](AppConfig& c, const std::string& v) {
                try {
                    c.data.family = parse_shape_family(v);
                } catch (const InvalidInput&) {
                    return false;
                }
                return true;
            },
            [](const AppConfig& c) { return to_string(c.data.family); }));
        k.push_back(float_key("data.contrast", "foreground minus background intensity", NLS_FIELD(data.contrast)));
        k.push_back(float_key("data.noise_sigma", "Gaussian noise standard deviation", NLS_FIELD(data.noise_sigma)));
        k.push_back(float_key("data.weak_edge_fraction", "share of samples with a blurred boundary arc",
                              NLS_FIELD(data.weak_edge_fraction)));
        k.push_back(float_key("data.severity", "initial-contour perturbation severity", NLS_FIELD(data.severity)));

        k.push_back(enum_key(
            "model.kind", "one of regression, contour-evolution, image-evolution", "method trained from scratch",
            [](AppConfig& c, const std::string& v) {
                try {
                    c.model_kind = parse_model_kind(v);
                } catch (const InvalidInput&) {
                    return false;
                }
                return true;
            },
            [](const AppConfig& c) { return to_string(c.model_kind); }));
        k.push_back(int_key<int>("model.embed_channels", "image-embedding channels of the NODE models",
                                 NLS_FIELD(embed_channels)));

        k.push_back(float_key("classical.alpha", "balloon weight", NLS_FIELD(classical.alpha)));
        k.push_back(float_key("classical.beta", "curvature weight", NLS_FIELD(classical.beta)));
        k.push_back(float_key("classical.gamma_edge", "edge-stopping gain", NLS_FIELD(classical.gamma_edge)));
        k.push_back(float_key("classical.smoothing_sigma", "pre-smoothing of the image",
                              NLS_FIELD(classical.smoothing_sigma)));
        k.push_back(float_key("classical.edge_scale", "gradient scale inside the edge-stopping term",
                              NLS_FIELD(classical.edge_scale)));
        k.push_back(float_key("classical.dt", "explicit Euler step", NLS_FIELD(classical.dt)));
        k.push_back(int_key<int>("classical.steps", "Euler steps", NLS_FIELD(classical.steps)));
        k.push_back(int_key<int>("classical.reinit_every", "steps between reinitializations; 0 = never",
                                 NLS_FIELD(classical.reinit_every)));

        k.push_back(float_key("metrics.beta_squared", "beta^2 of both F-beta scores", NLS_FIELD(metrics.beta_squared)));
        k.push_back(bool_key("metrics.per_image", "average alpha-F-beta per image instead of pooling",
                             NLS_FIELD(metrics.per_image)));

        k.push_back(enum_key(
            "eval.source", "one of model, initial, classical, masks", "where eval takes its predictions",
            [](AppConfig& c, const std::string& v) {
                for (auto s : {EvalSource::model, EvalSource::initial, EvalSource::classical, EvalSource::masks})
                    if (v == to_string(s)) {
                        c.eval_source = s;
                        return true;
                    }
                return false;
            },
            [](const AppConfig& c) { return to_string(c.eval_source); }));
        k.push_back(enum_key(
            "eval.split", "one of train, val", "dataset split scored by eval",
            [](AppConfig& c, const std::string& v) {
                if (v != "train" && v != "val") return false;
                c.eval_split = v;
                return true;
            },
            [](const AppConfig& c) { return c.eval_split; }));
        k.push_back(string_key("eval.masks_dir", "directory of <id>.pgm predictions for eval.source = masks",
                               NLS_FIELD(eval_masks_dir)));
        k.push_back(int_key<int>("eval.limit", "samples scored; 0 = all", NLS_FIELD(eval_limit)));

        k.push_back(string_key("evolve.init", "initial contour file (LSTF or mask image)", NLS_FIELD(evolve_init)));
        k.push_back(float_key("gradcheck.tolerance", "largest accepted relative gradient error",
                              NLS_FIELD(gradcheck_tolerance)));
        return k;
    }();
    return keys;
}

#undef NLS_FIELD

inline const ConfigKey& find_config_key(const std::string& name) {
    for (const auto& k : config_keys())
        if (k.name == name) return k;
    throw ConfigError("unknown config key '" + name + "'");
}

inline void set_config_value(AppConfig& cfg, const std::string& key, const std::string& value) {
    find_config_key(key).set(cfg, value);
    cfg.explicit_keys.insert(key);
}

/// Every key with its default (or current) value and description.
inline void write_config(std::ostream& os, const AppConfig& cfg = {}) {
    for (const auto& k : config_keys()) os << "# " << k.doc << " (" << k.type << ")\n" << k.name << " = " << k.get(cfg) << "\n";
}

inline void validate_config(const AppConfig& c) {
    try {
        c.ode.validate();
        c.train.validate();
        c.data.validate();
        c.classical.validate();
        c.metrics.validate();
        if (c.embed_channels < 1) throw InvalidInput("model.embed_channels must be >= 1");
        if (c.eval_limit < 0) throw InvalidInput("eval.limit must be >= 0");
        if (!(c.gradcheck_tolerance > 0.0)) throw InvalidInput("gradcheck.tolerance must be positive");
    } catch (const InvalidInput& e) {
        throw ConfigError(std::string("invalid configuration: ") + e.what());
    }
}

/// Applies `text` (file syntax) to `cfg`; `origin` names the source in errors.
inline void apply_config_text(AppConfig& cfg, const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

/// `path` may be empty (defaults only). Overrides are `key=value` and win
/// over the file.
inline AppConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    AppConfig cfg;
    if (!path.empty()) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw ConfigError("cannot read config file " + path.string());
        std::ostringstream ss;
        ss << f.rdbuf();
        apply_config_text(cfg, ss.str(), path.string());
    }
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + o + "': expected key=value");
        set_config_value(cfg, detail::trim(o.substr(0, eq)), detail::trim(o.substr(eq + 1)));
    }
    validate_config(cfg);
    return cfg;
}

}  // namespace nls
