#pragma once

// Command-line front end: gen-data, train, evolve, eval, grad-check and
// solver-bench. run() returns 0 on success, 2 on usage or configuration
// errors and 3 on runtime failures.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nls/config.hpp"
#include "nls/data.hpp"
#include "nls/field.hpp"
#include "nls/metrics.hpp"
#include "nls/models.hpp"
#include "nls/odesolve.hpp"
#include "nls/train.hpp"

namespace nls::cli {

namespace fs = std::filesystem;

struct CliConfig {
    std::string command;
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::string method;
    std::string checkpoint;
    std::string image;
    std::optional<double> a_tol, r_tol;
    int frames = 0;
    bool verbose = false;
};

// ------------------------------------------------------------------ frames

inline std::uint8_t band_value(double phi) {
    return static_cast<std::uint8_t>(std::lround(127.5 * (1.0 + std::tanh(phi / kDefaultBandWidth))));
}

/// Narrow-band rendering: round(127.5 (1 + tanh(phi / 5))); phi = 0 maps to 128.
inline std::vector<std::uint8_t> render_band(const DistanceMap& phi) {
    std::vector<std::uint8_t> px(phi.size());
    for (std::size_t i = 0; i < phi.size(); ++i) px[i] = band_value(phi[i]);
    return px;
}

/// Foreground pixels with a 4-neighbour outside the contour.
inline BinaryMask contour_pixels(const DistanceMap& phi) {
    BinaryMask m(phi.height(), phi.width());
    for (int r = 0; r < phi.height(); ++r)
        for (int c = 0; c < phi.width(); ++c) {
            if (phi(r, c) > 0.0) continue;
            const int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
            for (int k = 0; k < 4; ++k) {
                const int rr = r + dr[k], cc = c + dc[k];
                if (rr >= 0 && rr < phi.height() && cc >= 0 && cc < phi.width() && phi(rr, cc) > 0.0) {
                    m(r, c) = 1;
                    break;
                }
            }
        }
    return m;
}

/// Contour drawn white over the image (or over the band rendering).
inline std::vector<std::uint8_t> render_overlay(const DistanceMap& phi, const ImageGrid* background) {
    std::vector<std::uint8_t> px;
    if (background) {
        require_same_shape(*background, phi, "render_overlay");
        px.resize(phi.size());
        for (std::size_t i = 0; i < phi.size(); ++i)
            px[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp((*background)[i], 0.0, 1.0)));
    } else {
        px = render_band(phi);
    }
    const BinaryMask edge = contour_pixels(phi);
    for (std::size_t i = 0; i < px.size(); ++i)
        if (edge[i]) px[i] = 255;
    return px;
}

/// Writes frame_<k>.pgm, overlay_<k>.pgm per frame and times.txt; returns
/// the paths in that order.
inline std::vector<fs::path> export_frames(const std::vector<Frame>& frames, const fs::path& dir,
                                           const ImageGrid* background = nullptr) {
    if (frames.empty()) throw InvalidInput("export_frames: no frames");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
    const int digits = std::max<int>(4, static_cast<int>(std::to_string(frames.size() - 1).size()));
    std::vector<fs::path> files;
    std::ostringstream times;
    times << std::setprecision(17);
    for (std::size_t k = 0; k < frames.size(); ++k) {
        std::ostringstream idx;
        idx << std::setw(digits) << std::setfill('0') << k;
        const DistanceMap& phi = frames[k].phi;
        const fs::path f = dir / ("frame_" + idx.str() + ".pgm"), o = dir / ("overlay_" + idx.str() + ".pgm");
        detail::write_file(f, encode_pgm_bytes(phi.height(), phi.width(), render_band(phi)));
        detail::write_file(o, encode_pgm_bytes(phi.height(), phi.width(), render_overlay(phi, background)));
        files.push_back(f);
        files.push_back(o);
        times << idx.str() << '\t' << frames[k].t << '\n';
    }
    const fs::path t = dir / "times.txt";
    detail::write_file(t, times.str());
    files.push_back(t);
    return files;
}

/// `n` evenly spaced frames including the first and last; n <= 0 keeps all.
inline std::vector<Frame> select_frames(const std::vector<Frame>& frames, int n) {
    if (n <= 0 || static_cast<std::size_t>(n) >= frames.size()) return frames;
    if (n == 1) return {frames.back()};
    std::vector<Frame> out;
    const double span = static_cast<double>(frames.size() - 1);
    for (int i = 0; i < n; ++i)
        out.push_back(frames[static_cast<std::size_t>(std::lround(i * span / (n - 1)))]);
    return out;
}

// ----------------------------------------------------------------- helpers

namespace detail {

struct Context {
    CliConfig cli;
    AppConfig cfg;
    std::ostream& out;
    std::ostream& err;

    fs::path out_path(const std::string& name) const { return fs::path(cli.out_dir) / name; }

    void need_out() const {
        if (cli.out_dir.empty()) throw ConfigError(cli.command + " needs --out");
    }
};

inline Dataset dataset_of(const AppConfig& cfg) {
    if (cfg.data_dir.empty()) return generate_synthetic(cfg.data, cfg.seed);
    return load_dataset(cfg.data_dir);
}

inline std::string dataset_name(const AppConfig& cfg) {
    if (cfg.data_dir.empty()) return "synthetic";
    fs::path p = fs::path(cfg.data_dir);
    if (!fs::is_directory(p)) p = p.parent_path();
    const std::string n = p.lexically_normal().filename().string();
    return n.empty() || n == "." ? p.lexically_normal().parent_path().filename().string() : n;
}

/// Explicitly configured solver keys replace the model's own values.
inline void apply_solver_overrides(ode::SolverConfig& s, const AppConfig& cfg) {
    if (cfg.is_set("ode.a_tol")) s.a_tol = cfg.ode.a_tol;
    if (cfg.is_set("ode.r_tol")) s.r_tol = cfg.ode.r_tol;
    if (cfg.is_set("ode.t1")) s.t1 = cfg.ode.t1;
    if (cfg.is_set("ode.max_steps")) s.max_steps = cfg.ode.max_steps;
    if (cfg.is_set("ode.initial_dt")) s.initial_dt = cfg.ode.initial_dt;
    if (cfg.is_set("ode.method")) s.method = cfg.ode.method;
    if (cfg.is_set("ode.fixed_steps")) s.fixed_steps = cfg.ode.fixed_steps;
    s.validate();
}

inline ModelKind method_kind(const Context& ctx) {
    if (ctx.cli.method.empty()) return ctx.cfg.model_kind;
    try {
        return parse_model_kind(ctx.cli.method);
    } catch (const InvalidInput& e) {
        throw ConfigError(e.what());
    }
}

inline AnyModel fresh_model(const Context& ctx, ModelKind kind) {
    AnyModel m = make_model(kind, ctx.cfg.seed, ctx.cfg.embed_channels);
    if (auto* s = solver_of(m)) *s = ctx.cfg.ode;
    return m;
}

inline AnyModel model_of(const Context& ctx) {
    if (ctx.cli.checkpoint.empty()) return fresh_model(ctx, method_kind(ctx));
    AnyModel m = load_checkpoint(ctx.cli.checkpoint);
    if (auto* s = solver_of(m)) apply_solver_overrides(*s, ctx.cfg);
    return m;
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw Error("cannot create " + path.parent_path().string() + ": " + ec.message());
    nls::detail::write_file(path, text);
}

inline DistanceMap default_disk(int h, int w) {
    BinaryMask m(h, w);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0, r = std::min(h, w) / 4.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m(y, x) = std::hypot(x - cx, y - cy) <= r ? 1 : 0;
    return signed_distance_transform(m);
}

inline DistanceMap initial_contour(const AppConfig& cfg, const ImageGrid& image) {
    if (cfg.evolve_init.empty()) return default_disk(image.height(), image.width());
    const fs::path p(cfg.evolve_init);
    DistanceMap phi = p.extension() == ".lstf" ? load_distance_map(p) : signed_distance_transform(load_mask(p));
    require_same_shape(image, phi, "evolve.init");
    return phi;
}

// ---------------------------------------------------------------- commands

inline int cmd_gen_data(Context& ctx) {
    ctx.need_out();
    const Dataset d = generate_synthetic(ctx.cfg.data, ctx.cfg.seed);
    write_dataset(ctx.cli.out_dir, d, ctx.cfg.seed, ctx.cfg.data.hash());
    ctx.out << "wrote " << d.train.size() << " train and " << d.val.size() << " val samples to " << ctx.cli.out_dir
            << "\n";
    return 0;
}

inline int cmd_train(Context& ctx) {
    ctx.need_out();
    const Dataset data = dataset_of(ctx.cfg);
    AnyModel m = fresh_model(ctx, method_kind(ctx));
    TrainConfig tc = ctx.cfg.train;
    tc.seed = ctx.cfg.seed;
    TrainObserver obs;
    if (ctx.cli.verbose)
        obs = [&](const EvalRecord& r) {
            ctx.err << "step " << r.step << " lr " << r.lr << " train " << r.train_loss << " val " << r.val_loss
                    << " iou " << r.val_iou << "\n";
        };
    const TrainResult res = train_loop(m, data, tc, obs);
    std::ostringstream hist;
    hist << "step\tlr\ttrain_loss\tval_loss\tval_iou\n";
    write_history(hist, res.history);
    write_text(ctx.out_path("history.tsv"), hist.str());
    save_checkpoint(ctx.out_path("checkpoint.lsck"), m);
    ctx.out << "method\t" << to_string(kind_of(m)) << "\nsteps\t" << tc.max_steps << "\nbest_step\t" << res.best_step
            << "\nbest_val_loss\t" << std::setprecision(10) << res.best_val_loss << "\n";
    return 0;
}

inline int cmd_evolve(Context& ctx) {
    ctx.need_out();
    if (ctx.cli.image.empty()) throw ConfigError("evolve needs --image");
    const ImageGrid image = load_grayscale_image(ctx.cli.image);
    std::vector<Frame> frames;
    std::ostringstream info;
    if (ctx.cli.checkpoint.empty() && ctx.cli.method == "classical") {
        const DistanceMap phi0 = initial_contour(ctx.cfg, image);
        frames = classical_evolve(image, phi0, ctx.cfg.classical, true).frames;
        info << "method\tclassical\nsteps\t" << ctx.cfg.classical.steps << "\n";
    } else {
        AnyModel m = model_of(ctx);
        std::optional<DistanceMap> phi0;
        if (kind_of(m) == ModelKind::contour_evolution) phi0 = initial_contour(ctx.cfg, image);
        const EvolveResult r = predict(m, image, phi0 ? &*phi0 : nullptr, true);
        frames = r.frames;
        // The evolution starts from the initial contour itself.
        if (phi0 && !frames.empty() && frames.front().t > 0.0) frames.insert(frames.begin(), Frame{0.0, *phi0});
        info << "method\t" << to_string(kind_of(m)) << "\nnfe\t" << r.stats.nfe << "\naccepted\t"
             << r.stats.accepted_steps << "\nrejected\t" << r.stats.rejected_steps << "\n";
    }
    frames = select_frames(frames, ctx.cli.frames);
    const auto files = export_frames(frames, ctx.cli.out_dir, &image);
    ctx.out << info.str() << "frames\t" << frames.size() << "\nfiles\t" << files.size() << "\n";
    return 0;
}

inline int cmd_eval(Context& ctx) {
    const Dataset data = dataset_of(ctx.cfg);
    const std::vector<Sample>& split = ctx.cfg.eval_split == "train" ? data.train : data.val;
    std::size_t n = split.size();
    if (ctx.cfg.eval_limit > 0) n = std::min(n, static_cast<std::size_t>(ctx.cfg.eval_limit));
    if (n == 0) throw InvalidInput("eval: split '" + ctx.cfg.eval_split + "' is empty");

    std::optional<AnyModel> model;
    if (ctx.cfg.eval_source == EvalSource::model) {
        if (ctx.cli.checkpoint.empty()) throw ConfigError("eval.source = model needs --checkpoint");
        model = model_of(ctx);
    }
    if (ctx.cfg.eval_source == EvalSource::masks && ctx.cfg.eval_masks_dir.empty())
        throw ConfigError("eval.source = masks needs eval.masks_dir");

    std::vector<BinaryMask> preds, gts;
    for (std::size_t i = 0; i < n; ++i) {
        const Sample& s = split[i];
        const DistanceMap* init = s.initial_phi ? &*s.initial_phi : nullptr;
        if ((ctx.cfg.eval_source == EvalSource::initial || ctx.cfg.eval_source == EvalSource::classical) && !init)
            throw InvalidInput("eval: sample " + s.id + " has no initial contour");
        switch (ctx.cfg.eval_source) {
            case EvalSource::model: preds.push_back(mask_from_phi(predict(*model, s.image, init).phi)); break;
            case EvalSource::initial: preds.push_back(mask_from_phi(*init)); break;
            case EvalSource::classical:
                preds.push_back(mask_from_phi(classical_evolve(s.image, *init, ctx.cfg.classical).phi));
                break;
            case EvalSource::masks: preds.push_back(load_mask(fs::path(ctx.cfg.eval_masks_dir) / (s.id + ".pgm"))); break;
        }
        require_same_shape(preds.back(), s.gt_mask, s.id.c_str());
        gts.push_back(s.gt_mask);
    }
    const MetricRow row = evaluate_masks(dataset_name(ctx.cfg) + "/" + ctx.cfg.eval_split, preds, gts, ctx.cfg.metrics);
    std::ostringstream table;
    write_metric_table(table, {row});
    if (!ctx.cli.out_dir.empty()) write_text(ctx.out_path("metrics.tsv"), table.str());
    ctx.out << table.str();
    return 0;
}

/// max |analytic - fd| / max |fd| over `idx`, with the reference taken from
/// fixed-step RK4 so that step-size changes do not enter the differences.
template <class Eval>
double end_to_end_discrepancy(AnyModel& m, const std::vector<double>& grad, const std::vector<std::size_t>& idx,
                              Eval eval) {
    ode::SolverConfig* s = solver_of(m);
    const ode::SolverConfig saved = *s;
    s->method = ode::Method::rk4_fixed;
    s->fixed_steps = 400;
    std::vector<double> theta = flat_values(m);
    const double eps = 1e-5;
    double diff = 0.0, scale = 0.0;
    for (std::size_t i : idx) {
        const double orig = theta[i];
        theta[i] = orig + eps;
        set_flat_values(m, theta);
        const double lp = eval();
        theta[i] = orig - eps;
        set_flat_values(m, theta);
        const double lm = eval();
        theta[i] = orig;
        const double fd = (lp - lm) / (2 * eps);
        diff = std::max(diff, std::abs(grad[i] - fd));
        scale = std::max(scale, std::abs(fd));
    }
    set_flat_values(m, theta);
    *s = saved;
    return scale > 0.0 ? diff / scale : diff;
}

inline int cmd_grad_check(Context& ctx) {
    AnyModel m = model_of(ctx);
    if (auto* s = solver_of(m); s && !ctx.cfg.is_set("ode.a_tol")) {
        s->a_tol = 1e-8;
        s->max_steps = std::max(s->max_steps, 100000);
    }
    std::mt19937_64 rng(ctx.cfg.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    constexpr int n = 16;
    const double tol = ctx.cfg.gradcheck_tolerance;
    bool ok = true;
    std::ostringstream table;
    table << "check\tparams\tmax_rel_error\tstatus\n" << std::setprecision(6) << std::scientific;
    auto report = [&](const std::string& name, std::size_t count, double err) {
        const bool pass = err <= tol;
        ok = ok && pass;
        table << name << '\t' << count << '\t' << err << '\t' << (pass ? "ok" : "FAIL") << '\n';
    };

    for (ad::Network* net : networks(m)) {
        ad::Tensor x(ad::Shape{net->in_channels(), n, n});
        for (auto& v : x.data) v = u(rng);
        const std::uint64_t wseed = rng();
        const ad::LossFn loss = [wseed](const ad::Tensor& o) {
            std::mt19937_64 r(wseed);
            std::normal_distribution<double> nd;
            ad::Tensor w(o.shape);
            double l = 0.0;
            for (std::size_t i = 0; i < o.size(); ++i) {
                w.data[i] = nd(r);
                l += w.data[i] * o.data[i];
            }
            return std::pair{l, w};
        };
        report(net->spec().name, std::min<std::size_t>(net->num_params(), 100), ad::grad_check(*net, x, loss, rng()));
    }

    if (kind_of(m) != ModelKind::regression) {
        ImageGrid image(n, n);
        for (auto& v : image.values()) v = u(rng);
        const DistanceMap phi0 = default_disk(n, n);
        DistanceMap target = phi0;
        for (auto& v : target.values()) v += 2.0 * u(rng) - 1.0;
        const PixelLoss loss = [&](const DistanceMap& p) {
            DistanceMap g(p.height(), p.width());
            double l = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                g[i] = p[i] - target[i];
                l += 0.5 * g[i] * g[i];
            }
            return std::pair{l, g};
        };
        const DistanceMap* init = kind_of(m) == ModelKind::contour_evolution ? &phi0 : nullptr;
        const GradientResult g = gradient(m, image, init, loss);
        // The largest components plus a random few.
        std::vector<std::size_t> order(g.grad.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::partial_sort(order.begin(), order.begin() + std::min<std::size_t>(6, order.size()), order.end(),
                          [&](std::size_t a, std::size_t b) { return std::abs(g.grad[a]) > std::abs(g.grad[b]); });
        std::vector<std::size_t> idx(order.begin(), order.begin() + std::min<std::size_t>(6, order.size()));
        for (int k = 0; k < 4; ++k) idx.push_back(rng() % g.grad.size());
        report("adjoint", idx.size(),
               end_to_end_discrepancy(m, g.grad, idx, [&] { return loss(predict(m, image, init).phi).first; }));
    }
    ctx.out << table.str();
    if (!ctx.cli.out_dir.empty()) write_text(ctx.out_path("grad_check.tsv"), table.str());
    if (!ok) {
        ctx.err << "gradient check above tolerance " << tol << "\n";
        return 3;
    }
    return 0;
}

inline int cmd_solver_bench(Context& ctx) {
    std::vector<double> tols{1e-3, 1e-4, 1e-5};
    if (ctx.cli.a_tol) tols = {*ctx.cli.a_tol};
    std::ostringstream table;
    table << "problem\ta_tol\tr_tol\tmax_error\tnfe\taccepted\trejected\n";
    struct Problem {
        std::string name;
        ode::OdeState h0;
        std::function<void(double, std::span<const double>, std::span<double>)> f;
        std::vector<double> exact;
    };
    const std::vector<Problem> problems{
        {"growth", ode::OdeState({1.0}), [](double, std::span<const double> y, std::span<double> dy) { dy[0] = y[0]; },
         {std::exp(1.0)}},
        {"oscillator", ode::OdeState({1.0, 0.0}),
         [](double, std::span<const double> y, std::span<double> dy) {
             dy[0] = y[1];
             dy[1] = -y[0];
         },
         {std::cos(1.0), -std::sin(1.0)}},
    };
    for (const auto& p : problems)
        for (double tol : tols) {
            ode::SolverConfig sc = ctx.cfg.ode;
            sc.method = ode::Method::rk45_adaptive;
            sc.t0 = 0.0;
            sc.t1 = 1.0;
            sc.a_tol = tol;
            auto f = p.f;
            const ode::SolveResult r = ode::solve(f, p.h0, sc);
            double err = 0.0;
            for (std::size_t i = 0; i < p.exact.size(); ++i)
                err = std::max(err, std::abs(r.state.values[i] - p.exact[i]));
            std::ostringstream line;
            line << std::setprecision(6) << std::scientific << p.name << '\t' << tol << '\t' << sc.r_tol << '\t'
                 << err << '\t' << r.stats.nfe << '\t' << r.stats.accepted_steps << '\t' << r.stats.rejected_steps
                 << '\n';
            table << line.str();
        }
    ctx.out << table.str();
    if (!ctx.cli.out_dir.empty()) write_text(ctx.out_path("solver_bench.tsv"), table.str());
    return 0;
}

}  // namespace detail

// --------------------------------------------------------------------- run

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CliConfig cli;
    CLI::App app{"Level-set segmentation with classical and neural ODE evolution", "nls"};
    app.require_subcommand(1, 1);
    const std::vector<std::pair<std::string, std::string>> commands{
        {"gen-data", "generate the synthetic benchmark into --out"},
        {"train", "train --method on data.dir (or the generated benchmark)"},
        {"evolve", "evolve a contour on --image and export the frames to --out"},
        {"eval", "print the metric table of eval.source on eval.split"},
        {"grad-check", "compare analytic and finite-difference gradients"},
        {"solver-bench", "ODE solver error against a_tol on analytic problems"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->fallthrough();
        sub->callback([&cli, name = name] { cli.command = name; });
    }
    app.add_option("--config", cli.config_path, "configuration file (key = value lines)")->check(CLI::ExistingFile);
    app.add_option("--out", cli.out_dir, "output directory");
    app.add_option("--seed", cli.seed, "seed (same as --set seed=N)");
    app.add_option("--set", cli.overrides, "configuration override key=value (repeatable)")->expected(1)->take_all();
    app.add_option("--method", cli.method, "regression, contour-evolution, image-evolution (evolve also: classical)");
    app.add_option("--checkpoint", cli.checkpoint, "model checkpoint (.lsck)")->check(CLI::ExistingFile);
    app.add_option("--image", cli.image, "input image (PGM or grayscale PNG)")->check(CLI::ExistingFile);
    app.add_option("--atol", cli.a_tol, "absolute ODE tolerance (same as --set ode.a_tol=X)");
    app.add_option("--rtol", cli.r_tol, "relative ODE tolerance (same as --set ode.r_tol=X)");
    app.add_option("--frames", cli.frames, "number of evenly spaced frames evolve exports; 0 = all")
        ->check(CLI::NonNegativeNumber);
    app.add_flag("-v,--verbose", cli.verbose, "progress on stderr");

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    AppConfig cfg;
    try {
        std::vector<std::string> overrides = cli.overrides;
        if (cli.seed) overrides.push_back("seed=" + std::to_string(*cli.seed));
        auto fmt = [](double v) {
            std::ostringstream os;
            os << std::setprecision(17) << v;
            return os.str();
        };
        if (cli.a_tol) overrides.push_back("ode.a_tol=" + fmt(*cli.a_tol));
        if (cli.r_tol) overrides.push_back("ode.r_tol=" + fmt(*cli.r_tol));
        cfg = parse_config(cli.config_path, overrides);
        if (!cli.method.empty() && cli.method != "classical") parse_model_kind(cli.method);
        if (cli.method == "classical" && cli.command != "evolve")
            throw ConfigError("--method classical applies to evolve only");
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    detail::Context ctx{cli, cfg, out, err};
    try {
        if (cli.command == "gen-data") return detail::cmd_gen_data(ctx);
        if (cli.command == "train") return detail::cmd_train(ctx);
        if (cli.command == "evolve") return detail::cmd_evolve(ctx);
        if (cli.command == "eval") return detail::cmd_eval(ctx);
        if (cli.command == "grad-check") return detail::cmd_grad_check(ctx);
        if (cli.command == "solver-bench") return detail::cmd_solver_bench(ctx);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    }
    err << app.help();
    return 2;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, out, err);
}

}  // namespace nls::cli
