#pragma once

// Segmentation models built on the solver and the networks: contour
// evolution over an augmented state, image evolution of an embedding, a
// direct regression baseline, and a classical speed-function flow.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "nls/errors.hpp"
#include "nls/field.hpp"
#include "nls/grid.hpp"
#include "nls/network.hpp"
#include "nls/odesolve.hpp"

namespace nls {

inline constexpr int kDefaultEmbedChannels = 8;

struct Frame {
    double t = 0.0;
    DistanceMap phi;
};

struct EvolveResult {
    DistanceMap phi;
    ode::SolveStats stats;
    std::vector<Frame> frames;
};

inline ad::Tensor image_tensor(const ImageGrid& image) {
    return ad::Tensor(ad::Shape{1, image.height(), image.width()},
                      std::vector<double>(image.values().begin(), image.values().end()));
}

inline DistanceMap tensor_channel(const ad::Tensor& t, int ch) {
    const double* p = t.channel(ch);
    return DistanceMap(t.shape.h, t.shape.w, std::vector<double>(p, p + t.shape.plane()));
}

/// gamma = (phi, h) packed channel-first; channel 0 is phi.
inline ode::OdeState augment(const DistanceMap& phi, const ad::Tensor& h) {
    if (h.shape.h != phi.height() || h.shape.w != phi.width())
        throw InvalidInput("augment: embedding " + h.shape.str() + " does not match distance map");
    std::vector<double> v;
    v.reserve(phi.size() + h.size());
    v.insert(v.end(), phi.values().begin(), phi.values().end());
    v.insert(v.end(), h.data.begin(), h.data.end());
    return ode::OdeState(std::move(v), ode::StateShape{1 + h.shape.c, h.shape.h, h.shape.w});
}

inline ad::Tensor state_tensor(const ode::OdeState& s) {
    return ad::Tensor(ad::Shape{s.shape.channels, s.shape.height, s.shape.width}, s.values);
}

inline ode::OdeState tensor_state(const ad::Tensor& t) {
    return ode::OdeState(t.data, ode::StateShape{t.shape.c, t.shape.h, t.shape.w});
}

inline DistanceMap state_phi(std::span<const double> values, int height, int width) {
    const std::size_t n = static_cast<std::size_t>(height) * width;
    return DistanceMap(height, width, std::vector<double>(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(n)));
}

/// f_theta(y, t) over a C x H x W state; t enters the network as one extra
/// constant input channel.
class DynamicsAdapter {
public:
    DynamicsAdapter(ad::Network& net, ode::StateShape shape) : net_(&net), shape_(shape) {
        if (net.in_channels() != shape.channels + 1 || net.out_channels() != shape.channels)
            throw InvalidSpec(net.spec().name + ": dynamics must map " + std::to_string(shape.channels + 1) +
                              " channels to " + std::to_string(shape.channels));
    }

    void operator()(double t, std::span<const double> y, std::span<double> dy) const {
        const ad::Tensor out = net_->apply(input(t, y));
        std::copy(out.data.begin(), out.data.end(), dy.begin());
    }

    std::size_t num_params() const { return net_->num_params(); }

    void vjp(double t, std::span<const double> y, std::span<const double> a, std::span<double> fy,
             std::span<double> a_dfdy, std::span<double> a_dfdtheta) const {
        ad::Tape tape;
        const ad::Var in = tape.input(input(t, y));
        const ad::Var out = net_->forward(tape, in);
        const ad::Tensor& v = tape.value(out);
        std::copy(v.data.begin(), v.data.end(), fy.begin());
        net_->zero_grad();
        tape.backward(out, ad::Tensor(v.shape, std::vector<double>(a.begin(), a.end())));
        const ad::Tensor g = tape.grad(in);
        std::copy_n(g.data.begin(), shape_.size(), a_dfdy.begin());
        net_->copy_grads_to(a_dfdtheta);
    }

private:
    ad::Tensor input(double t, std::span<const double> y) const {
        ad::Tensor x(ad::Shape{shape_.channels + 1, shape_.height, shape_.width});
        std::copy(y.begin(), y.end(), x.data.begin());
        std::fill(x.data.begin() + static_cast<std::ptrdiff_t>(y.size()), x.data.end(), t);
        return x;
    }

    ad::Network* net_;
    ode::StateShape shape_;
};

struct ContourEvolutionModel {
    ad::Network prenet;
    ad::Network dynamics;
    ad::Network postnet;
    ode::SolverConfig solver;

    int embed_channels() const { return prenet.out_channels(); }
};

struct ImageEvolutionModel {
    ad::Network prenet;
    ad::Network dynamics;
    ad::Network postnet;
    ode::SolverConfig solver;

    int embed_channels() const { return prenet.out_channels(); }
};

/// Image -> distance map in one encoder-decoder pass.
struct RegressionModel {
    ad::Network net;
};

/// Prenet lambda, dynamics f and postnet psi with seeds seed, seed+1,
/// seed+2. identity_init zeroes the last layers of f and psi.
inline ContourEvolutionModel make_contour_model(std::uint64_t seed, int embed = kDefaultEmbedChannels,
                                                bool identity_init = true) {
    ContourEvolutionModel m;
    m.prenet = ad::build_network(ad::prenet_spec(1, embed), seed);
    m.dynamics = ad::build_network(ad::encoder_decoder_spec("dynamics", embed + 2, embed + 1), seed + 1);
    m.postnet = ad::build_network(ad::postnet_spec(embed + 1), seed + 2);
    if (identity_init) {
        ad::zero_init_last_layer(m.dynamics);
        ad::zero_init_last_layer(m.postnet);
    }
    return m;
}

inline ImageEvolutionModel make_image_model(std::uint64_t seed, int embed = kDefaultEmbedChannels,
                                            bool identity_init = true) {
    ImageEvolutionModel m;
    m.prenet = ad::build_network(ad::prenet_spec(1, embed), seed);
    m.dynamics = ad::build_network(ad::encoder_decoder_spec("dynamics", embed + 1, embed), seed + 1);
    m.postnet = ad::build_network(ad::postnet_spec(embed), seed + 2);
    if (identity_init) {
        ad::zero_init_last_layer(m.dynamics);
        ad::zero_init_last_layer(m.postnet);
    }
    return m;
}

inline RegressionModel make_regression_model(std::uint64_t seed) {
    return RegressionModel{ad::build_network(ad::encoder_decoder_spec("regression", 1, 1), seed)};
}

// ---------------------------------------------------------------- forward

inline EvolveResult contour_evolve_forward(ContourEvolutionModel& model, const ImageGrid& image,
                                           const DistanceMap& phi0, bool capture_frames = false) {
    require_same_shape(image, phi0, "contour_evolve_forward");
    const int h = image.height(), w = image.width();
    const ode::OdeState g0 = augment(phi0, model.prenet.apply(image_tensor(image)));
    DynamicsAdapter f(model.dynamics, g0.shape);
    EvolveResult res;
    ode::Observer obs;
    if (capture_frames) {
        res.frames.push_back({model.solver.t0, phi0});
        obs = [&](double t, std::span<const double> s) { res.frames.push_back({t, state_phi(s, h, w)}); };
    }
    const auto r = ode::solve(f, g0, model.solver, obs);
    res.stats = r.stats;
    const ad::Tensor psi = model.postnet.apply(state_tensor(r.state));
    res.phi = DistanceMap(h, w);
    for (std::size_t i = 0; i < res.phi.size(); ++i) res.phi[i] = r.state.values[i] + psi.data[i];
    return res;
}

/// With capture_frames, frames hold psi(h(t)) at each accepted step.
inline EvolveResult image_evolve_forward(ImageEvolutionModel& model, const ImageGrid& image,
                                         bool capture_frames = false) {
    const ode::OdeState h0 = tensor_state(model.prenet.apply(image_tensor(image)));
    DynamicsAdapter f(model.dynamics, h0.shape);
    EvolveResult res;
    ode::Observer obs;
    auto project = [&](std::span<const double> s) {
        return tensor_channel(
            model.postnet.apply(ad::Tensor(ad::Shape{h0.shape.channels, h0.shape.height, h0.shape.width},
                                           std::vector<double>(s.begin(), s.end()))),
            0);
    };
    if (capture_frames) {
        res.frames.push_back({model.solver.t0, project(h0.values)});
        obs = [&](double t, std::span<const double> s) { res.frames.push_back({t, project(s)}); };
    }
    const auto r = ode::solve(f, h0, model.solver, obs);
    res.stats = r.stats;
    res.phi = tensor_channel(model.postnet.apply(state_tensor(r.state)), 0);
    return res;
}

inline DistanceMap regression_forward(RegressionModel& model, const ImageGrid& image) {
    return tensor_channel(model.net.apply(image_tensor(image)), 0);
}

// --------------------------------------------------------------- gradients

/// (loss, dloss/dprediction) for one predicted distance map.
using PixelLoss = std::function<std::pair<double, DistanceMap>(const DistanceMap&)>;

struct GradientResult {
    double loss = 0.0;
    DistanceMap prediction;
    /// Flattened over the model's networks in declaration order.
    std::vector<double> grad;
    ode::SolveStats forward;
    ode::SolveStats backward;
};

namespace detail {

inline ad::Tensor as_tensor(const DistanceMap& m) {
    return ad::Tensor(ad::Shape{1, m.height(), m.width()}, std::vector<double>(m.values().begin(), m.values().end()));
}

inline void append_grads(std::vector<double>& out, const ad::Network& net) {
    const auto g = net.flat_grads();
    out.insert(out.end(), g.begin(), g.end());
}

}  // namespace detail

/// Forward solve, postnet backprop, adjoint solve, prenet backprop.
inline GradientResult contour_evolve_gradient(ContourEvolutionModel& model, const ImageGrid& image,
                                              const DistanceMap& phi0, const PixelLoss& loss) {
    require_same_shape(image, phi0, "contour_evolve_gradient");
    const int h = image.height(), w = image.width();
    const std::size_t plane = image.size();
    model.prenet.zero_grad();
    model.postnet.zero_grad();

    ad::Tape pre;
    const ad::Var hv = model.prenet.forward(pre, pre.constant(image_tensor(image)));
    const ode::OdeState g0 = augment(phi0, pre.value(hv));
    DynamicsAdapter f(model.dynamics, g0.shape);
    GradientResult res;
    const auto fwd = ode::solve(f, g0, model.solver);
    res.forward = fwd.stats;

    ad::Tape post;
    const ad::Var gv = post.input(state_tensor(fwd.state));
    const ad::Var pv = model.postnet.forward(post, gv);
    res.prediction = DistanceMap(h, w);
    for (std::size_t i = 0; i < plane; ++i) res.prediction[i] = fwd.state.values[i] + post.value(pv).data[i];
    auto [l, dphi] = loss(res.prediction);
    res.loss = l;
    post.backward(pv, detail::as_tensor(dphi));
    ad::Tensor dg1 = post.grad(gv);
    for (std::size_t i = 0; i < plane; ++i) dg1.data[i] += dphi[i];

    const auto adj = ode::adjoint_solve(f, fwd.state, tensor_state(dg1), model.solver);
    res.backward = adj.stats;
    const ad::Tensor& hval = pre.value(hv);
    pre.backward(hv, ad::Tensor(hval.shape, std::vector<double>(adj.grad_h0.values.begin() + static_cast<std::ptrdiff_t>(plane),
                                                                adj.grad_h0.values.end())));

    res.grad.reserve(model.prenet.num_params() + adj.grad_theta.size() + model.postnet.num_params());
    detail::append_grads(res.grad, model.prenet);
    res.grad.insert(res.grad.end(), adj.grad_theta.begin(), adj.grad_theta.end());
    detail::append_grads(res.grad, model.postnet);
    model.dynamics.zero_grad();
    return res;
}

inline GradientResult image_evolve_gradient(ImageEvolutionModel& model, const ImageGrid& image,
                                            const PixelLoss& loss) {
    model.prenet.zero_grad();
    model.postnet.zero_grad();
    ad::Tape pre;
    const ad::Var hv = model.prenet.forward(pre, pre.constant(image_tensor(image)));
    const ode::OdeState h0 = tensor_state(pre.value(hv));
    DynamicsAdapter f(model.dynamics, h0.shape);
    GradientResult res;
    const auto fwd = ode::solve(f, h0, model.solver);
    res.forward = fwd.stats;

    ad::Tape post;
    const ad::Var gv = post.input(state_tensor(fwd.state));
    const ad::Var pv = model.postnet.forward(post, gv);
    res.prediction = tensor_channel(post.value(pv), 0);
    auto [l, dphi] = loss(res.prediction);
    res.loss = l;
    post.backward(pv, detail::as_tensor(dphi));

    const auto adj = ode::adjoint_solve(f, fwd.state, tensor_state(post.grad(gv)), model.solver);
    res.backward = adj.stats;
    pre.backward(hv, state_tensor(adj.grad_h0));

    res.grad.reserve(model.prenet.num_params() + adj.grad_theta.size() + model.postnet.num_params());
    detail::append_grads(res.grad, model.prenet);
    res.grad.insert(res.grad.end(), adj.grad_theta.begin(), adj.grad_theta.end());
    detail::append_grads(res.grad, model.postnet);
    model.dynamics.zero_grad();
    return res;
}

inline GradientResult regression_gradient(RegressionModel& model, const ImageGrid& image, const PixelLoss& loss) {
    model.net.zero_grad();
    ad::Tape tape;
    const ad::Var out = model.net.forward(tape, tape.constant(image_tensor(image)));
    GradientResult res;
    res.prediction = tensor_channel(tape.value(out), 0);
    auto [l, d] = loss(res.prediction);
    res.loss = l;
    tape.backward(out, detail::as_tensor(d));
    res.grad = model.net.flat_grads();
    return res;
}

// ------------------------------------------------------- uniform handling

enum class ModelKind { regression, contour_evolution, image_evolution };

inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::regression: return "regression";
        case ModelKind::contour_evolution: return "contour-evolution";
        case ModelKind::image_evolution: return "image-evolution";
    }
    return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "regression") return ModelKind::regression;
    if (s == "contour-evolution") return ModelKind::contour_evolution;
    if (s == "image-evolution") return ModelKind::image_evolution;
    throw InvalidInput("unknown method '" + s + "' (expected regression, contour-evolution or image-evolution)");
}

using AnyModel = std::variant<RegressionModel, ContourEvolutionModel, ImageEvolutionModel>;

inline ModelKind kind_of(const AnyModel& m) { return static_cast<ModelKind>(m.index()); }

inline AnyModel make_model(ModelKind kind, std::uint64_t seed, int embed = kDefaultEmbedChannels) {
    switch (kind) {
        case ModelKind::regression: return make_regression_model(seed);
        case ModelKind::contour_evolution: return make_contour_model(seed, embed);
        case ModelKind::image_evolution: return make_image_model(seed, embed);
    }
    throw InvalidInput("make_model: bad kind");
}

inline std::vector<ad::Network*> networks(AnyModel& m) {
    return std::visit(
        [](auto& x) -> std::vector<ad::Network*> {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, RegressionModel>) return {&x.net};
            else return {&x.prenet, &x.dynamics, &x.postnet};
        },
        m);
}

inline std::vector<const ad::Network*> networks(const AnyModel& m) {
    std::vector<const ad::Network*> out;
    for (auto* n : networks(const_cast<AnyModel&>(m))) out.push_back(n);
    return out;
}

/// Solver config of an ODE model; nullptr for the regression baseline.
inline ode::SolverConfig* solver_of(AnyModel& m) {
    if (auto* c = std::get_if<ContourEvolutionModel>(&m)) return &c->solver;
    if (auto* i = std::get_if<ImageEvolutionModel>(&m)) return &i->solver;
    return nullptr;
}

inline std::vector<double> flat_values(const AnyModel& m) {
    std::vector<double> out;
    for (const auto* n : networks(m)) {
        const auto v = n->flat_values();
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

inline void set_flat_values(AnyModel& m, std::span<const double> v) {
    std::size_t o = 0;
    for (auto* n : networks(m)) {
        const std::size_t k = n->num_params();
        if (o + k > v.size()) throw InvalidInput("set_flat_values: too few values");
        n->set_flat_values(v.subspan(o, k));
        o += k;
    }
    if (o != v.size()) throw InvalidInput("set_flat_values: too many values");
}

/// Name of every scalar's owning parameter, aligned with flat_values.
inline std::vector<const std::string*> flat_names(const AnyModel& m) {
    std::vector<const std::string*> out;
    for (const auto* n : networks(m))
        for (const auto& p : n->params())
            for (std::size_t i = 0; i < p.value.size(); ++i) out.push_back(&p.name);
    return out;
}

inline std::size_t num_params(const AnyModel& m) {
    std::size_t n = 0;
    for (const auto* net : networks(m)) n += net->num_params();
    return n;
}

/// Predicted distance map; `init_phi` is required by contour evolution.
inline EvolveResult predict(AnyModel& m, const ImageGrid& image, const DistanceMap* init_phi,
                            bool capture_frames = false) {
    switch (kind_of(m)) {
        case ModelKind::regression: {
            EvolveResult r;
            r.phi = regression_forward(std::get<RegressionModel>(m), image);
            if (capture_frames) r.frames.push_back({1.0, r.phi});
            return r;
        }
        case ModelKind::contour_evolution:
            if (!init_phi) throw InvalidInput("contour evolution needs an initial distance map");
            return contour_evolve_forward(std::get<ContourEvolutionModel>(m), image, *init_phi, capture_frames);
        case ModelKind::image_evolution:
            return image_evolve_forward(std::get<ImageEvolutionModel>(m), image, capture_frames);
    }
    throw InvalidInput("predict: bad model");
}

inline GradientResult gradient(AnyModel& m, const ImageGrid& image, const DistanceMap* init_phi,
                               const PixelLoss& loss) {
    switch (kind_of(m)) {
        case ModelKind::regression: return regression_gradient(std::get<RegressionModel>(m), image, loss);
        case ModelKind::contour_evolution:
            if (!init_phi) throw InvalidInput("contour evolution needs an initial distance map");
            return contour_evolve_gradient(std::get<ContourEvolutionModel>(m), image, *init_phi, loss);
        case ModelKind::image_evolution:
            return image_evolve_gradient(std::get<ImageEvolutionModel>(m), image, loss);
    }
    throw InvalidInput("gradient: bad model");
}

// --------------------------------------------------------------- classical

struct ClassicalSpeedConfig {
    double alpha = 1.0;
    double beta = -0.2;
    double gamma_edge = 1.0;
    double smoothing_sigma = 1.0;
    /// Multiplies the smoothed image gradient inside the edge-stopping term;
    /// 1 gives g = gamma_edge / (1 + |grad(G*I)|^2).
    double edge_scale = 20.0;
    double dt = 0.2;
    int steps = 100;
    int reinit_every = 0;

    void validate() const {
        if (!(dt > 0.0)) throw InvalidInput("classical: dt must be positive");
        if (steps < 1) throw InvalidInput("classical: steps must be >= 1");
        if (reinit_every < 0) throw InvalidInput("classical: reinit_every must be >= 0");
        if (smoothing_sigma < 0.0) throw InvalidInput("classical: smoothing_sigma must be >= 0");
    }
};

/// Largest allowed dt * max|F| in pixels per step.
inline constexpr double kCflLimit = 0.5;

struct ClassicalResult {
    DistanceMap phi;
    std::vector<Frame> frames;
};

/// g = gamma_edge / (1 + |edge_scale * grad(G_sigma * I)|^2).
inline ScalarField edge_stopping(const ImageGrid& image, const ClassicalSpeedConfig& cfg) {
    const ScalarField grad = gradient_magnitude(gaussian_blur(image, cfg.smoothing_sigma));
    ScalarField g(image.height(), image.width());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = cfg.edge_scale * grad[i];
        g[i] = cfg.gamma_edge / (1.0 + s * s);
    }
    return g;
}

/// Explicit Euler on phi_t = -|grad phi| F with F = alpha g + beta kappa.
/// Positive F moves the front outward under the negative-inside sign
/// convention; kappa is clamped to [-1, 1] (one-pixel radius).
inline ClassicalResult classical_evolve(const ImageGrid& image, const DistanceMap& phi0,
                                        const ClassicalSpeedConfig& cfg, bool capture_frames = false) {
    cfg.validate();
    require_same_shape(image, phi0, "classical_evolve");
    const ScalarField g = edge_stopping(image, cfg);
    ClassicalResult res{phi0, {}};
    if (capture_frames) res.frames.push_back({0.0, phi0});
    ScalarField speed(phi0.height(), phi0.width());
    for (int step = 1; step <= cfg.steps; ++step) {
        const ScalarField grad = gradient_magnitude(res.phi);
        const ScalarField kappa = cfg.beta != 0.0 ? curvature(res.phi) : ScalarField(phi0.height(), phi0.width());
        double max_speed = 0.0;
        for (std::size_t i = 0; i < speed.size(); ++i) {
            speed[i] = cfg.alpha * g[i] + cfg.beta * std::clamp(kappa[i], -1.0, 1.0);
            max_speed = std::max(max_speed, std::abs(speed[i]));
        }
        if (cfg.dt * max_speed > kCflLimit)
            throw StabilityError("classical_evolve: dt * max|F| = " + std::to_string(cfg.dt * max_speed) +
                                 " exceeds " + std::to_string(kCflLimit) + " px per step");
        for (std::size_t i = 0; i < speed.size(); ++i) res.phi[i] -= cfg.dt * grad[i] * speed[i];
        if (cfg.reinit_every > 0 && step % cfg.reinit_every == 0) res.phi = reinitialize(res.phi);
        if (capture_frames) res.frames.push_back({step * cfg.dt, res.phi});
    }
    return res;
}

// ------------------------------------------------------------ perturbation

namespace detail {

/// Zero-mean, unit-variance noise, bilinearly upsampled from a coarse
/// (cells+1) x (cells+1) lattice.
inline ScalarField smooth_noise(int h, int w, int cells, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    ScalarField coarse(cells + 1, cells + 1);
    for (auto& v : coarse.values()) v = nd(rng);
    ScalarField out(h, w);
    double mean = 0.0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double x = (w > 1 ? static_cast<double>(c) / (w - 1) : 0.0) * cells;
            const double y = (h > 1 ? static_cast<double>(r) / (h - 1) : 0.0) * cells;
            out(r, c) = bilinear(coarse, x, y);
            mean += out(r, c);
        }
    mean /= static_cast<double>(out.size());
    double var = 0.0;
    for (auto& v : out.values()) {
        v -= mean;
        var += v * v;
    }
    const double sd = std::sqrt(var / static_cast<double>(out.size()));
    if (sd > 0.0)
        for (auto& v : out.values()) v /= sd;
    return out;
}

inline BinaryMask morph(const BinaryMask& m, bool dilate) {
    const int h = m.height(), w = m.width();
    BinaryMask out(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            bool any = false, all = true;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    const int rr = r + dr, cc = c + dc;
                    const bool v = rr >= 0 && rr < h && cc >= 0 && cc < w && m(rr, cc);
                    any = any || v;
                    all = all && v;
                }
            out(r, c) = (dilate ? any : all) ? 1 : 0;
        }
    return out;
}

}  // namespace detail

inline BinaryMask morph_open(const BinaryMask& m) { return detail::morph(detail::morph(m, false), true); }
inline BinaryMask morph_close(const BinaryMask& m) { return detail::morph(detail::morph(m, true), false); }

/// Stand-in for an upstream segmenter: affine jitter of the ground truth
/// (translation <= 6 s px, scale 1 +- 0.15 s), smooth boundary noise, then a
/// random 3x3 opening or closing; returns the SDT of the result.
inline DistanceMap perturb_initial_contour(const BinaryMask& gt, double severity, std::uint64_t seed) {
    if (!(severity >= 0.0 && severity <= 1.0)) throw InvalidInput("perturb_initial_contour: severity must be in [0, 1]");
    if (severity == 0.0) return signed_distance_transform(gt);
    const int h = gt.height(), w = gt.width();
    const DistanceMap phi = signed_distance_transform(gt);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double tx = 6.0 * severity * u(rng);
    const double ty = 6.0 * severity * u(rng);
    const double scale = 1.0 + 0.15 * severity * u(rng);
    double cx = 0.0, cy = 0.0, n = 0.0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (gt(r, c)) {
                cx += c;
                cy += r;
                n += 1.0;
            }
    if (n > 0) {
        cx /= n;
        cy /= n;
    }
    const ScalarField noise = detail::smooth_noise(h, w, 6, rng);
    BinaryMask m(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double sx = cx + (c - cx - tx) / scale;
            const double sy = cy + (r - cy - ty) / scale;
            const double v = bilinear(phi, sx, sy) * scale + 2.5 * severity * noise(r, c);
            m(r, c) = v <= 0.0 ? 1 : 0;
        }
    m = (rng() & 1U) ? morph_open(m) : morph_close(m);
    bool any = false;
    for (auto v : m.values()) any = any || v;
    if (!any) throw DegenerateSample("perturb_initial_contour: perturbation erased the foreground");
    return signed_distance_transform(m);
}

}  // namespace nls
