#pragma once

// Explicit initial-value solvers over flat states: adaptive Dormand-Prince
// 5(4) with first-same-as-last reuse, classic fixed-step RK4, and the
// continuous adjoint for gradients with respect to the initial state and
// the dynamics parameters.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nls/errors.hpp"

namespace nls::ode {

struct StateShape {
    int channels = 1;
    int height = 1;
    int width = 1;

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    }
    friend bool operator==(const StateShape&, const StateShape&) = default;
};

/// A flattened stack of channel fields.
struct OdeState {
    std::vector<double> values;
    StateShape shape;

    OdeState() = default;
    explicit OdeState(std::vector<double> v) : values(std::move(v)), shape{1, 1, static_cast<int>(values.size())} {}
    OdeState(std::vector<double> v, StateShape s) : values(std::move(v)), shape(s) {
        if (shape.size() != values.size()) throw InvalidInput("OdeState: shape does not match value count");
    }

    std::size_t size() const noexcept { return values.size(); }
};

enum class Method { rk45_adaptive, rk4_fixed };

struct SolverConfig {
    double a_tol = 1e-3;
    double r_tol = 0.0;
    double t0 = 0.0;
    double t1 = 1.0;
    int max_steps = 1000;
    /// <= 0 selects (t1 - t0) / 10.
    double initial_dt = 0.0;
    Method method = Method::rk45_adaptive;
    int fixed_steps = 16;

    void validate() const {
        if (!(a_tol >= 0.0) || !(r_tol >= 0.0) || !(a_tol + r_tol > 0.0))
            throw InvalidInput("SolverConfig: tolerances must be nonnegative with a positive sum");
        if (!(t1 > t0)) throw InvalidInput("SolverConfig: t1 must exceed t0");
        if (max_steps < 1) throw InvalidInput("SolverConfig: max_steps must be >= 1");
        if (method == Method::rk4_fixed && fixed_steps < 1)
            throw InvalidInput("SolverConfig: fixed_steps must be >= 1");
    }
};

struct SolveStats {
    long nfe = 0;
    long accepted_steps = 0;
    long rejected_steps = 0;
    double final_dt = 0.0;
};

class StepLimitExceeded : public Error {
public:
    StepLimitExceeded(const std::string& what, SolveStats partial) : Error(what), stats_(partial) {}
    const SolveStats& stats() const noexcept { return stats_; }

private:
    SolveStats stats_;
};

/// f(t, y, dy_out).
template <class F>
concept Dynamics = requires(F& f, double t, std::span<const double> y, std::span<double> dy) { f(t, y, dy); };

/// Dynamics that can also form vector-Jacobian products. `vjp` writes
/// f(t, y), a^T df/dy and a^T df/dtheta.
template <class F>
concept AdjointDynamics =
    Dynamics<F> && requires(F& f, double t, std::span<const double> y, std::span<const double> a,
                            std::span<double> fy, std::span<double> a_dfdy, std::span<double> a_dfdtheta) {
        { f.num_params() } -> std::convertible_to<std::size_t>;
        f.vjp(t, y, a, fy, a_dfdy, a_dfdtheta);
    };

using Observer = std::function<void(double t, std::span<const double> state)>;

inline double inf_norm(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

/// e_tol = a_tol + r_tol * ||state||_inf.
inline double compute_error_tolerance(const SolverConfig& cfg, std::span<const double> state) {
    return cfg.a_tol + cfg.r_tol * inf_norm(state);
}
inline double compute_error_tolerance(const SolverConfig& cfg, const OdeState& state) {
    return compute_error_tolerance(cfg, std::span<const double>(state.values));
}

namespace dopri {
// Dormand-Prince 5(4) Butcher tableau.
inline constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                        a65 = -5103.0 / 18656;
inline constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
// 5th-order minus embedded 4th-order weights.
inline constexpr double e1 = b1 - 5179.0 / 57600, e3 = b3 - 7571.0 / 16695, e4 = b4 - 393.0 / 640,
                        e5 = b5 - -92097.0 / 339200, e6 = b6 - 187.0 / 2100, e7 = -1.0 / 40;
}  // namespace dopri

namespace detail {

inline void check_finite(std::span<const double> v, const char* where) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericalBlowup(std::string(where) + ": non-finite value");
}

template <Dynamics F>
void eval(F& f, double t, std::span<const double> y, std::span<double> dy, SolveStats& stats) {
    f(t, y, dy);
    ++stats.nfe;
    check_finite(dy, "dynamics output");
}

}  // namespace detail

/// Scratch buffers for one Dormand-Prince step.
class Rk45Workspace {
public:
    explicit Rk45Workspace(std::size_t n) : k_(7, std::vector<double>(n)), tmp_(n) {}

    std::vector<double>& k(int i) { return k_[static_cast<std::size_t>(i)]; }

    /// Advances y by dt given k1 = f(t, y) already stored in k(0). Writes
    /// the 5th-order proposal into `next`, leaves f(t+dt, next) in k(6) and
    /// returns the infinity-norm error estimate.
    template <Dynamics F>
    double step(F& f, double t, std::span<const double> y, double dt, std::span<double> next, SolveStats& stats) {
        using namespace dopri;
        const std::size_t n = y.size();
        auto& k1 = k_[0];
        auto& k2 = k_[1];
        auto& k3 = k_[2];
        auto& k4 = k_[3];
        auto& k5 = k_[4];
        auto& k6 = k_[5];
        auto& k7 = k_[6];
        for (std::size_t i = 0; i < n; ++i) tmp_[i] = y[i] + dt * a21 * k1[i];
        detail::eval(f, t + c2 * dt, tmp_, k2, stats);
        for (std::size_t i = 0; i < n; ++i) tmp_[i] = y[i] + dt * (a31 * k1[i] + a32 * k2[i]);
        detail::eval(f, t + c3 * dt, tmp_, k3, stats);
        for (std::size_t i = 0; i < n; ++i) tmp_[i] = y[i] + dt * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
        detail::eval(f, t + c4 * dt, tmp_, k4, stats);
        for (std::size_t i = 0; i < n; ++i)
            tmp_[i] = y[i] + dt * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
        detail::eval(f, t + c5 * dt, tmp_, k5, stats);
        for (std::size_t i = 0; i < n; ++i)
            tmp_[i] = y[i] + dt * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
        detail::eval(f, t + dt, tmp_, k6, stats);
        for (std::size_t i = 0; i < n; ++i)
            next[i] = y[i] + dt * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
        detail::eval(f, t + dt, next, k7, stats);
        double err = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double e =
                dt * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
            err = std::max(err, std::abs(e));
        }
        return err;
    }

private:
    std::vector<std::vector<double>> k_;
    std::vector<double> tmp_;
};

struct StepResult {
    OdeState next;
    double error_estimate = 0.0;
};

/// One standalone Dormand-Prince step (evaluates k1 itself).
template <Dynamics F>
StepResult rk45_step(F&& f, double t, const OdeState& state, double dt) {
    if (!(dt > 0.0)) throw InvalidInput("rk45_step: dt must be positive");
    Rk45Workspace ws(state.size());
    SolveStats stats;
    detail::eval(f, t, state.values, ws.k(0), stats);
    StepResult r{state, 0.0};
    r.error_estimate = ws.step(f, t, state.values, dt, r.next.values, stats);
    detail::check_finite(r.next.values, "rk45_step");
    return r;
}

struct SolveResult {
    OdeState state;
    SolveStats stats;
};

inline double step_factor(double e_tol, double err) {
    if (err <= 0.0) return 5.0;
    return std::clamp(0.9 * std::pow(e_tol / err, 0.2), 0.2, 5.0);
}

/// Adaptive Dormand-Prince integration from cfg.t0 to cfg.t1. A step is
/// accepted iff its error estimate is within compute_error_tolerance of the
/// state it starts from. nfe == 1 + 6 * (accepted + rejected).
template <Dynamics F>
SolveResult solve_rk45(F&& f, const OdeState& h0, const SolverConfig& cfg, const Observer& observer = {}) {
    cfg.validate();
    detail::check_finite(h0.values, "solve: initial state");
    const std::size_t n = h0.size();
    SolveResult res{h0, {}};
    auto& stats = res.stats;
    Rk45Workspace ws(n);
    std::vector<double> next(n);

    double t = cfg.t0;
    const double span = cfg.t1 - cfg.t0;
    double dt = cfg.initial_dt > 0.0 ? cfg.initial_dt : span / 10.0;
    detail::eval(f, t, res.state.values, ws.k(0), stats);

    while (t < cfg.t1) {
        if (stats.accepted_steps + stats.rejected_steps >= cfg.max_steps) {
            stats.final_dt = dt;
            throw StepLimitExceeded("solve: exceeded " + std::to_string(cfg.max_steps) + " steps at t=" +
                                        std::to_string(t),
                                    stats);
        }
        const double remaining = cfg.t1 - t;
        bool last = false;
        double h = dt;
        if (h >= remaining * (1.0 - 1e-12)) {
            h = remaining;
            last = true;
        }
        const double e_tol = compute_error_tolerance(cfg, res.state.values);
        const double err = ws.step(f, t, res.state.values, h, next, stats);
        const double factor = step_factor(e_tol, err);
        if (err <= e_tol) {
            ++stats.accepted_steps;
            res.state.values.swap(next);
            std::swap(ws.k(0), ws.k(6));
            t = last ? cfg.t1 : t + h;
            detail::check_finite(res.state.values, "solve: state");
            if (observer) observer(t, res.state.values);
            stats.final_dt = h;
            dt = h * factor;
        } else {
            ++stats.rejected_steps;
            dt = h * factor;
        }
    }
    return res;
}

/// Classic RK4 with uniform dt = (t1 - t0) / fixed_steps.
template <Dynamics F>
SolveResult rk4_fixed_solve(F&& f, const OdeState& h0, const SolverConfig& cfg, const Observer& observer = {}) {
    if (cfg.fixed_steps < 1) throw InvalidInput("rk4_fixed_solve: fixed_steps must be >= 1");
    if (!(cfg.t1 > cfg.t0)) throw InvalidInput("rk4_fixed_solve: t1 must exceed t0");
    detail::check_finite(h0.values, "rk4_fixed_solve: initial state");
    const std::size_t n = h0.size();
    SolveResult res{h0, {}};
    auto& y = res.state.values;
    std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
    const double dt = (cfg.t1 - cfg.t0) / cfg.fixed_steps;
    for (int s = 0; s < cfg.fixed_steps; ++s) {
        const double t = cfg.t0 + s * dt;
        detail::eval(f, t, y, k1, res.stats);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * dt * k1[i];
        detail::eval(f, t + 0.5 * dt, tmp, k2, res.stats);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * dt * k2[i];
        detail::eval(f, t + 0.5 * dt, tmp, k3, res.stats);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + dt * k3[i];
        detail::eval(f, t + dt, tmp, k4, res.stats);
        for (std::size_t i = 0; i < n; ++i) y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        ++res.stats.accepted_steps;
        detail::check_finite(y, "rk4_fixed_solve: state");
        if (observer) observer(s + 1 == cfg.fixed_steps ? cfg.t1 : t + dt, y);
    }
    res.stats.final_dt = dt;
    return res;
}

/// Dispatches on cfg.method.
template <Dynamics F>
SolveResult solve(F&& f, const OdeState& h0, const SolverConfig& cfg, const Observer& observer = {}) {
    if (cfg.method == Method::rk4_fixed) return rk4_fixed_solve(f, h0, cfg, observer);
    return solve_rk45(f, h0, cfg, observer);
}

struct AdjointResult {
    OdeState grad_h0;
    std::vector<double> grad_theta;
    SolveStats stats;
};

/// Integrates the augmented system [h, a, a_theta] backward from t1 to t0
/// starting at [h1, dL/dh1, 0], using the forward tolerances. Returns
/// dL/dh0 and dL/dtheta.
template <AdjointDynamics F>
AdjointResult adjoint_solve(F& f, const OdeState& h1, const OdeState& dL_dh1, const SolverConfig& cfg) {
    cfg.validate();
    if (h1.size() != dL_dh1.size()) throw InvalidInput("adjoint_solve: state and adjoint sizes differ");
    const std::size_t n = h1.size();
    const std::size_t p = f.num_params();

    std::vector<double> y0(2 * n + p, 0.0);
    std::copy(h1.values.begin(), h1.values.end(), y0.begin());
    std::copy(dL_dh1.values.begin(), dL_dh1.values.end(), y0.begin() + static_cast<std::ptrdiff_t>(n));

    // Reversed time s = t1 - t, so d/ds = -d/dt.
    const double t1 = cfg.t1;
    auto augmented = [&](double s, std::span<const double> y, std::span<double> dy) {
        const double t = t1 - s;
        auto h = y.subspan(0, n);
        auto a = y.subspan(n, n);
        auto dh = dy.subspan(0, n);
        auto da = dy.subspan(n, n);
        auto dth = dy.subspan(2 * n, p);
        f.vjp(t, h, a, dh, da, dth);
        for (auto& v : dh) v = -v;
    };

    SolverConfig back = cfg;
    back.t0 = 0.0;
    back.t1 = cfg.t1 - cfg.t0;
    SolveResult r = solve(augmented, OdeState(std::move(y0)), back);

    AdjointResult out;
    out.grad_h0 = OdeState(std::vector<double>(r.state.values.begin() + static_cast<std::ptrdiff_t>(n),
                                               r.state.values.begin() + static_cast<std::ptrdiff_t>(2 * n)),
                           dL_dh1.shape);
    out.grad_theta.assign(r.state.values.begin() + static_cast<std::ptrdiff_t>(2 * n), r.state.values.end());
    out.stats = r.stats;
    return out;
}

}  // namespace nls::ode
