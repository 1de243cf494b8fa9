#pragma once

// Minimal tape-based reverse-mode differentiation over (channels, height,
// width) tensors, with the layer set used by the segmentation networks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "nls/errors.hpp"

namespace nls::ad {

struct Shape {
    int c = 1;
    int h = 1;
    int w = 1;

    std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
    std::size_t size() const noexcept { return static_cast<std::size_t>(c) * plane(); }
    friend bool operator==(const Shape&, const Shape&) = default;
    std::string str() const {
        return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
    }
};

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(s), data(s.size(), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(s), data(std::move(values)) {
        if (data.size() != shape.size()) throw InvalidInput("Tensor: " + shape.str() + " does not match value count");
    }

    std::size_t size() const noexcept { return data.size(); }
    double* channel(int ch) noexcept { return data.data() + static_cast<std::size_t>(ch) * shape.plane(); }
    const double* channel(int ch) const noexcept { return data.data() + static_cast<std::size_t>(ch) * shape.plane(); }
    double& at(int ch, int r, int col) noexcept { return channel(ch)[static_cast<std::size_t>(r) * shape.w + col]; }
    double at(int ch, int r, int col) const noexcept {
        return channel(ch)[static_cast<std::size_t>(r) * shape.w + col];
    }
};

/// A named trainable tensor and its gradient accumulator.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}
    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

struct Var {
    int id = -1;
};

/// Records an expression graph during forward evaluation and replays it in
/// reverse. Not thread-safe; use one tape per forward pass.
class Tape {
public:
    Var constant(Tensor t) { return push(std::move(t), false, {}); }
    Var input(Tensor t) { return push(std::move(t), true, {}); }

    const Tensor& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
    bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }

    /// Gradient accumulated into `v` by the last backward(); zeros if none.
    Tensor grad(Var v) const {
        const auto& n = nodes_.at(static_cast<std::size_t>(v.id));
        return n.grad.data.empty() ? Tensor(n.value.shape) : n.grad;
    }

    /// Seeds d(out) and propagates into inputs and parameters.
    void backward(Var out, const Tensor& seed) {
        auto& n = nodes_.at(static_cast<std::size_t>(out.id));
        if (!(seed.shape == n.value.shape)) throw InvalidInput("backward: seed shape " + seed.shape.str() +
                                                               " != " + n.value.shape.str());
        grad_ref(out.id) = seed;
        for (int i = out.id; i >= 0; --i) {
            auto& node = nodes_[static_cast<std::size_t>(i)];
            if (node.back && !node.grad.data.empty()) node.back();
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    // Used by op implementations.
    Var push(Tensor value, bool requires_grad, std::function<void()> back) {
        nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(back)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }
    const Tensor& grad_of_output(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    /// Lazily allocated gradient buffer of node `id`.
    Tensor& grad_ref(int id) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
        return n.grad;
    }
    const Tensor& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
};

namespace detail {

inline void check_shape(bool ok, const std::string& what) {
    if (!ok) throw InvalidSpec(what);
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Eigen-owned, uniformly aligned copy of a row-major block.
inline RowMatrix owned(const double* p, Eigen::Index rows, Eigen::Index cols) {
    return Eigen::Map<const RowMatrix>(p, rows, cols);
}

// (H*W) x (c*k*k) patch matrix, column-major, zero outside the image.
inline Eigen::MatrixXd im2col(const Tensor& x, int k) {
    const int H = x.shape.h, W = x.shape.w, pad = k / 2;
    Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(H) * W,
                                                 static_cast<Eigen::Index>(x.shape.c) * k * k);
    for (int ci = 0; ci < x.shape.c; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* dst = cols.col((static_cast<Eigen::Index>(ci) * k + ky) * k + kx).data();
                const double* src = x.channel(ci);
                const int dy = ky - pad, dx = kx - pad;
                const int r0 = std::max(0, -dy), r1 = std::min(H, H - dy);
                const int c0 = std::max(0, -dx), c1 = std::min(W, W - dx);
                for (int r = r0; r < r1; ++r) {
                    const double* s = src + static_cast<std::size_t>(r + dy) * W + dx;
                    double* d = dst + static_cast<std::size_t>(r) * W;
                    for (int c = c0; c < c1; ++c) d[c] = s[c];
                }
            }
    return cols;
}

}  // namespace detail

/// "Same" 2D cross-correlation with an odd k x k kernel.
/// weight shape: (c_out, c_in * k, k); bias shape: (c_out, 1, 1).
inline Var conv2d(Tape& tape, Var xv, Parameter& weight, Parameter& bias) {
    const Tensor& x = tape.value(xv);
    const int cin = x.shape.c;
    const int k = weight.value.shape.w;
    const int cout = weight.value.shape.c;
    detail::check_shape(k % 2 == 1, "conv2d: kernel must be odd-sized");
    detail::check_shape(weight.value.shape.h == cin * k,
                        "conv2d: weight " + weight.value.shape.str() + " incompatible with input " + x.shape.str());
    detail::check_shape(bias.value.size() == static_cast<std::size_t>(cout), "conv2d: bias size mismatch");
    const int pad = k / 2;
    const int H = x.shape.h;
    const int W = x.shape.w;

    const Eigen::MatrixXd cols = detail::im2col(x, k);
    Tensor out(Shape{cout, H, W});
    const detail::RowMatrix prod =
        detail::owned(weight.value.data.data(), cout, static_cast<Eigen::Index>(cin) * k * k) * cols.transpose();
    std::copy_n(prod.data(), out.size(), out.data.begin());
    for (int co = 0; co < cout; ++co) {
        double* o = out.channel(co);
        const double b = bias.value.data[static_cast<std::size_t>(co)];
        for (std::size_t i = 0; i < out.shape.plane(); ++i) o[i] += b;
    }

    const bool need_input = tape.requires_grad(xv);
    Parameter* wp = &weight;
    Parameter* bp = &bias;
    const int xid = xv.id;
    const int oid = static_cast<int>(tape.size());
    return tape.push(std::move(out), true, [&tape, wp, bp, xid, oid, need_input, cin, cout, k, pad, H, W]() {
        const Tensor& g = tape.grad_of_output(oid);
        const Eigen::Index hw = static_cast<Eigen::Index>(H) * W;
        const Eigen::Index ckk = static_cast<Eigen::Index>(cin) * k * k;
        for (int co = 0; co < cout; ++co) {
            const double* gc = g.channel(co);
            double s = 0.0;
            for (Eigen::Index i = 0; i < hw; ++i) s += gc[i];
            bp->grad.data[static_cast<std::size_t>(co)] += s;
        }
        const detail::RowMatrix gm = detail::owned(g.data.data(), cout, hw);
        const Eigen::MatrixXd cols = detail::im2col(tape.value_of(xid), k);
        const detail::RowMatrix gw = gm * cols;
        for (Eigen::Index i = 0; i < gw.size(); ++i) wp->grad.data[static_cast<std::size_t>(i)] += gw.data()[i];
        if (!need_input) return;
        const Eigen::MatrixXd gcols = gm.transpose() * detail::owned(wp->value.data.data(), cout, ckk);
        Tensor& gx = tape.grad_ref(xid);
        for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const double* src = gcols.col((static_cast<Eigen::Index>(ci) * k + ky) * k + kx).data();
                    double* dst = gx.channel(ci);
                    const int dy = ky - pad, dx = kx - pad;
                    const int r0 = std::max(0, -dy), r1 = std::min(H, H - dy);
                    const int c0 = std::max(0, -dx), c1 = std::min(W, W - dx);
                    for (int r = r0; r < r1; ++r) {
                        const double* s = src + static_cast<std::size_t>(r) * W;
                        double* d = dst + static_cast<std::size_t>(r + dy) * W;
                        for (int c = c0; c < c1; ++c) d[c + dx] += s[c];
                    }
                }
    });
}

inline constexpr double kNormEps = 1e-5;

/// Per-group normalization to zero mean / unit variance over the group's
/// channels and all spatial positions, then per-channel affine.
/// gain and bias have shape (c, 1, 1).
inline Var group_norm(Tape& tape, Var xv, int groups, Parameter& gain, Parameter& bias) {
    const Tensor& x = tape.value(xv);
    const int C = x.shape.c;
    detail::check_shape(groups >= 1 && C % groups == 0,
                        "group_norm: " + std::to_string(C) + " channels not divisible into " +
                            std::to_string(groups) + " groups");
    detail::check_shape(gain.value.size() == static_cast<std::size_t>(C) &&
                            bias.value.size() == static_cast<std::size_t>(C),
                        "group_norm: affine size mismatch");
    const int cpg = C / groups;
    const std::size_t plane = x.shape.plane();
    const std::size_t n = static_cast<std::size_t>(cpg) * plane;

    Tensor xhat(x.shape);
    std::vector<double> rstd(static_cast<std::size_t>(groups));
    for (int g = 0; g < groups; ++g) {
        const double* xs = x.channel(g * cpg);
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += xs[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (xs[i] - mean) * (xs[i] - mean);
        var /= static_cast<double>(n);
        const double rs = 1.0 / std::sqrt(var + kNormEps);
        rstd[static_cast<std::size_t>(g)] = rs;
        double* xh = xhat.channel(g * cpg);
        for (std::size_t i = 0; i < n; ++i) xh[i] = (xs[i] - mean) * rs;
    }
    Tensor out(x.shape);
    for (int ch = 0; ch < C; ++ch) {
        const double ga = gain.value.data[static_cast<std::size_t>(ch)];
        const double be = bias.value.data[static_cast<std::size_t>(ch)];
        const double* xh = xhat.channel(ch);
        double* o = out.channel(ch);
        for (std::size_t i = 0; i < plane; ++i) o[i] = xh[i] * ga + be;
    }

    const bool need_input = tape.requires_grad(xv);
    Parameter* gp = &gain;
    Parameter* bp = &bias;
    const int xid = xv.id;
    const int oid = static_cast<int>(tape.size());
    return tape.push(std::move(out), true,
                     [&tape, gp, bp, xid, oid, need_input, groups, cpg, plane, n, C, xhat = std::move(xhat),
                      rstd = std::move(rstd)]() {
                         const Tensor& g = tape.grad_of_output(oid);
                         for (int ch = 0; ch < C; ++ch) {
                             const double* gc = g.channel(ch);
                             const double* xh = xhat.channel(ch);
                             double dg = 0.0, db = 0.0;
                             for (std::size_t i = 0; i < plane; ++i) {
                                 dg += gc[i] * xh[i];
                                 db += gc[i];
                             }
                             gp->grad.data[static_cast<std::size_t>(ch)] += dg;
                             bp->grad.data[static_cast<std::size_t>(ch)] += db;
                         }
                         if (!need_input) return;
                         Tensor& gx = tape.grad_ref(xid);
                         std::vector<double> dxh(n);
                         for (int grp = 0; grp < groups; ++grp) {
                             double mean_d = 0.0, mean_dx = 0.0;
                             for (int cc = 0; cc < cpg; ++cc) {
                                 const int ch = grp * cpg + cc;
                                 const double ga = gp->value.data[static_cast<std::size_t>(ch)];
                                 const double* gc = g.channel(ch);
                                 const double* xh = xhat.channel(ch);
                                 double* d = dxh.data() + static_cast<std::size_t>(cc) * plane;
                                 for (std::size_t i = 0; i < plane; ++i) {
                                     d[i] = gc[i] * ga;
                                     mean_d += d[i];
                                     mean_dx += d[i] * xh[i];
                                 }
                             }
                             mean_d /= static_cast<double>(n);
                             mean_dx /= static_cast<double>(n);
                             const double rs = rstd[static_cast<std::size_t>(grp)];
                             const double* xh = xhat.channel(grp * cpg);
                             double* gxs = gx.channel(grp * cpg);
                             for (std::size_t i = 0; i < n; ++i)
                                 gxs[i] += rs * (dxh[i] - mean_d - xh[i] * mean_dx);
                         }
                     });
}

/// Normalization over all channels and positions jointly; identical to
/// group_norm with a single group.
inline Var layer_norm(Tape& tape, Var xv, Parameter& gain, Parameter& bias) {
    return group_norm(tape, xv, 1, gain, bias);
}

enum class Activation { none, relu, tanh };

inline Var activation(Tape& tape, Var xv, Activation kind) {
    if (kind == Activation::none) return xv;
    const Tensor& x = tape.value(xv);
    Tensor out(x.shape);
    if (kind == Activation::relu)
        for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
    else
        for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = std::tanh(x.data[i]);
    if (!tape.requires_grad(xv)) return tape.constant(std::move(out));
    const int xid = xv.id;
    const int oid = static_cast<int>(tape.size());
    return tape.push(std::move(out), true, [&tape, xid, oid, kind]() {
        const Tensor& g = tape.grad_of_output(oid);
        const Tensor& y = tape.value_of(oid);
        const Tensor& xin = tape.value_of(xid);
        Tensor& gx = tape.grad_ref(xid);
        if (kind == Activation::relu) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xin.data[i] > 0.0) gx.data[i] += g.data[i];
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
        }
    });
}

inline Var add(Tape& tape, Var a, Var b) {
    const Tensor& x = tape.value(a);
    const Tensor& y = tape.value(b);
    detail::check_shape(x.shape == y.shape, "add: shape mismatch " + x.shape.str() + " vs " + y.shape.str());
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] + y.data[i];
    const bool ga = tape.requires_grad(a), gb = tape.requires_grad(b);
    if (!ga && !gb) return tape.constant(std::move(out));
    const int aid = a.id, bid = b.id, oid = static_cast<int>(tape.size());
    return tape.push(std::move(out), true, [&tape, aid, bid, oid, ga, gb]() {
        const Tensor& g = tape.grad_of_output(oid);
        for (auto [id, need] : {std::pair{aid, ga}, std::pair{bid, gb}}) {
            if (!need) continue;
            Tensor& t = tape.grad_ref(id);
            for (std::size_t i = 0; i < g.size(); ++i) t.data[i] += g.data[i];
        }
    });
}

/// Channel-wise concatenation.
inline Var concat(Tape& tape, std::span<const Var> parts) {
    detail::check_shape(!parts.empty(), "concat: no inputs");
    const Shape s0 = tape.value(parts[0]).shape;
    int C = 0;
    bool any_grad = false;
    for (Var p : parts) {
        const Shape s = tape.value(p).shape;
        detail::check_shape(s.h == s0.h && s.w == s0.w, "concat: spatial mismatch " + s.str() + " vs " + s0.str());
        C += s.c;
        any_grad = any_grad || tape.requires_grad(p);
    }
    Tensor out(Shape{C, s0.h, s0.w});
    std::size_t off = 0;
    std::vector<std::pair<int, std::size_t>> pieces;
    for (Var p : parts) {
        const Tensor& t = tape.value(p);
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        if (tape.requires_grad(p)) pieces.emplace_back(p.id, off);
        off += t.size();
    }
    if (!any_grad) return tape.constant(std::move(out));
    const int oid = static_cast<int>(tape.size());
    return tape.push(std::move(out), true, [&tape, oid, pieces = std::move(pieces)]() {
        const Tensor& g = tape.grad_of_output(oid);
        for (auto [id, o] : pieces) {
            Tensor& t = tape.grad_ref(id);
            for (std::size_t i = 0; i < t.size(); ++i) t.data[i] += g.data[o + i];
        }
    });
}

inline Var concat(Tape& tape, std::initializer_list<Var> parts) {
    return concat(tape, std::span<const Var>(parts.begin(), parts.size()));
}

/// Channels [first, first + count).
inline Var slice_channels(Tape& tape, Var xv, int first, int count) {
    const Tensor& x = tape.value(xv);
    detail::check_shape(first >= 0 && count >= 1 && first + count <= x.shape.c, "slice_channels: out of range");
    Tensor out(Shape{count, x.shape.h, x.shape.w});
    std::copy_n(x.channel(first), out.size(), out.data.begin());
    if (!tape.requires_grad(xv)) return tape.constant(std::move(out));
    const int xid = xv.id, oid = static_cast<int>(tape.size());
    const std::size_t off = static_cast<std::size_t>(first) * x.shape.plane();
    return tape.push(std::move(out), true, [&tape, xid, oid, off]() {
        const Tensor& g = tape.grad_of_output(oid);
        Tensor& t = tape.grad_ref(xid);
        for (std::size_t i = 0; i < g.size(); ++i) t.data[off + i] += g.data[i];
    });
}

/// 2x2 average pooling; height and width must be even.
inline Var avg_pool2(Tape& tape, Var xv) {
    const Tensor& x = tape.value(xv);
    detail::check_shape(x.shape.h % 2 == 0 && x.shape.w % 2 == 0,
                        "avg_pool2: spatial size " + x.shape.str() + " not even");
    const int H = x.shape.h / 2, W = x.shape.w / 2, C = x.shape.c;
    Tensor out(Shape{C, H, W});
    for (int ch = 0; ch < C; ++ch)
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c)
                out.at(ch, r, c) = 0.25 * (x.at(ch, 2 * r, 2 * c) + x.at(ch, 2 * r, 2 * c + 1) +
                                           x.at(ch, 2 * r + 1, 2 * c) + x.at(ch, 2 * r + 1, 2 * c + 1));
    if (!tape.requires_grad(xv)) return tape.constant(std::move(out));
    const int xid = xv.id, oid = static_cast<int>(tape.size());
    return tape.push(std::move(out), true, [&tape, xid, oid, C, H, W]() {
        const Tensor& g = tape.grad_of_output(oid);
        Tensor& t = tape.grad_ref(xid);
        for (int ch = 0; ch < C; ++ch)
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c) {
                    const double v = 0.25 * g.at(ch, r, c);
                    t.at(ch, 2 * r, 2 * c) += v;
                    t.at(ch, 2 * r, 2 * c + 1) += v;
                    t.at(ch, 2 * r + 1, 2 * c) += v;
                    t.at(ch, 2 * r + 1, 2 * c + 1) += v;
                }
    });
}

/// Nearest-neighbour 2x upsampling.
inline Var upsample2(Tape& tape, Var xv) {
    const Tensor& x = tape.value(xv);
    const int H = x.shape.h, W = x.shape.w, C = x.shape.c;
    Tensor out(Shape{C, 2 * H, 2 * W});
    for (int ch = 0; ch < C; ++ch)
        for (int r = 0; r < 2 * H; ++r)
            for (int c = 0; c < 2 * W; ++c) out.at(ch, r, c) = x.at(ch, r / 2, c / 2);
    if (!tape.requires_grad(xv)) return tape.constant(std::move(out));
    const int xid = xv.id, oid = static_cast<int>(tape.size());
    return tape.push(std::move(out), true, [&tape, xid, oid, C, H, W]() {
        const Tensor& g = tape.grad_of_output(oid);
        Tensor& t = tape.grad_ref(xid);
        for (int ch = 0; ch < C; ++ch)
            for (int r = 0; r < 2 * H; ++r)
                for (int c = 0; c < 2 * W; ++c) t.at(ch, r / 2, c / 2) += g.at(ch, r, c);
    });
}

}  // namespace nls::ad
