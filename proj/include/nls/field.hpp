#pragma once

// Discrete level-set geometry on pixel grids. Pixel (row r, col c) has its
// center at (x = c, y = r); all distances are between pixel centers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <vector>

#include "nls/errors.hpp"
#include "nls/grid.hpp"

namespace nls {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

using Polyline = std::vector<Point>;

/// Zero level set as a set of polylines. Closed loops repeat their first
/// vertex at the end.
struct Contour {
    std::vector<Polyline> segments;

    bool empty() const noexcept { return segments.empty(); }
    std::size_t vertex_count() const noexcept {
        std::size_t n = 0;
        for (const auto& s : segments) n += s.size();
        return n;
    }
};

inline double grid_diagonal(int height, int width) {
    return std::hypot(static_cast<double>(height), static_cast<double>(width));
}

namespace detail {

inline constexpr double kEdtInf = 1e20;

// Exact 1D squared distance transform (lower envelope of parabolas).
inline void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double s = 0.0;
        for (;;) {
            const int p = v[static_cast<std::size_t>(k)];
            s = ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) /
                (2.0 * (q - p));
            if (s <= z[static_cast<std::size_t>(k)] && k > 0) {
                --k;
                continue;
            }
            break;
        }
        if (s <= z[static_cast<std::size_t>(k)]) {
            v[static_cast<std::size_t>(k)] = q;
            z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
            continue;
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
        const int p = v[static_cast<std::size_t>(k)];
        const double dq = static_cast<double>(q - p);
        d[q] = dq * dq + f[p];
    }
}

}  // namespace detail

/// Exact squared Euclidean distance from every pixel to the nearest pixel
/// where `is_source` holds. Values are integers stored as doubles;
/// pixels with no source at all get detail::kEdtInf.
template <class Pred>
std::vector<double> squared_distance_to(int height, int width, Pred is_source) {
    const std::size_t n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    std::vector<double> g(n);
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
            g[static_cast<std::size_t>(r) * width + c] = is_source(r, c) ? 0.0 : detail::kEdtInf;

    std::vector<int> v;
    std::vector<double> z;
    std::vector<double> f(static_cast<std::size_t>(std::max(height, width)));
    std::vector<double> d(f.size());
    for (int c = 0; c < width; ++c) {
        for (int r = 0; r < height; ++r) f[static_cast<std::size_t>(r)] = g[static_cast<std::size_t>(r) * width + c];
        detail::edt_1d(f.data(), d.data(), height, v, z);
        for (int r = 0; r < height; ++r) g[static_cast<std::size_t>(r) * width + c] = d[static_cast<std::size_t>(r)];
    }
    for (int r = 0; r < height; ++r) {
        double* row = g.data() + static_cast<std::size_t>(r) * width;
        std::copy(row, row + width, f.begin());
        detail::edt_1d(f.data(), d.data(), width, v, z);
        std::copy(d.begin(), d.begin() + width, row);
    }
    for (auto& x : g)
        if (x >= detail::kEdtInf * 0.5) x = detail::kEdtInf;
    return g;
}

/// Signed Euclidean distance to the nearest opposite-class pixel center:
/// negative on foreground, positive on background. Single-class masks
/// saturate at the grid diagonal.
inline DistanceMap signed_distance_transform(const BinaryMask& mask) {
    const int h = mask.height();
    const int w = mask.width();
    if (h == 0 || w == 0) throw InvalidInput("signed_distance_transform: zero-sized grid");

    bool any_fg = false;
    bool any_bg = false;
    for (auto v : mask.values()) (v ? any_fg : any_bg) = true;

    DistanceMap phi(h, w);
    const double diag = grid_diagonal(h, w);
    if (!any_fg || !any_bg) {
        std::fill(phi.storage().begin(), phi.storage().end(), any_fg ? -diag : diag);
        return phi;
    }
    const auto to_bg = squared_distance_to(h, w, [&](int r, int c) { return mask(r, c) == 0; });
    const auto to_fg = squared_distance_to(h, w, [&](int r, int c) { return mask(r, c) != 0; });
    for (std::size_t i = 0; i < phi.size(); ++i)
        phi[i] = mask[i] ? -std::sqrt(to_bg[i]) : std::sqrt(to_fg[i]);
    return phi;
}

/// Foreground wherever phi <= 0.
inline BinaryMask mask_from_phi(const DistanceMap& phi) {
    BinaryMask m(phi.height(), phi.width());
    for (std::size_t i = 0; i < phi.size(); ++i) m[i] = phi[i] <= 0.0 ? 1 : 0;
    return m;
}

/// Bilinear interpolation at sub-pixel (x, y), clamped to the grid.
template <class G>
double bilinear(const G& g, double x, double y) {
    const int w = g.width();
    const int h = g.height();
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const int c0 = std::min(static_cast<int>(std::floor(x)), std::max(w - 2, 0));
    const int r0 = std::min(static_cast<int>(std::floor(y)), std::max(h - 2, 0));
    const int c1 = std::min(c0 + 1, w - 1);
    const int r1 = std::min(r0 + 1, h - 1);
    const double fx = x - c0;
    const double fy = y - r0;
    const double top = g(r0, c0) * (1.0 - fx) + g(r0, c1) * fx;
    const double bot = g(r1, c0) * (1.0 - fx) + g(r1, c1) * fx;
    return top * (1.0 - fy) + bot * fy;
}

/// Marching squares over cells spanned by pixel centers. A corner is inside
/// when phi <= 0; crossings are linearly interpolated along cell edges and
/// saddle cells are resolved by the sign of the cell-center average.
inline Contour extract_zero_level_set(const DistanceMap& phi) {
    const int h = phi.height();
    const int w = phi.width();
    Contour out;
    if (h < 2 || w < 2) return out;

    // Horizontal edge (r,c)-(r,c+1) and vertical edge (r,c)-(r+1,c) ids.
    const long long n_horizontal = static_cast<long long>(h) * (w - 1);
    auto hid = [&](int r, int c) { return static_cast<long long>(r) * (w - 1) + c; };
    auto vid = [&](int r, int c) { return n_horizontal + static_cast<long long>(r) * w + c; };
    auto inside = [&](int r, int c) { return phi(r, c) <= 0.0; };

    auto vertex_of = [&](long long id) {
        int r0, c0, r1, c1;
        if (id < n_horizontal) {
            r0 = r1 = static_cast<int>(id / (w - 1));
            c0 = static_cast<int>(id % (w - 1));
            c1 = c0 + 1;
        } else {
            const long long k = id - n_horizontal;
            r0 = static_cast<int>(k / w);
            c0 = c1 = static_cast<int>(k % w);
            r1 = r0 + 1;
        }
        const double a = phi(r0, c0);
        const double b = phi(r1, c1);
        const double t = a / (a - b);
        return Point{c0 + t * (c1 - c0), r0 + t * (r1 - r0)};
    };

    std::unordered_map<long long, std::array<long long, 2>> adjacency;
    std::unordered_map<long long, int> degree;
    std::vector<long long> order;  // first-seen order keeps the output deterministic
    auto link = [&](long long a, long long b) {
        for (auto [p, q] : {std::pair{a, b}, std::pair{b, a}}) {
            auto [it, fresh] = degree.try_emplace(p, 0);
            if (fresh) order.push_back(p);
            adjacency[p][static_cast<std::size_t>(it->second)] = q;
            ++it->second;
        }
    };

    for (int r = 0; r + 1 < h; ++r) {
        for (int c = 0; c + 1 < w; ++c) {
            const bool tl = inside(r, c), tr = inside(r, c + 1);
            const bool br = inside(r + 1, c + 1), bl = inside(r + 1, c);
            const long long top = hid(r, c), bottom = hid(r + 1, c);
            const long long left = vid(r, c), right = vid(r, c + 1);
            std::vector<long long> crossing;
            if (tl != tr) crossing.push_back(top);
            if (tr != br) crossing.push_back(right);
            if (bl != br) crossing.push_back(bottom);
            if (tl != bl) crossing.push_back(left);
            if (crossing.size() == 2) {
                link(crossing[0], crossing[1]);
            } else if (crossing.size() == 4) {
                const double center = 0.25 * (phi(r, c) + phi(r, c + 1) + phi(r + 1, c + 1) + phi(r + 1, c));
                const bool center_inside = center <= 0.0;
                if (center_inside == tl) {
                    link(top, right);
                    link(bottom, left);
                } else {
                    link(top, left);
                    link(right, bottom);
                }
            }
        }
    }

    std::unordered_map<long long, bool> visited;
    auto walk = [&](long long start) {
        Polyline line;
        long long prev = -1;
        long long cur = start;
        for (;;) {
            visited[cur] = true;
            line.push_back(vertex_of(cur));
            const auto& nb = adjacency[cur];
            const int deg = degree[cur];
            long long next = -1;
            for (int i = 0; i < deg; ++i) {
                const long long cand = nb[static_cast<std::size_t>(i)];
                if (cand != prev && !visited[cand]) {
                    next = cand;
                    break;
                }
            }
            if (next < 0) {
                // Close the loop when we are back next to the start.
                for (int i = 0; i < deg; ++i)
                    if (nb[static_cast<std::size_t>(i)] == start && prev != start && line.size() > 2) {
                        line.push_back(line.front());
                        break;
                    }
                break;
            }
            prev = cur;
            cur = next;
        }
        if (line.size() >= 2) out.segments.push_back(std::move(line));
    };

    for (long long id : order)
        if (degree[id] == 1 && !visited[id]) walk(id);
    for (long long id : order)
        if (!visited[id]) walk(id);
    return out;
}

/// |grad phi| with central differences inside and one-sided differences on
/// the border.
template <class G>
ScalarField gradient_magnitude(const G& phi) {
    const int h = phi.height();
    const int w = phi.width();
    if (h < 3 || w < 3) throw InvalidInput("gradient_magnitude: grid must be at least 3x3");
    ScalarField out(h, w);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double gx, gy;
            if (c == 0) gx = phi(r, 1) - phi(r, 0);
            else if (c == w - 1) gx = phi(r, w - 1) - phi(r, w - 2);
            else gx = 0.5 * (phi(r, c + 1) - phi(r, c - 1));
            if (r == 0) gy = phi(1, c) - phi(0, c);
            else if (r == h - 1) gy = phi(h - 1, c) - phi(h - 2, c);
            else gy = 0.5 * (phi(r + 1, c) - phi(r - 1, c));
            out(r, c) = std::sqrt(gx * gx + gy * gy);
        }
    }
    return out;
}

inline constexpr double kCurvatureEps = 1e-8;

/// Mean curvature div(grad phi / |grad phi|), expanded with central
/// differences; border values are copied from the nearest interior pixel.
template <class G>
ScalarField curvature(const G& phi) {
    const int h = phi.height();
    const int w = phi.width();
    if (h < 3 || w < 3) throw InvalidInput("curvature: grid must be at least 3x3");
    ScalarField out(h, w);
    for (int r = 1; r + 1 < h; ++r) {
        for (int c = 1; c + 1 < w; ++c) {
            const double px = 0.5 * (phi(r, c + 1) - phi(r, c - 1));
            const double py = 0.5 * (phi(r + 1, c) - phi(r - 1, c));
            const double pxx = phi(r, c + 1) - 2.0 * phi(r, c) + phi(r, c - 1);
            const double pyy = phi(r + 1, c) - 2.0 * phi(r, c) + phi(r - 1, c);
            const double pxy =
                0.25 * (phi(r + 1, c + 1) - phi(r - 1, c + 1) - phi(r + 1, c - 1) + phi(r - 1, c - 1));
            const double g = std::max(std::sqrt(px * px + py * py), kCurvatureEps);
            out(r, c) = (pxx * py * py - 2.0 * px * py * pxy + pyy * px * px) / (g * g * g);
        }
    }
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (r > 0 && r + 1 < h && c > 0 && c + 1 < w) continue;
            out(r, c) = out(std::clamp(r, 1, h - 2), std::clamp(c, 1, w - 2));
        }
    }
    return out;
}

inline constexpr double kDefaultBandWidth = 5.0;

/// tanh(phi / width): keeps the sign and the zero set, squashes far levels.
template <class G>
ScalarField narrow_band(const G& phi, double width = kDefaultBandWidth) {
    if (!(width > 0.0)) throw InvalidInput("narrow_band: width must be positive");
    ScalarField out(phi.height(), phi.width());
    for (std::size_t i = 0; i < phi.size(); ++i) out[i] = std::tanh(phi[i] / width);
    return out;
}

inline double point_segment_distance(Point p, Point a, Point b) {
    const double dx = b.x - a.x;
    const double dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
    return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

/// Rebuilds a signed distance map from the zero level set of `phi`: the
/// interior (phi <= 0 at pixel centers) fixes the sign and the magnitude is
/// the exact distance to the extracted sub-pixel contour.
template <class G>
DistanceMap reinitialize(const G& phi_in) {
    const DistanceMap phi(phi_in);
    const Contour contour = extract_zero_level_set(phi);
    if (contour.empty()) throw NoContour("reinitialize: phi has no zero level set");

    struct Seg {
        Point a, b;
    };
    std::vector<Seg> segs;
    for (const auto& line : contour.segments)
        for (std::size_t i = 0; i + 1 < line.size(); ++i) segs.push_back({line[i], line[i + 1]});

    // Bucket segments so each pixel only scans nearby cells first.
    const int h = phi.height();
    const int w = phi.width();
    constexpr int kCell = 8;
    const int gh = (h + kCell - 1) / kCell;
    const int gw = (w + kCell - 1) / kCell;
    std::vector<std::vector<int>> buckets(static_cast<std::size_t>(gh) * gw);
    for (std::size_t i = 0; i < segs.size(); ++i) {
        const auto& s = segs[i];
        const int r0 = std::clamp(static_cast<int>(std::floor(std::min(s.a.y, s.b.y))) / kCell, 0, gh - 1);
        const int r1 = std::clamp(static_cast<int>(std::floor(std::max(s.a.y, s.b.y))) / kCell, 0, gh - 1);
        const int c0 = std::clamp(static_cast<int>(std::floor(std::min(s.a.x, s.b.x))) / kCell, 0, gw - 1);
        const int c1 = std::clamp(static_cast<int>(std::floor(std::max(s.a.x, s.b.x))) / kCell, 0, gw - 1);
        for (int r = r0; r <= r1; ++r)
            for (int c = c0; c <= c1; ++c) buckets[static_cast<std::size_t>(r) * gw + c].push_back(static_cast<int>(i));
    }

    DistanceMap out(h, w);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const Point p{static_cast<double>(c), static_cast<double>(r)};
            const int br = r / kCell;
            const int bc = c / kCell;
            double best = std::numeric_limits<double>::infinity();
            // Expand rings of buckets until no closer segment can exist.
            for (int ring = 0;; ++ring) {
                bool any = false;
                for (int rr = br - ring; rr <= br + ring; ++rr) {
                    for (int cc = bc - ring; cc <= bc + ring; ++cc) {
                        if (std::max(std::abs(rr - br), std::abs(cc - bc)) != ring) continue;
                        if (rr < 0 || cc < 0 || rr >= gh || cc >= gw) continue;
                        any = true;
                        for (int si : buckets[static_cast<std::size_t>(rr) * gw + cc])
                            best = std::min(best, point_segment_distance(p, segs[static_cast<std::size_t>(si)].a,
                                                                         segs[static_cast<std::size_t>(si)].b));
                    }
                }
                if (!any && ring > gh + gw) break;
                // Anything in ring k+1 is at least k*kCell away.
                if (best <= static_cast<double>(ring) * kCell) break;
                if (ring > gh + gw) break;
            }
            out(r, c) = phi(r, c) <= 0.0 ? -best : best;
        }
    }
    return out;
}

/// Separable Gaussian blur with edge replication; sigma <= 0 copies.
template <class G>
G gaussian_blur(const G& in, double sigma) {
    if (sigma <= 0.0) return in;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + radius)];
    }
    for (auto& v : k) v /= sum;
    const int h = in.height();
    const int w = in.width();
    G tmp(h, w);
    G out(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[static_cast<std::size_t>(i + radius)] * in(r, std::clamp(c + i, 0, w - 1));
            tmp(r, c) = acc;
        }
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[static_cast<std::size_t>(i + radius)] * tmp(std::clamp(r + i, 0, h - 1), c);
            out(r, c) = acc;
        }
    return out;
}

}  // namespace nls
