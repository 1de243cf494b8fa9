#pragma once

// Synthetic samples, padding/cropping, and the on-disk formats: LSTF
// tensors, PGM/PNG images and the TSV manifest.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nls/errors.hpp"
#include "nls/field.hpp"
#include "nls/grid.hpp"
#include "nls/models.hpp"

namespace nls {

namespace fs = std::filesystem;

struct Sample {
    std::string id;
    ImageGrid image;
    BinaryMask gt_mask;
    DistanceMap gt_phi;
    std::optional<DistanceMap> initial_phi;
    /// 1 = pixel counts in the loss, 0 = padding.
    ScalarField loss_mask;
};

enum class ShapeFamily { disk, ellipse, blob, multi, mixed };

inline ShapeFamily parse_shape_family(const std::string& s) {
    if (s == "disk") return ShapeFamily::disk;
    if (s == "ellipse") return ShapeFamily::ellipse;
    if (s == "blob") return ShapeFamily::blob;
    if (s == "multi") return ShapeFamily::multi;
    if (s == "mixed") return ShapeFamily::mixed;
    throw InvalidInput("unknown shape family '" + s + "'");
}

inline std::string to_string(ShapeFamily f) {
    switch (f) {
        case ShapeFamily::disk: return "disk";
        case ShapeFamily::ellipse: return "ellipse";
        case ShapeFamily::blob: return "blob";
        case ShapeFamily::multi: return "multi";
        case ShapeFamily::mixed: return "mixed";
    }
    return "?";
}

struct GeneratorConfig {
    int train_count = 500;
    int val_count = 100;
    int size = 64;
    ShapeFamily family = ShapeFamily::mixed;
    double contrast = 0.5;
    double noise_sigma = 0.05;
    double weak_edge_fraction = 0.2;
    /// Perturbation severity of the stored initial contours.
    double severity = 0.5;

    void validate() const {
        if (train_count < 0 || val_count < 0 || train_count + val_count < 1)
            throw InvalidInput("generator: need at least one sample");
        if (size < 16) throw InvalidInput("generator: size must be >= 16");
        if (!(contrast > 0.0 && contrast <= 1.0)) throw InvalidInput("generator: contrast must be in (0, 1]");
        if (!(noise_sigma >= 0.0)) throw InvalidInput("generator: noise_sigma must be >= 0");
        if (!(weak_edge_fraction >= 0.0 && weak_edge_fraction <= 1.0))
            throw InvalidInput("generator: weak_edge_fraction must be in [0, 1]");
        if (!(severity >= 0.0 && severity <= 1.0)) throw InvalidInput("generator: severity must be in [0, 1]");
    }

    std::string describe() const {
        std::ostringstream os;
        os << "train=" << train_count << " val=" << val_count << " size=" << size << " family=" << to_string(family)
           << " contrast=" << contrast << " noise=" << noise_sigma << " weak_edge=" << weak_edge_fraction
           << " severity=" << severity;
        return os.str();
    }

    /// FNV-1a of describe().
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char ch : describe()) {
            h ^= ch;
            h *= 1099511628211ULL;
        }
        return h;
    }
};

inline constexpr int kMinShapeArea = 16;

namespace detail {

inline std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t id, std::uint64_t salt = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(salt)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// Implicit shape: value <= 0 inside.
inline void stamp_ellipse(ScalarField& f, double cx, double cy, double a, double b, double theta) {
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int r = 0; r < f.height(); ++r)
        for (int c = 0; c < f.width(); ++c) {
            const double dx = c - cx, dy = r - cy;
            const double u = (ct * dx + st * dy) / a, v = (-st * dx + ct * dy) / b;
            f(r, c) = std::min(f(r, c), std::sqrt(u * u + v * v) - 1.0);
        }
}

inline BinaryMask draw_shape(ShapeFamily family, int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto in = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
    const double pi = std::acos(-1.0);
    if (family == ShapeFamily::mixed) family = static_cast<ShapeFamily>(rng() % 4);
    ScalarField f(n, n, 1e9);
    switch (family) {
        case ShapeFamily::disk: {
            const double r = in(0.12, 0.28) * n;
            stamp_ellipse(f, in(0.3, 0.7) * n, in(0.3, 0.7) * n, r, r, 0.0);
            break;
        }
        case ShapeFamily::ellipse:
            stamp_ellipse(f, in(0.3, 0.7) * n, in(0.3, 0.7) * n, in(0.12, 0.3) * n, in(0.08, 0.2) * n,
                          in(0.0, pi));
            break;
        case ShapeFamily::blob: {
            const double cx = in(0.35, 0.65) * n, cy = in(0.35, 0.65) * n, rad = in(0.15, 0.28) * n;
            const ScalarField noise = smooth_noise(n, n, 4, rng);
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < n; ++c) f(r, c) = std::hypot(c - cx, r - cy) / rad - 1.0 - 0.3 * noise(r, c);
            break;
        }
        case ShapeFamily::multi: {
            const int k = 2 + static_cast<int>(rng() % 2);
            for (int i = 0; i < k; ++i) {
                const double a = in(0.08, 0.16) * n;
                stamp_ellipse(f, in(0.2, 0.8) * n, in(0.2, 0.8) * n, a, a * in(0.6, 1.0), in(0.0, pi));
            }
            break;
        }
        case ShapeFamily::mixed: break;
    }
    BinaryMask m(n, n);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = f[i] <= 0.0 ? 1 : 0;
    return m;
}

inline long area(const BinaryMask& m) {
    long a = 0;
    for (auto v : m.values()) a += v != 0;
    return a;
}

}  // namespace detail

/// One deterministic sample; `id` selects the derived seed.
inline Sample generate_sample(const GeneratorConfig& cfg, std::uint64_t seed, int id) {
    cfg.validate();
    const int n = cfg.size;
    std::mt19937_64 rng(detail::sample_seed(seed, static_cast<std::uint64_t>(id)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Sample s;
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", id);
    s.id = buf;

    constexpr int kRetries = 100;
    for (int attempt = 0;; ++attempt) {
        if (attempt == kRetries) throw DegenerateSample("generator: could not draw a shape of area >= 16 px");
        s.gt_mask = detail::draw_shape(cfg.family, n, rng);
        const long a = detail::area(s.gt_mask);
        if (a >= kMinShapeArea && a < static_cast<long>(s.gt_mask.size())) break;
    }
    s.gt_phi = signed_distance_transform(s.gt_mask);

    const double bg = 0.15 + 0.2 * u(rng);
    ImageGrid clean(n, n);
    for (std::size_t i = 0; i < clean.size(); ++i) clean[i] = bg + (s.gt_mask[i] ? cfg.contrast : 0.0);
    if (u(rng) < cfg.weak_edge_fraction) {
        // Blur the boundary within a random angular sector around the centroid.
        double cx = 0.0, cy = 0.0;
        const double a = static_cast<double>(detail::area(s.gt_mask));
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c)
                if (s.gt_mask(r, c)) {
                    cx += c;
                    cy += r;
                }
        cx /= a;
        cy /= a;
        const double pi = std::acos(-1.0);
        const double centre = 2.0 * pi * u(rng);
        const double half = pi * (0.15 + 0.2 * u(rng));
        const ImageGrid blurred = gaussian_blur(clean, 3.0);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c) {
                double d = std::atan2(r - cy, c - cx) - centre;
                d = std::remainder(d, 2.0 * pi);
                if (std::abs(d) <= half) clean(r, c) = blurred(r, c);
            }
    }
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma > 0.0 ? cfg.noise_sigma : 1.0);
    s.image = ImageGrid(n, n);
    for (std::size_t i = 0; i < clean.size(); ++i)
        s.image[i] = std::clamp(clean[i] + (cfg.noise_sigma > 0.0 ? noise(rng) : 0.0), 0.0, 1.0);

    for (int attempt = 0;; ++attempt) {
        try {
            s.initial_phi = perturb_initial_contour(
                s.gt_mask, cfg.severity, detail::sample_seed(seed, static_cast<std::uint64_t>(id), 1 + attempt));
            break;
        } catch (const DegenerateSample&) {
            if (attempt + 1 == kRetries) throw;
        }
    }
    s.loss_mask = ScalarField(n, n, 1.0);
    return s;
}

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> val;
};

inline Dataset generate_synthetic(const GeneratorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Dataset d;
    for (int i = 0; i < cfg.train_count + cfg.val_count; ++i)
        (i < cfg.train_count ? d.train : d.val).push_back(generate_sample(cfg, seed, i));
    return d;
}

// ------------------------------------------------------------- pad / crop

namespace detail {

// out(r, c) = in(r + dr, c + dc) where in range, else fill.
template <class G>
G shift_window(const G& in, int h, int w, int dr, int dc, typename G::value_type fill) {
    G out(h, w, fill);
    for (int r = 0; r < h; ++r) {
        const int sr = r + dr;
        if (sr < 0 || sr >= in.height()) continue;
        for (int c = 0; c < w; ++c) {
            const int sc = c + dc;
            if (sc >= 0 && sc < in.width()) out(r, c) = in(sr, sc);
        }
    }
    return out;
}

}  // namespace detail

/// Centre crop or zero pad (independently per axis) to target x target.
inline Sample pad_crop(const Sample& s, int target) {
    if (target < 8) throw InvalidInput("pad_crop: target size must be >= 8");
    const int h = s.image.height(), w = s.image.width();
    if (h == target && w == target) {
        Sample out = s;
        if (out.loss_mask.size() == 0) out.loss_mask = ScalarField(h, w, 1.0);
        return out;
    }
    const int dr = (h - target) / 2 + ((h - target) < 0 && (h - target) % 2 ? -1 : 0);
    const int dc = (w - target) / 2 + ((w - target) < 0 && (w - target) % 2 ? -1 : 0);
    Sample out;
    out.id = s.id;
    out.image = detail::shift_window(s.image, target, target, dr, dc, 0.0);
    out.gt_mask = detail::shift_window(s.gt_mask, target, target, dr, dc, std::uint8_t{0});
    if (detail::area(out.gt_mask) == 0) throw DegenerateSample("pad_crop: crop removed all foreground");
    out.gt_phi = signed_distance_transform(out.gt_mask);
    const ScalarField lm = s.loss_mask.size() ? s.loss_mask : ScalarField(h, w, 1.0);
    out.loss_mask = detail::shift_window(lm, target, target, dr, dc, 0.0);
    if (s.initial_phi) {
        const BinaryMask init = detail::shift_window(mask_from_phi(*s.initial_phi), target, target, dr, dc,
                                                     std::uint8_t{0});
        out.initial_phi = signed_distance_transform(init);
    }
    return out;
}

// ------------------------------------------------------------ LSTF tensors

inline constexpr char kTensorMagic[4] = {'L', 'S', 'T', 'F'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 0;

namespace detail {

inline void put_u8(std::string& b, std::uint8_t v) { b.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& b, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& b, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

/// Little-endian cursor over a byte buffer; throws FormatError on overrun.
class Reader {
public:
    Reader(const std::string& bytes, std::string what) : b_(bytes), what_(std::move(what)) {}

    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == b_.size(); }

    void need(std::size_t n) const {
        if (b_.size() - pos_ < n) throw FormatError(what_ + ": truncated", b_.size());
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(b_[pos_++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(b_[pos_++]) << (8 * i));
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b_[pos_++])) << (8 * i);
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(b_[pos_++])) << (8 * i);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    const std::string& b_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

}  // namespace detail

struct TensorData {
    std::vector<std::uint32_t> dims;
    std::vector<double> values;

    std::size_t expected_size() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

inline std::string encode_tensor(const TensorData& t) {
    if (t.dims.empty() || t.dims.size() > 255) throw InvalidInput("encode_tensor: ndim must be in [1, 255]");
    for (auto d : t.dims)
        if (d == 0) throw InvalidInput("encode_tensor: zero-length dimension");
    if (t.expected_size() != t.values.size()) throw InvalidInput("encode_tensor: dims do not match value count");
    std::string b(kTensorMagic, 4);
    detail::put_u32(b, kTensorVersion);
    detail::put_u8(b, kDtypeF64);
    detail::put_u8(b, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_u32(b, d);
    for (double v : t.values) detail::put_f64(b, v);
    return b;
}

inline TensorData decode_tensor(const std::string& bytes) {
    detail::Reader rd(bytes, "tensor");
    if (rd.bytes(4) != std::string(kTensorMagic, 4)) throw FormatError("tensor: bad magic", 0);
    const std::size_t vpos = rd.pos();
    if (rd.u32() != kTensorVersion) throw FormatError("tensor: unsupported version", vpos);
    const std::size_t tpos = rd.pos();
    if (rd.u8() != kDtypeF64) throw FormatError("tensor: unsupported dtype", tpos);
    const std::size_t npos = rd.pos();
    const int ndim = rd.u8();
    if (ndim == 0) throw FormatError("tensor: zero dimensions", npos);
    TensorData t;
    for (int i = 0; i < ndim; ++i) {
        const std::size_t dpos = rd.pos();
        t.dims.push_back(rd.u32());
        if (t.dims.back() == 0) throw FormatError("tensor: zero-length dimension", dpos);
    }
    const std::size_t n = t.expected_size();
    rd.need(n * 8);
    t.values.resize(n);
    for (auto& v : t.values) v = rd.f64();
    if (!rd.done()) throw FormatError("tensor: trailing bytes", rd.pos());
    return t;
}

inline void save_tensor(const fs::path& path, const TensorData& t) { detail::write_file(path, encode_tensor(t)); }
inline TensorData load_tensor(const fs::path& path) { return decode_tensor(detail::read_file(path)); }

template <class G>
TensorData grid_tensor(const G& g) {
    return TensorData{{static_cast<std::uint32_t>(g.height()), static_cast<std::uint32_t>(g.width())},
                      std::vector<double>(g.values().begin(), g.values().end())};
}

inline DistanceMap load_distance_map(const fs::path& path) {
    TensorData t = load_tensor(path);
    if (t.dims.size() != 2) throw FormatError(path.string() + ": expected a 2-D tensor");
    return DistanceMap(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), std::move(t.values));
}

// ----------------------------------------------------------------- images

namespace detail {

inline void skip_pnm_space(Reader& rd, const std::string& b) {
    while (!rd.done()) {
        const char ch = b[rd.pos()];
        if (ch == '#') {
            while (!rd.done() && b[rd.pos()] != '\n') rd.u8();
        } else if (std::isspace(static_cast<unsigned char>(ch))) {
            rd.u8();
        } else {
            break;
        }
    }
}

inline long pnm_int(Reader& rd, const std::string& b) {
    skip_pnm_space(rd, b);
    const std::size_t start = rd.pos();
    long v = 0;
    int digits = 0;
    while (!rd.done() && std::isdigit(static_cast<unsigned char>(b[rd.pos()]))) {
        v = v * 10 + (rd.u8() - '0');
        if (++digits > 9) throw FormatError("pgm: header number too long", start);
    }
    if (digits == 0) throw FormatError("pgm: expected a number", start);
    return v;
}

inline ImageGrid decode_pgm(const std::string& b) {
    Reader rd(b, "pgm");
    const std::string magic = rd.bytes(2);
    const bool binary = magic == "P5";
    const long w = pnm_int(rd, b), h = pnm_int(rd, b), maxval = pnm_int(rd, b);
    if (w < 1 || h < 1) throw FormatError("pgm: empty image", 3);
    if (maxval < 1 || maxval > 65535) throw FormatError("pgm: maxval out of range", rd.pos());
    ImageGrid img(static_cast<int>(h), static_cast<int>(w));
    if (binary) {
        const std::size_t ws = rd.pos();
        if (rd.done() || !std::isspace(static_cast<unsigned char>(b[rd.pos()])))
            throw FormatError("pgm: missing separator after header", ws);
        rd.u8();
        for (auto& v : img.values()) {
            long raw;
            if (maxval < 256) raw = rd.u8();
            else {
                const long hi = rd.u8();
                raw = (hi << 8) | rd.u8();
            }
            if (raw > maxval) throw FormatError("pgm: sample exceeds maxval", rd.pos());
            v = static_cast<double>(raw) / static_cast<double>(maxval);
        }
    } else {
        for (auto& v : img.values()) {
            const long raw = pnm_int(rd, b);
            if (raw > maxval) throw FormatError("pgm: sample exceeds maxval", rd.pos());
            v = static_cast<double>(raw) / static_cast<double>(maxval);
        }
    }
    return img;
}

inline ImageGrid decode_png(const fs::path& path) {
    png_image png;
    std::memset(&png, 0, sizeof png);
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str()))
        throw FormatError(path.string() + ": PNG: " + png.message);
    if (png.format & PNG_FORMAT_FLAG_COLOR) {
        png_image_free(&png);
        throw FormatError(path.string() + ": PNG is colour, expected 8-bit grayscale");
    }
    png.format = PNG_FORMAT_GRAY;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
        const std::string msg = png.message;
        png_image_free(&png);
        throw FormatError(path.string() + ": PNG: " + msg);
    }
    ImageGrid img(static_cast<int>(png.height), static_cast<int>(png.width));
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = buf[i] / 255.0;
    return img;
}

}  // namespace detail

/// Binary/ASCII PGM (maxval up to 65535) or grayscale PNG, scaled to [0, 1].
inline ImageGrid load_grayscale_image(const fs::path& path) {
    const std::string b = detail::read_file(path);
    if (b.size() >= 2 && (b.compare(0, 2, "P5") == 0 || b.compare(0, 2, "P2") == 0)) return detail::decode_pgm(b);
    if (b.size() >= 8 && b.compare(0, 8, "\x89PNG\r\n\x1a\n") == 0) return detail::decode_png(path);
    std::string head;
    for (std::size_t i = 0; i < std::min<std::size_t>(b.size(), 8); ++i) {
        const unsigned char ch = static_cast<unsigned char>(b[i]);
        head += std::isprint(ch) ? static_cast<char>(ch) : '.';
    }
    throw FormatError(path.string() + ": unsupported image format (header '" + head + "')", 0);
}

/// Binary PGM; values in [0, 1] are scaled to maxval and rounded.
template <class G>
std::string encode_pgm(const G& g, int maxval = 255) {
    if (maxval < 1 || maxval > 65535) throw InvalidInput("encode_pgm: maxval out of range");
    std::string b = "P5\n" + std::to_string(g.width()) + " " + std::to_string(g.height()) + "\n" +
                    std::to_string(maxval) + "\n";
    for (std::size_t i = 0; i < g.size(); ++i) {
        const long v = std::lround(std::clamp(static_cast<double>(g[i]), 0.0, 1.0) * maxval);
        if (maxval < 256) b.push_back(static_cast<char>(v));
        else {
            b.push_back(static_cast<char>((v >> 8) & 0xff));
            b.push_back(static_cast<char>(v & 0xff));
        }
    }
    return b;
}

/// Raw 8-bit binary PGM of byte values.
inline std::string encode_pgm_bytes(int height, int width, const std::vector<std::uint8_t>& px) {
    std::string b = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    b.append(reinterpret_cast<const char*>(px.data()), px.size());
    return b;
}

inline void save_pgm(const fs::path& path, const ImageGrid& img, int maxval = 255) {
    detail::write_file(path, encode_pgm(img, maxval));
}

inline void save_mask_pgm(const fs::path& path, const BinaryMask& m) {
    std::vector<std::uint8_t> px(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) px[i] = m[i] ? 255 : 0;
    detail::write_file(path, encode_pgm_bytes(m.height(), m.width(), px));
}

inline BinaryMask load_mask(const fs::path& path) {
    const ImageGrid g = load_grayscale_image(path);
    BinaryMask m(g.height(), g.width());
    for (std::size_t i = 0; i < g.size(); ++i) m[i] = g[i] >= 0.5 ? 1 : 0;
    return m;
}

// --------------------------------------------------------------- manifest

struct ManifestEntry {
    std::string id;
    std::string split;
    std::string image, mask, phi, init_phi;
};

struct DatasetManifest {
    fs::path root;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    std::vector<ManifestEntry> entries;
};

inline constexpr const char* kManifestName = "manifest.tsv";

inline std::string encode_manifest(const DatasetManifest& m) {
    std::ostringstream os;
    os << "# seed\t" << m.seed << "\n# config_hash\t" << m.config_hash << "\n";
    for (const auto& e : m.entries)
        os << e.id << '\t' << e.split << '\t' << e.image << '\t' << e.mask << '\t' << e.phi << '\t' << e.init_phi
           << '\n';
    return os.str();
}

inline DatasetManifest parse_manifest(const std::string& text, const fs::path& root) {
    DatasetManifest m;
    m.root = root;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::vector<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, '\t')) f.push_back(cell);
        if (line[0] == '#') {
            if (f.size() == 2 && f[0] == "# seed") m.seed = std::stoull(f[1]);
            if (f.size() == 2 && f[0] == "# config_hash") m.config_hash = std::stoull(f[1]);
            continue;
        }
        if (f.size() != 6) throw FormatError("manifest line " + std::to_string(lineno) + ": expected 6 fields");
        if (f[1] != "train" && f[1] != "val")
            throw FormatError("manifest line " + std::to_string(lineno) + ": split must be train or val");
        if (std::find(seen.begin(), seen.end(), f[0]) != seen.end())
            throw FormatError("manifest line " + std::to_string(lineno) + ": duplicate id " + f[0]);
        seen.push_back(f[0]);
        m.entries.push_back({f[0], f[1], f[2], f[3], f[4], f[5]});
    }
    return m;
}

inline DatasetManifest load_manifest(const fs::path& path) {
    return parse_manifest(detail::read_file(path), path.parent_path());
}

/// Writes images (16-bit PGM), masks (0/255 PGM), distance maps (LSTF) and
/// the manifest under `dir`.
inline DatasetManifest write_dataset(const fs::path& dir, const Dataset& d, std::uint64_t seed,
                                     std::uint64_t config_hash) {
    for (const char* sub : {"images", "masks", "phi", "init"}) fs::create_directories(dir / sub);
    DatasetManifest m;
    m.root = dir;
    m.seed = seed;
    m.config_hash = config_hash;
    auto put = [&](const Sample& s, const std::string& split) {
        ManifestEntry e{s.id, split, "images/" + s.id + ".pgm", "masks/" + s.id + ".pgm", "phi/" + s.id + ".lstf",
                        s.initial_phi ? "init/" + s.id + ".lstf" : "-"};
        save_pgm(dir / e.image, s.image, 65535);
        save_mask_pgm(dir / e.mask, s.gt_mask);
        save_tensor(dir / e.phi, grid_tensor(s.gt_phi));
        if (s.initial_phi) save_tensor(dir / e.init_phi, grid_tensor(*s.initial_phi));
        m.entries.push_back(e);
    };
    for (const auto& s : d.train) put(s, "train");
    for (const auto& s : d.val) put(s, "val");
    detail::write_file(dir / kManifestName, encode_manifest(m));
    return m;
}

inline Sample load_sample(const DatasetManifest& m, const ManifestEntry& e) {
    Sample s;
    s.id = e.id;
    s.image = load_grayscale_image(m.root / e.image);
    s.gt_mask = load_mask(m.root / e.mask);
    s.gt_phi = load_distance_map(m.root / e.phi);
    if (e.init_phi != "-") s.initial_phi = load_distance_map(m.root / e.init_phi);
    require_same_shape(s.image, s.gt_mask, e.id.c_str());
    require_same_shape(s.image, s.gt_phi, e.id.c_str());
    if (s.initial_phi) require_same_shape(s.image, *s.initial_phi, e.id.c_str());
    s.loss_mask = ScalarField(s.image.height(), s.image.width(), 1.0);
    return s;
}

/// Loads a dataset from a manifest file or a directory containing one.
inline Dataset load_dataset(const fs::path& where) {
    const fs::path path = fs::is_directory(where) ? where / kManifestName : where;
    const DatasetManifest m = load_manifest(path);
    Dataset d;
    for (const auto& e : m.entries) (e.split == "train" ? d.train : d.val).push_back(load_sample(m, e));
    return d;
}

}  // namespace nls
