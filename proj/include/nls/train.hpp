#pragma once

// Masked MSE, Adam, the rampup/plateau learning-rate schedule, sample
// augmentation, the training loop and the LSCK checkpoint container.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "nls/data.hpp"
#include "nls/errors.hpp"
#include "nls/field.hpp"
#include "nls/metrics.hpp"
#include "nls/models.hpp"

namespace nls {

struct TrainConfig {
    double base_lr = 1e-3;
    int rampup_steps = 50;
    double anneal_factor = 0.5;
    /// Evaluations without a relative improvement of plateau_threshold.
    int plateau_patience = 5;
    double plateau_threshold = 1e-3;
    int batch_size = 4;
    int max_steps = 1000;
    int eval_every = 50;
    /// 0 evaluates on the whole validation split.
    int val_limit = 0;
    double loss_band_width = kDefaultBandWidth;
    bool use_narrow_band = true;
    bool augment = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(base_lr > 0.0)) throw InvalidInput("train: base_lr must be positive");
        if (!(anneal_factor > 0.0 && anneal_factor < 1.0)) throw InvalidInput("train: anneal_factor must be in (0, 1)");
        if (batch_size < 1) throw InvalidInput("train: batch_size must be >= 1");
        if (max_steps < 0) throw InvalidInput("train: max_steps must be >= 0");
        if (rampup_steps < 0) throw InvalidInput("train: rampup_steps must be >= 0");
        if (plateau_patience < 1) throw InvalidInput("train: plateau_patience must be >= 1");
        if (eval_every < 1) throw InvalidInput("train: eval_every must be >= 1");
        if (val_limit < 0) throw InvalidInput("train: val_limit must be >= 0");
        if (!(loss_band_width > 0.0)) throw InvalidInput("train: loss_band_width must be positive");
    }
};

// ------------------------------------------------------------------- loss

struct LossValue {
    double loss = 0.0;
    DistanceMap grad;
};

/// sum(mask * (p - t)^2) / norm with gradient; norm defaults to sum(mask).
/// With use_narrow_band both p and t go through narrow_band first.
inline LossValue mse_loss(const DistanceMap& pred, const DistanceMap& target, const ScalarField& mask,
                          double band_width, bool use_narrow_band, double norm = 0.0) {
    require_same_shape(pred, target, "mse_loss");
    require_same_shape(pred, mask, "mse_loss");
    double msum = 0.0;
    for (double m : mask.values()) msum += m;
    if (!(msum > 0.0)) throw InvalidBatch("mse_loss: loss mask has no counted pixels");
    if (norm <= 0.0) norm = msum;
    LossValue out{0.0, DistanceMap(pred.height(), pred.width())};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask[i] == 0.0) continue;
        double p = pred[i], t = target[i], dp = 1.0;
        if (use_narrow_band) {
            p = std::tanh(pred[i] / band_width);
            t = std::tanh(target[i] / band_width);
            dp = (1.0 - p * p) / band_width;
        }
        const double d = p - t;
        out.loss += mask[i] * d * d;
        out.grad[i] = 2.0 * mask[i] * d * dp / norm;
    }
    out.loss /= norm;
    return out;
}

// ------------------------------------------------------------------- adam

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<double> m;
    std::vector<double> v;
};

/// Bias-corrected Adam. `names` (optional, aligned with params) labels the
/// offending parameter when a gradient is not finite.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s, double lr,
                      const std::vector<const std::string*>* names = nullptr) {
    if (params.size() != grads.size()) throw InvalidInput("adam_step: parameter and gradient sizes differ");
    if (s.m.empty()) {
        s.m.assign(params.size(), 0.0);
        s.v.assign(params.size(), 0.0);
    }
    if (s.m.size() != params.size()) throw InvalidInput("adam_step: optimizer state does not match parameters");
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (!std::isfinite(grads[i])) {
            const std::string who = names && i < names->size() ? *(*names)[i] : "#" + std::to_string(i);
            throw NumericalBlowup("adam_step: non-finite gradient for parameter " + who + " (element " +
                                  std::to_string(i) + ")");
        }
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
        params[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + s.eps);
    }
}

// --------------------------------------------------------------- schedule

/// Plateau events in a validation-loss sequence: `patience` evaluations in
/// a row without beating the best loss by a relative `threshold`.
inline int count_plateaus(const std::vector<double>& val_losses, int patience, double threshold) {
    int events = 0, since = 0;
    double best = std::numeric_limits<double>::infinity();
    for (double v : val_losses) {
        if (v < best * (1.0 - threshold) || !std::isfinite(best)) {
            best = v;
            since = 0;
        } else if (++since >= patience) {
            ++events;
            since = 0;
        }
    }
    return events;
}

inline double lr_schedule(long step, int plateaus, const TrainConfig& cfg) {
    const double ramp =
        cfg.rampup_steps > 0 ? std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.rampup_steps)) : 1.0;
    return cfg.base_lr * ramp * std::pow(cfg.anneal_factor, plateaus);
}

inline double lr_schedule(long step, const std::vector<double>& val_losses, const TrainConfig& cfg) {
    return lr_schedule(step, count_plateaus(val_losses, cfg.plateau_patience, cfg.plateau_threshold), cfg);
}

// ----------------------------------------------------------- augmentation

struct AugmentParams {
    bool flip = false;
    double scale = 1.0;
    double brightness = 1.0;
};

inline AugmentParams draw_augment_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    AugmentParams p;
    p.flip = u(rng) < 0.5;
    p.scale = 0.8 + 0.4 * u(rng);
    p.brightness = 0.8 + 0.4 * u(rng);
    return p;
}

namespace detail {

template <class G>
G hflip(const G& g) {
    G out(g.height(), g.width());
    for (int r = 0; r < g.height(); ++r)
        for (int c = 0; c < g.width(); ++c) out(r, c) = g(r, g.width() - 1 - c);
    return out;
}

// Source coordinate of output pixel (r, c) for a zoom by s about the centre.
inline std::pair<double, double> zoom_source(int r, int c, int h, int w, double s) {
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    return {cx + (c - cx) / s, cy + (r - cy) / s};
}

inline bool inside(double x, double y, int h, int w) {
    return x >= -0.5 && x <= w - 0.5 && y >= -0.5 && y <= h - 0.5;
}

inline BinaryMask zoom_mask(const DistanceMap& phi, double s) {
    const int h = phi.height(), w = phi.width();
    BinaryMask m(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const auto [x, y] = zoom_source(r, c, h, w, s);
            m(r, c) = inside(x, y, h, w) && bilinear(phi, x, y) <= 0.0 ? 1 : 0;
        }
    return m;
}

}  // namespace detail

/// Flip, zoom about the centre (pixels sourced from outside the original
/// frame are padding: image 0, loss mask 0), then brightness. Distance maps
/// are recomputed from the transformed masks.
inline Sample apply_augmentation(const Sample& in, const AugmentParams& p) {
    if (!(p.scale > 0.0)) throw InvalidInput("augment: scale must be positive");
    Sample s = in;
    if (s.loss_mask.size() == 0) s.loss_mask = ScalarField(s.image.height(), s.image.width(), 1.0);
    if (p.flip) {
        s.image = detail::hflip(s.image);
        s.gt_mask = detail::hflip(s.gt_mask);
        s.gt_phi = detail::hflip(s.gt_phi);
        s.loss_mask = detail::hflip(s.loss_mask);
        if (s.initial_phi) s.initial_phi = detail::hflip(*s.initial_phi);
    }
    if (p.scale != 1.0) {
        const int h = s.image.height(), w = s.image.width();
        ImageGrid img(h, w);
        ScalarField lm(h, w);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                const auto [x, y] = detail::zoom_source(r, c, h, w, p.scale);
                if (!detail::inside(x, y, h, w)) continue;
                img(r, c) = bilinear(s.image, x, y);
                const int sr = std::clamp(static_cast<int>(std::lround(y)), 0, h - 1);
                const int sc = std::clamp(static_cast<int>(std::lround(x)), 0, w - 1);
                lm(r, c) = s.loss_mask(sr, sc);
            }
        s.image = img;
        s.loss_mask = lm;
        s.gt_mask = detail::zoom_mask(s.gt_phi, p.scale);
        if (detail::area(s.gt_mask) == 0) throw DegenerateSample("augment: scaling removed all foreground");
        s.gt_phi = signed_distance_transform(s.gt_mask);
        if (s.initial_phi) {
            const BinaryMask im = detail::zoom_mask(*s.initial_phi, p.scale);
            if (detail::area(im) == 0) throw DegenerateSample("augment: scaling removed the initial contour");
            s.initial_phi = signed_distance_transform(im);
        }
    }
    if (p.brightness != 1.0)
        for (auto& v : s.image.values()) v = std::clamp(v * p.brightness, 0.0, 1.0);
    return s;
}

inline Sample augment(const Sample& s, std::uint64_t seed) { return apply_augmentation(s, draw_augment_params(seed)); }

// ------------------------------------------------------------ checkpoints

inline constexpr char kCheckpointMagic[4] = {'L', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    TensorData tensor;
};

inline std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
    std::string b(kCheckpointMagic, 4);
    detail::put_u32(b, kCheckpointVersion);
    detail::put_u32(b, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.name.empty() || e.name.size() > 65535) throw InvalidInput("checkpoint: bad entry name");
        detail::put_u16(b, static_cast<std::uint16_t>(e.name.size()));
        b += e.name;
        // Same layout as an LSTF body from the dtype tag on.
        b += encode_tensor(e.tensor).substr(8);
    }
    return b;
}

inline std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes) {
    detail::Reader rd(bytes, "checkpoint");
    if (rd.bytes(4) != std::string(kCheckpointMagic, 4)) throw FormatError("checkpoint: bad magic", 0);
    if (rd.u32() != kCheckpointVersion) throw FormatError("checkpoint: unsupported version", 4);
    const std::uint32_t count = rd.u32();
    std::vector<CheckpointEntry> out;
    for (std::uint32_t k = 0; k < count; ++k) {
        CheckpointEntry e;
        const std::size_t at = rd.pos();
        const std::uint16_t len = rd.u16();
        if (len == 0) throw FormatError("checkpoint: empty entry name", at);
        e.name = rd.bytes(len);
        const std::size_t tpos = rd.pos();
        if (rd.u8() != kDtypeF64) throw FormatError("checkpoint: unsupported dtype in " + e.name, tpos);
        const std::size_t npos = rd.pos();
        const int ndim = rd.u8();
        if (ndim == 0) throw FormatError("checkpoint: zero dimensions in " + e.name, npos);
        for (int i = 0; i < ndim; ++i) {
            const std::size_t dpos = rd.pos();
            e.tensor.dims.push_back(rd.u32());
            if (e.tensor.dims.back() == 0) throw FormatError("checkpoint: zero-length dimension in " + e.name, dpos);
        }
        const std::size_t n = e.tensor.expected_size();
        rd.need(n * 8);
        e.tensor.values.resize(n);
        for (auto& v : e.tensor.values) v = rd.f64();
        out.push_back(std::move(e));
    }
    if (!rd.done()) throw FormatError("checkpoint: trailing bytes", rd.pos());
    return out;
}

inline std::vector<CheckpointEntry> model_entries(const AnyModel& m) {
    std::vector<CheckpointEntry> out;
    const ModelKind kind = kind_of(m);
    double embed = 0.0;
    if (const auto* c = std::get_if<ContourEvolutionModel>(&m)) embed = c->embed_channels();
    if (const auto* i = std::get_if<ImageEvolutionModel>(&m)) embed = i->embed_channels();
    out.push_back({"meta.model", TensorData{{2}, {static_cast<double>(static_cast<int>(kind)), embed}}});
    ode::SolverConfig sc;
    if (auto* s = solver_of(const_cast<AnyModel&>(m))) sc = *s;
    out.push_back({"meta.solver", TensorData{{3}, {sc.a_tol, sc.r_tol, static_cast<double>(sc.max_steps)}}});
    for (const auto* net : networks(m))
        for (const auto& p : net->params())
            out.push_back({p.name,
                           TensorData{{static_cast<std::uint32_t>(p.value.shape.c), static_cast<std::uint32_t>(p.value.shape.h),
                                       static_cast<std::uint32_t>(p.value.shape.w)},
                                      p.value.data}});
    return out;
}

inline AnyModel model_from_entries(const std::vector<CheckpointEntry>& entries) {
    auto find = [&](const std::string& name) -> const CheckpointEntry* {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    };
    const CheckpointEntry* meta = find("meta.model");
    if (!meta || meta->tensor.values.size() != 2) throw FormatError("checkpoint: missing meta.model entry");
    const int kind = static_cast<int>(meta->tensor.values[0]);
    if (kind < 0 || kind > 2) throw FormatError("checkpoint: unknown model kind");
    const int embed = static_cast<int>(meta->tensor.values[1]);
    AnyModel m = make_model(static_cast<ModelKind>(kind), 0, embed > 0 ? embed : kDefaultEmbedChannels);
    if (const CheckpointEntry* s = find("meta.solver"); s && s->tensor.values.size() == 3)
        if (auto* sc = solver_of(m)) {
            sc->a_tol = s->tensor.values[0];
            sc->r_tol = s->tensor.values[1];
            sc->max_steps = static_cast<int>(s->tensor.values[2]);
        }
    for (auto* net : networks(m))
        for (auto& p : net->params()) {
            const CheckpointEntry* e = find(p.name);
            if (!e) throw FormatError("checkpoint: missing parameter " + p.name);
            if (e->tensor.values.size() != p.value.size())
                throw FormatError("checkpoint: size mismatch for parameter " + p.name);
            p.value.data = e->tensor.values;
        }
    for (const auto& e : entries) {
        if (e.name.rfind("meta.", 0) == 0) continue;
        bool known = false;
        for (const auto* net : networks(m))
            for (const auto& p : net->params()) known = known || p.name == e.name;
        if (!known) throw FormatError("checkpoint: unexpected entry " + e.name);
    }
    return m;
}

inline void save_checkpoint(const fs::path& path, const AnyModel& m) {
    detail::write_file(path, encode_checkpoint(model_entries(m)));
}

inline AnyModel load_checkpoint(const fs::path& path) {
    return model_from_entries(decode_checkpoint(detail::read_file(path)));
}

// ------------------------------------------------------------- training

struct EvalRecord {
    long step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_iou = 0.0;
};

inline void write_history(std::ostream& os, const std::vector<EvalRecord>& h) {
    for (const auto& r : h) {
        std::ostringstream line;
        line << r.step << '\t' << std::setprecision(10) << r.lr << '\t' << r.train_loss << '\t' << r.val_loss << '\t'
             << r.val_iou << '\n';
        os << line.str();
    }
}

struct TrainResult {
    std::vector<EvalRecord> history;
    double best_val_loss = std::numeric_limits<double>::infinity();
    long best_step = -1;
};

/// Raised by train_loop around solver and loss failures.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, long step, int batch_item) : Error(what), step_(step), item_(batch_item) {}
    long step() const noexcept { return step_; }
    int batch_item() const noexcept { return item_; }

private:
    long step_;
    int item_;
};

struct EvalSummary {
    double loss = 0.0;
    double iou = 0.0;
};

inline EvalSummary evaluate_split(AnyModel& m, const std::vector<Sample>& split, const TrainConfig& cfg,
                                  int limit = 0) {
    const std::size_t n = limit > 0 ? std::min<std::size_t>(split.size(), static_cast<std::size_t>(limit)) : split.size();
    if (n == 0) throw InvalidInput("evaluate: empty split");
    std::vector<BinaryMask> preds, gts;
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Sample& s = split[i];
        const DistanceMap* init = s.initial_phi ? &*s.initial_phi : nullptr;
        const EvolveResult r = predict(m, s.image, init);
        const ScalarField mask = s.loss_mask.size() ? s.loss_mask : ScalarField(s.image.height(), s.image.width(), 1.0);
        loss += mse_loss(r.phi, s.gt_phi, mask, cfg.loss_band_width, cfg.use_narrow_band).loss;
        preds.push_back(mask_from_phi(r.phi));
        gts.push_back(s.gt_mask);
    }
    return {loss / static_cast<double>(n), dataset_iou(preds, gts)};
}

using TrainObserver = std::function<void(const EvalRecord&)>;

/// Adam on mini-batches drawn from a seeded shuffle of the training split.
/// Each batch's loss is the masked MSE pooled over its pixels. The model
/// ends holding the parameters of the best validation evaluation.
inline TrainResult train_loop(AnyModel& m, const Dataset& data, const TrainConfig& cfg,
                              const TrainObserver& observer = {}) {
    cfg.validate();
    TrainResult res;
    if (cfg.max_steps == 0) return res;
    if (data.train.empty()) throw InvalidInput("train: empty training split");
    const bool have_val = !data.val.empty();

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;

    AdamState adam;
    const auto names = flat_names(m);
    std::vector<double> theta = flat_values(m);
    std::vector<double> best = theta;
    std::vector<double> val_losses;
    double train_acc = 0.0;
    int train_n = 0;

    for (long step = 1; step <= cfg.max_steps; ++step) {
        std::vector<Sample> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const Sample& src = data.train[order[cursor++]];
            const std::uint64_t aug_seed = rng();
            if (!cfg.augment) {
                batch.push_back(src);
                continue;
            }
            try {
                batch.push_back(augment(src, aug_seed));
            } catch (const DegenerateSample&) {
                batch.push_back(src);
            }
        }
        double norm = 0.0;
        for (auto& s : batch) {
            if (s.loss_mask.size() == 0) s.loss_mask = ScalarField(s.image.height(), s.image.width(), 1.0);
            for (double v : s.loss_mask.values()) norm += v;
        }
        if (!(norm > 0.0)) throw InvalidBatch("train: batch at step " + std::to_string(step) + " has no counted pixels");

        std::vector<double> grad(theta.size(), 0.0);
        double batch_loss = 0.0;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Sample& s = batch[b];
            PixelLoss lf = [&](const DistanceMap& p) {
                LossValue lv = mse_loss(p, s.gt_phi, s.loss_mask, cfg.loss_band_width, cfg.use_narrow_band, norm);
                return std::pair{lv.loss, std::move(lv.grad)};
            };
            try {
                const GradientResult g = gradient(m, s.image, s.initial_phi ? &*s.initial_phi : nullptr, lf);
                batch_loss += g.loss;
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g.grad[i];
            } catch (const Error& e) {
                throw TrainingError("train: step " + std::to_string(step) + ", batch item " + std::to_string(b) +
                                        " (sample " + s.id + "): " + e.what(),
                                    step, static_cast<int>(b));
            }
        }
        const double lr = lr_schedule(step, val_losses, cfg);
        try {
            adam_step(theta, grad, adam, lr, &names);
        } catch (const Error& e) {
            throw TrainingError("train: step " + std::to_string(step) + ": " + e.what(), step, -1);
        }
        set_flat_values(m, theta);
        train_acc += batch_loss;
        ++train_n;

        if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            EvalRecord rec;
            rec.step = step;
            rec.lr = lr;
            rec.train_loss = train_acc / train_n;
            train_acc = 0.0;
            train_n = 0;
            if (have_val) {
                const EvalSummary ev = evaluate_split(m, data.val, cfg, cfg.val_limit);
                rec.val_loss = ev.loss;
                rec.val_iou = ev.iou;
            } else {
                rec.val_loss = rec.train_loss;
            }
            val_losses.push_back(rec.val_loss);
            if (rec.val_loss < res.best_val_loss) {
                res.best_val_loss = rec.val_loss;
                res.best_step = step;
                best = theta;
            }
            res.history.push_back(rec);
            if (observer) observer(rec);
        }
    }
    set_flat_values(m, best);
    return res;
}

}  // namespace nls
