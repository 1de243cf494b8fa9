#pragma once

// Declarative conv-net descriptions and their instantiation: plain stacks
// and encoder-decoders with concatenated skip connections.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <random>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nls/autodiff.hpp"
#include "nls/errors.hpp"

namespace nls::ad {

enum class LayerKind { conv, down, up, concat };
enum class Norm { none, group, layer };

struct LayerSpec {
    LayerKind kind = LayerKind::conv;
    int out_channels = 0;
    int kernel = 3;
    Norm norm = Norm::none;
    int groups = 1;
    Activation act = Activation::none;
    /// concat only: index of an earlier layer, or -1 for the network input.
    int skip_from = -1;

    static LayerSpec conv(int out, int kernel, Norm norm, int groups, Activation act) {
        return LayerSpec{LayerKind::conv, out, kernel, norm, groups, act, -1};
    }
    static LayerSpec down() { return LayerSpec{LayerKind::down}; }
    static LayerSpec up() { return LayerSpec{LayerKind::up}; }
    static LayerSpec concat_with(int earlier) {
        LayerSpec s{LayerKind::concat};
        s.skip_from = earlier;
        return s;
    }
};

struct NetworkSpec {
    std::string name;
    int in_channels = 1;
    std::vector<LayerSpec> layers;
};

struct LayerInfo {
    int in_channels = 0;
    int out_channels = 0;
    int level = 0;  // number of pending 2x downsamplings
};

/// Propagates channel counts and resolution levels; throws InvalidSpec on
/// any incompatibility.
inline std::vector<LayerInfo> validate_spec(const NetworkSpec& spec) {
    if (spec.in_channels < 1) throw InvalidSpec(spec.name + ": in_channels must be >= 1");
    if (spec.layers.empty()) throw InvalidSpec(spec.name + ": no layers");
    std::vector<LayerInfo> info;
    int ch = spec.in_channels;
    int level = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const std::string where = spec.name + " layer " + std::to_string(i);
        LayerInfo li{ch, ch, level};
        switch (l.kind) {
            case LayerKind::conv:
                if (l.out_channels < 1) throw InvalidSpec(where + ": out_channels must be >= 1");
                if (l.kernel < 1 || l.kernel % 2 == 0) throw InvalidSpec(where + ": kernel must be odd");
                if (l.norm == Norm::group && (l.groups < 1 || l.out_channels % l.groups != 0))
                    throw InvalidSpec(where + ": " + std::to_string(l.out_channels) +
                                      " channels not divisible by " + std::to_string(l.groups) + " groups");
                li.out_channels = l.out_channels;
                break;
            case LayerKind::down: ++level; break;
            case LayerKind::up:
                if (level == 0) throw InvalidSpec(where + ": upsampling above input resolution");
                --level;
                break;
            case LayerKind::concat: {
                if (l.skip_from < -1 || l.skip_from >= static_cast<int>(i))
                    throw InvalidSpec(where + ": skip must reference an earlier layer");
                const int other_level = l.skip_from < 0 ? 0 : info[static_cast<std::size_t>(l.skip_from)].level;
                const int other_ch =
                    l.skip_from < 0 ? spec.in_channels : info[static_cast<std::size_t>(l.skip_from)].out_channels;
                if (other_level != level) throw InvalidSpec(where + ": skip link joins different resolutions");
                li.out_channels = ch + other_ch;
                break;
            }
        }
        li.level = level;
        info.push_back(li);
        ch = li.out_channels;
    }
    if (level != 0) throw InvalidSpec(spec.name + ": output resolution differs from input");
    return info;
}

/// An instantiated network: parameters plus the layer program.
class Network {
public:
    Network() = default;

    const NetworkSpec& spec() const noexcept { return spec_; }
    int in_channels() const noexcept { return spec_.in_channels; }
    int out_channels() const noexcept { return info_.back().out_channels; }

    std::vector<Parameter>& params() noexcept { return params_; }
    const std::vector<Parameter>& params() const noexcept { return params_; }

    std::size_t num_params() const noexcept {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::vector<double> flat_values() const {
        std::vector<double> out;
        out.reserve(num_params());
        for (const auto& p : params_) out.insert(out.end(), p.value.data.begin(), p.value.data.end());
        return out;
    }
    std::vector<double> flat_grads() const {
        std::vector<double> out;
        out.reserve(num_params());
        for (const auto& p : params_) out.insert(out.end(), p.grad.data.begin(), p.grad.data.end());
        return out;
    }
    void copy_grads_to(std::span<double> out) const {
        std::size_t o = 0;
        for (const auto& p : params_) {
            std::copy(p.grad.data.begin(), p.grad.data.end(), out.begin() + static_cast<std::ptrdiff_t>(o));
            o += p.grad.size();
        }
    }
    void set_flat_values(std::span<const double> v) {
        if (v.size() != num_params()) throw InvalidInput(spec_.name + ": flat parameter size mismatch");
        std::size_t o = 0;
        for (auto& p : params_) {
            std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o), p.value.size(), p.value.data.begin());
            o += p.value.size();
        }
    }

    Parameter* find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    /// Runs the layer program on `x` (shape in_channels x H x W).
    Var forward(Tape& tape, Var x) {
        const Shape s = tape.value(x).shape;
        if (s.c != spec_.in_channels)
            throw InvalidSpec(spec_.name + ": expected " + std::to_string(spec_.in_channels) + " input channels, got " +
                              std::to_string(s.c));
        std::vector<Var> outs;
        outs.reserve(spec_.layers.size());
        Var cur = x;
        for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
            const auto& l = spec_.layers[i];
            const auto& slot = slots_[i];
            switch (l.kind) {
                case LayerKind::conv:
                    cur = conv2d(tape, cur, params_[static_cast<std::size_t>(slot.weight)],
                                 params_[static_cast<std::size_t>(slot.bias)]);
                    if (l.norm != Norm::none)
                        cur = group_norm(tape, cur, l.norm == Norm::group ? l.groups : 1,
                                         params_[static_cast<std::size_t>(slot.gain)],
                                         params_[static_cast<std::size_t>(slot.shift)]);
                    cur = activation(tape, cur, l.act);
                    break;
                case LayerKind::down: cur = avg_pool2(tape, cur); break;
                case LayerKind::up: cur = upsample2(tape, cur); break;
                case LayerKind::concat: {
                    const Var other = l.skip_from < 0 ? x : outs[static_cast<std::size_t>(l.skip_from)];
                    cur = concat(tape, {cur, other});
                    break;
                }
            }
            outs.push_back(cur);
        }
        return cur;
    }

    /// Convenience forward without gradient bookkeeping by the caller.
    Tensor apply(const Tensor& x) {
        Tape tape;
        return tape.value(forward(tape, tape.constant(x)));
    }

    /// Index of the last conv layer.
    int last_conv_layer() const {
        for (int i = static_cast<int>(spec_.layers.size()) - 1; i >= 0; --i)
            if (spec_.layers[static_cast<std::size_t>(i)].kind == LayerKind::conv) return i;
        return -1;
    }

    std::uint64_t checksum(bool skip_last_conv = false) const {
        // FNV-1a over the parameter bytes.
        std::uint64_t h = 1469598103934665603ULL;
        const int last = last_conv_layer();
        for (std::size_t li = 0; li < slots_.size(); ++li) {
            if (skip_last_conv && static_cast<int>(li) == last) continue;
            for (int idx : {slots_[li].weight, slots_[li].bias, slots_[li].gain, slots_[li].shift}) {
                if (idx < 0) continue;
                for (double v : params_[static_cast<std::size_t>(idx)].value.data) {
                    std::uint64_t bits;
                    std::memcpy(&bits, &v, sizeof bits);
                    for (int b = 0; b < 8; ++b) {
                        h ^= (bits >> (8 * b)) & 0xffU;
                        h *= 1099511628211ULL;
                    }
                }
            }
        }
        return h;
    }

    struct Slot {
        int weight = -1, bias = -1, gain = -1, shift = -1;
    };
    const std::vector<Slot>& slots() const noexcept { return slots_; }

private:
    friend Network build_network(const NetworkSpec& spec, std::uint64_t seed);

    NetworkSpec spec_;
    std::vector<LayerInfo> info_;
    std::vector<Slot> slots_;
    std::vector<Parameter> params_;
};

/// Conv weights and biases ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)); norm
/// gains 1 and shifts 0. Deterministic in `seed`.
inline Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
    Network net;
    net.spec_ = spec;
    net.info_ = validate_spec(spec);
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        Network::Slot slot;
        if (l.kind == LayerKind::conv) {
            const int cin = net.info_[i].in_channels;
            const int k = l.kernel;
            const double bound = std::sqrt(1.0 / (static_cast<double>(cin) * k * k));
            std::uniform_real_distribution<double> u(-bound, bound);
            const std::string base = spec.name + "." + std::to_string(i);
            Tensor w(Shape{l.out_channels, cin * k, k});
            for (auto& v : w.data) v = u(rng);
            Tensor b(Shape{l.out_channels, 1, 1});
            for (auto& v : b.data) v = u(rng);
            slot.weight = static_cast<int>(net.params_.size());
            net.params_.emplace_back(base + ".weight", std::move(w));
            slot.bias = static_cast<int>(net.params_.size());
            net.params_.emplace_back(base + ".bias", std::move(b));
            if (l.norm != Norm::none) {
                slot.gain = static_cast<int>(net.params_.size());
                net.params_.emplace_back(base + ".norm_gain", Tensor(Shape{l.out_channels, 1, 1}, 1.0));
                slot.shift = static_cast<int>(net.params_.size());
                net.params_.emplace_back(base + ".norm_bias", Tensor(Shape{l.out_channels, 1, 1}, 0.0));
            }
        }
        net.slots_.push_back(slot);
    }
    return net;
}

/// Sets the final conv layer's weight and bias to exactly zero.
inline void zero_init_last_layer(Network& net) {
    const int last = net.last_conv_layer();
    if (last < 0) throw InvalidSpec(net.spec().name + ": no parametered layer");
    const auto& slot = net.slots()[static_cast<std::size_t>(last)];
    for (int idx : {slot.weight, slot.bias}) {
        auto& p = net.params()[static_cast<std::size_t>(idx)];
        std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
    }
}

/// k^2 * c_in * c_out + c_out (+ 2 * c_out with a norm layer), summed.
inline std::size_t expected_param_count(const NetworkSpec& spec) {
    const auto info = validate_spec(spec);
    std::size_t n = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        if (l.kind != LayerKind::conv) continue;
        const std::size_t k2 = static_cast<std::size_t>(l.kernel) * l.kernel;
        n += k2 * info[i].in_channels * l.out_channels + l.out_channels;
        if (l.norm != Norm::none) n += 2 * static_cast<std::size_t>(l.out_channels);
    }
    return n;
}

// Default desk-scale architectures.

/// Image -> embedding: two 3x3 conv layers (1 -> 8 -> embed).
inline NetworkSpec prenet_spec(int image_channels, int embed_channels) {
    return NetworkSpec{"prenet",
                       image_channels,
                       {LayerSpec::conv(8, 3, Norm::group, 4, Activation::relu),
                        LayerSpec::conv(embed_channels, 3, Norm::group, embed_channels % 4 == 0 ? 4 : 1,
                                        Activation::tanh)}};
}

/// Two-level encoder-decoder with one skip connection; the output layer is
/// a plain conv so it can be zero-initialised.
inline NetworkSpec encoder_decoder_spec(const std::string& name, int in_channels, int out_channels, int base = 8) {
    return NetworkSpec{name,
                       in_channels,
                       {LayerSpec::conv(base, 3, Norm::group, 4, Activation::relu),
                        LayerSpec::down(),
                        LayerSpec::conv(2 * base, 3, Norm::group, 4, Activation::relu),
                        LayerSpec::up(),
                        LayerSpec::concat_with(0),
                        LayerSpec::conv(base, 3, Norm::group, 4, Activation::relu),
                        LayerSpec::conv(out_channels, 3, Norm::none, 1, Activation::none)}};
}

/// Embedding (or augmented state) -> single-channel distance map.
inline NetworkSpec postnet_spec(int in_channels) {
    return NetworkSpec{"postnet",
                       in_channels,
                       {LayerSpec::conv(8, 3, Norm::group, 4, Activation::relu),
                        LayerSpec::conv(1, 3, Norm::none, 1, Activation::none)}};
}

/// Loss as a function of the network output: returns (loss, dloss/doutput).
using LossFn = std::function<std::pair<double, Tensor>(const Tensor&)>;

/// Central finite differences over a random subsample of at least
/// `min_samples` parameters (all of them when fewer exist). Returns the
/// max of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double grad_check(Network& net, const Tensor& input, const LossFn& loss_fn, std::uint64_t seed = 1,
                         std::size_t min_samples = 100, double eps = 1e-6) {
    net.zero_grad();
    {
        Tape tape;
        const Var out = net.forward(tape, tape.constant(input));
        const auto [loss, dout] = loss_fn(tape.value(out));
        (void)loss;
        tape.backward(out, dout);
    }
    const std::vector<double> analytic = net.flat_grads();
    std::vector<double> values = net.flat_values();
    const std::size_t n = values.size();

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (n > min_samples) {
        std::mt19937_64 rng(seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(min_samples);
    }

    auto loss_at = [&](const std::vector<double>& v) {
        net.set_flat_values(v);
        return loss_fn(net.apply(input)).first;
    };
    double worst = 0.0;
    for (std::size_t i : idx) {
        const double orig = values[i];
        values[i] = orig + eps;
        const double lp = loss_at(values);
        values[i] = orig - eps;
        const double lm = loss_at(values);
        values[i] = orig;
        const double numeric = (lp - lm) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    net.set_flat_values(values);
    return worst;
}

}  // namespace nls::ad
