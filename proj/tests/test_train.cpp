#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <random>
#include <sstream>

#include "nls/train.hpp"
#include "oracles.hpp"

using namespace nls;

namespace {

Sample disk_sample(int n, double r, double cx = -1, double cy = -1) {
    if (cx < 0) cx = (n - 1) / 2.0;
    if (cy < 0) cy = (n - 1) / 2.0;
    Sample s;
    s.id = "disk";
    s.image = ImageGrid(n, n, 0.2);
    s.gt_mask = BinaryMask(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            if (std::hypot(x - cx, y - cy) <= r) {
                s.gt_mask(y, x) = 1;
                s.image(y, x) = 0.7;
            }
    s.gt_phi = signed_distance_transform(s.gt_mask);
    s.initial_phi = s.gt_phi;
    s.loss_mask = ScalarField(n, n, 1.0);
    return s;
}

double mean_radius(const DistanceMap& phi, double cx, double cy) {
    const Contour c = extract_zero_level_set(phi);
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& seg : c.segments)
        for (const auto& p : seg) {
            s += std::hypot(p.x - cx, p.y - cy);
            ++n;
        }
    return s / static_cast<double>(n);
}

DistanceMap field(int h, int w, std::initializer_list<double> v) {
    return DistanceMap(h, w, std::vector<double>(v));
}

Dataset tiny_dataset(int train, int val, int size, std::uint64_t seed) {
    GeneratorConfig cfg;
    cfg.train_count = train;
    cfg.val_count = val;
    cfg.size = size;
    return generate_synthetic(cfg, seed);
}

}  // namespace

TEST(MseLoss, HandExamples) {
    const DistanceMap t(2, 2, 0.0);
    const ScalarField full(2, 2, 1.0);
    EXPECT_EQ(mse_loss(t, t, full, 5.0, true).loss, 0.0);
    DistanceMap p = t;
    for (auto& v : p.values()) v += 0.5;
    EXPECT_DOUBLE_EQ(mse_loss(p, t, full, 5.0, false).loss, 0.25);
    const ScalarField m(2, 2, std::vector<double>{1, 1, 1, 0});
    EXPECT_DOUBLE_EQ(mse_loss(field(2, 2, {0, 1, 2, 3}), t, m, 5.0, false).loss, 5.0 / 3.0);
    EXPECT_THROW(mse_loss(t, t, ScalarField(2, 2, 0.0), 5.0, false), InvalidBatch);
    EXPECT_THROW(mse_loss(t, DistanceMap(2, 3), full, 5.0, false), InvalidInput);
}

TEST(MseLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0.0, 4.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    DistanceMap p(6, 6), t(6, 6);
    ScalarField m(6, 6);
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = nd(rng);
        t[i] = nd(rng);
        m[i] = u(rng) < 0.7 ? 1.0 : 0.0;
    }
    for (bool band : {false, true}) {
        const LossValue lv = mse_loss(p, t, m, 5.0, band);
        double worst = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            DistanceMap a = p, b = p;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            const double fd = (mse_loss(a, t, m, 5.0, band).loss - mse_loss(b, t, m, 5.0, band).loss) / 2e-6;
            worst = std::max(worst, oracle::relative_error(lv.grad[i], fd));
        }
        EXPECT_LE(worst, 1e-5) << "band " << band;
    }
}

TEST(MseLoss, MaskedPixelsDoNotMatter) {
    const ScalarField m(2, 2, std::vector<double>{1, 0, 1, 0});
    const DistanceMap t(2, 2, 1.0);
    const DistanceMap a = field(2, 2, {0, 5, 2, -7}), b = field(2, 2, {0, -1e6, 2, 42});
    EXPECT_EQ(mse_loss(a, t, m, 5.0, true).loss, mse_loss(b, t, m, 5.0, true).loss);
    EXPECT_EQ(mse_loss(a, t, m, 5.0, false).loss, mse_loss(b, t, m, 5.0, false).loss);
}

TEST(MseLoss, NarrowBandAttenuatesFarGradients) {
    const ScalarField m(1, 1, 1.0);
    const DistanceMap t(1, 1, 0.0);
    double prev = std::numeric_limits<double>::infinity();
    for (double d : {5.0, 7.5, 10.0, 15.0, 20.0, 30.0}) {
        const double g = std::abs(mse_loss(DistanceMap(1, 1, d), t, m, 5.0, true).grad[0]);
        EXPECT_LT(g, prev) << d;
        prev = g;
    }
}

TEST(Adam, ZeroGradientsLeaveParameters) {
    std::vector<double> p{1.0, -2.0, 3.0};
    const std::vector<double> g(3, 0.0);
    AdamState s;
    for (int i = 0; i < 5; ++i) adam_step(p, g, s, 0.1);
    EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Adam, FirstStepMagnitude) {
    std::vector<double> p{0.0};
    const std::vector<double> g{1.0};
    AdamState s;
    adam_step(p, g, s, 0.1);
    EXPECT_NEAR(p[0], -0.1, 1e-8);
    EXPECT_EQ(s.step, 1);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
    std::vector<double> p{0.0, 0.0};
    const std::vector<double> g{1.0, std::nan("")};
    const std::string a = "net.0.weight", b = "net.0.bias";
    const std::vector<const std::string*> names{&a, &b};
    AdamState s;
    try {
        adam_step(p, g, s, 0.1, &names);
        FAIL() << "NaN gradient accepted";
    } catch (const NumericalBlowup& e) {
        EXPECT_NE(std::string(e.what()).find("net.0.bias"), std::string::npos);
    }
    EXPECT_EQ(p, (std::vector<double>{0.0, 0.0}));
}

TEST(Adam, Deterministic) {
    auto run = [] {
        std::mt19937_64 rng(5);
        std::normal_distribution<double> nd;
        std::vector<double> p(10, 0.5);
        AdamState s;
        for (int i = 0; i < 20; ++i) {
            std::vector<double> g(10);
            for (auto& v : g) v = nd(rng);
            adam_step(p, g, s, 1e-2);
        }
        return p;
    };
    EXPECT_EQ(run(), run());
}

TEST(Schedule, RampupAndAnnealing) {
    TrainConfig cfg;
    cfg.base_lr = 1e-3;
    cfg.rampup_steps = 100;
    cfg.anneal_factor = 0.5;
    EXPECT_EQ(lr_schedule(0, 0, cfg), 0.0);
    EXPECT_EQ(lr_schedule(100, 0, cfg), 1e-3);
    EXPECT_DOUBLE_EQ(lr_schedule(500, 1, cfg), 5e-4);
    double prev = -1.0;
    for (long s = 0; s <= 100; ++s) {
        const double lr = lr_schedule(s, 0, cfg);
        EXPECT_GE(lr, prev);
        prev = lr;
    }
}

TEST(Schedule, PlateauDetection) {
    EXPECT_EQ(count_plateaus({1.0, 0.9, 0.8, 0.7}, 5, 1e-3), 0);
    // Five evaluations without a 0.1% gain.
    EXPECT_EQ(count_plateaus({1.0, 0.9995, 0.9999, 1.0, 1.1, 0.9992}, 5, 1e-3), 1);
    EXPECT_EQ(count_plateaus({1.0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1}, 5, 1e-3), 2);
    EXPECT_EQ(count_plateaus({1.0, 1, 1, 1, 0.5, 1, 1}, 5, 1e-3), 0);
    TrainConfig cfg;
    cfg.rampup_steps = 10;
    EXPECT_DOUBLE_EQ(lr_schedule(20, std::vector<double>{1, 1, 1, 1, 1, 1}, cfg), cfg.base_lr * 0.5);
}

TEST(Augment, IdentityParameters) {
    const Sample s = disk_sample(32, 6, 12, 15);
    const Sample o = apply_augmentation(s, AugmentParams{});
    for (std::size_t i = 0; i < s.image.size(); ++i) {
        ASSERT_EQ(o.image[i], s.image[i]);
        ASSERT_EQ(o.gt_phi[i], s.gt_phi[i]);
        ASSERT_EQ(o.loss_mask[i], 1.0);
    }
}

TEST(Augment, DoubleFlipIsIdentity) {
    Sample s = disk_sample(32, 6, 10, 14);
    s.image(3, 4) = 0.9;
    AugmentParams p;
    p.flip = true;
    const Sample once = apply_augmentation(s, p), twice = apply_augmentation(once, p);
    EXPECT_EQ(once.image(3, 27), 0.9);
    for (std::size_t i = 0; i < s.image.size(); ++i) {
        ASSERT_EQ(twice.image[i], s.image[i]);
        ASSERT_EQ(twice.gt_mask[i], s.gt_mask[i]);
        ASSERT_EQ(twice.gt_phi[i], s.gt_phi[i]);
        ASSERT_EQ((*twice.initial_phi)[i], (*s.initial_phi)[i]);
    }
}

TEST(Augment, ScaleRecomputesDistances) {
    const Sample s = disk_sample(64, 10);
    AugmentParams p;
    p.scale = 1.2;
    const Sample o = apply_augmentation(s, p);
    EXPECT_NEAR(mean_radius(o.gt_phi, 31.5, 31.5), 12.0, 0.5);
    const DistanceMap sdt = signed_distance_transform(o.gt_mask);
    for (std::size_t i = 0; i < sdt.size(); ++i) ASSERT_EQ(sdt[i], o.gt_phi[i]);
    for (double v : o.loss_mask.values()) ASSERT_EQ(v, 1.0);

    p.scale = 0.8;
    const Sample shrunk = apply_augmentation(s, p);
    EXPECT_NEAR(mean_radius(shrunk.gt_phi, 31.5, 31.5), 8.0, 0.5);
    EXPECT_EQ(shrunk.loss_mask(0, 0), 0.0);
    EXPECT_EQ(shrunk.loss_mask(32, 32), 1.0);
    double counted = 0.0;
    for (double v : shrunk.loss_mask.values()) counted += v;
    EXPECT_NEAR(counted, 64.0 * 64.0 * 0.64, 64.0 * 4);
}

TEST(Augment, BrightnessClampsAndSeedsRepeat) {
    Sample s = disk_sample(16, 4);
    s.image(0, 0) = 0.95;
    AugmentParams p;
    p.brightness = 1.2;
    const Sample o = apply_augmentation(s, p);
    EXPECT_EQ(o.image(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(o.image(0, 1), 0.24);
    const Sample a = augment(s, 77), b = augment(s, 77);
    for (std::size_t i = 0; i < a.image.size(); ++i) ASSERT_EQ(a.image[i], b.image[i]);
    const AugmentParams d = draw_augment_params(3);
    EXPECT_GE(d.scale, 0.8);
    EXPECT_LE(d.scale, 1.2);
    EXPECT_GE(d.brightness, 0.8);
    EXPECT_LE(d.brightness, 1.2);
}

TEST(Augment, EmptyForegroundSignalsResample) {
    Sample s = disk_sample(32, 1.2, 1, 1);
    AugmentParams p;
    p.scale = 1.2;
    EXPECT_THROW(apply_augmentation(s, p), DegenerateSample);
}

TEST(Checkpoint, RoundTripAllKinds) {
    const fs::path dir = fs::temp_directory_path() / ("nls_ckpt_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    for (ModelKind k : {ModelKind::regression, ModelKind::contour_evolution, ModelKind::image_evolution}) {
        AnyModel m = make_model(k, 31, 4);
        if (auto* sc = solver_of(m)) sc->a_tol = 1e-4;
        std::vector<double> v = flat_values(m);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += 0.001 * static_cast<double>(i % 7);
        set_flat_values(m, v);
        const fs::path p = dir / (to_string(k) + ".lsck");
        save_checkpoint(p, m);
        AnyModel back = load_checkpoint(p);
        EXPECT_EQ(kind_of(back), k);
        EXPECT_EQ(flat_values(back), v);
        if (auto* sc = solver_of(back)) {
            EXPECT_EQ(sc->a_tol, 1e-4);
        }
        const std::string bytes = detail::read_file(p);
        EXPECT_EQ(bytes.substr(0, 4), "LSCK");
    }
    fs::remove_all(dir);
}

TEST(Checkpoint, CorruptInputsRejected) {
    const AnyModel m = make_model(ModelKind::regression, 1);
    const std::string good = encode_checkpoint(model_entries(m));
    EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 1)), FormatError);
    std::string bad = good;
    bad[1] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
    auto entries = model_entries(m);
    entries.pop_back();
    EXPECT_THROW(model_from_entries(entries), FormatError);
    entries = model_entries(m);
    entries.push_back({"stray.weight", TensorData{{1}, {0.0}}});
    EXPECT_THROW(model_from_entries(entries), FormatError);
    entries = model_entries(m);
    entries.erase(entries.begin());
    EXPECT_THROW(model_from_entries(entries), FormatError);
}

TEST(TrainLoop, ZeroStepsIsNoOp) {
    const Dataset d = tiny_dataset(2, 1, 16, 1);
    AnyModel m = make_model(ModelKind::regression, 3);
    const auto before = flat_values(m);
    TrainConfig cfg;
    cfg.max_steps = 0;
    const TrainResult r = train_loop(m, d, cfg);
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(flat_values(m), before);
}

TEST(TrainLoop, RegressionOverfitsFixedBatch) {
    Dataset d = tiny_dataset(10, 0, 16, 4);
    AnyModel m = make_model(ModelKind::regression, 5);
    TrainConfig cfg;
    cfg.batch_size = 10;
    cfg.max_steps = 50;
    cfg.eval_every = 1;
    cfg.rampup_steps = 0;
    cfg.base_lr = 3e-3;
    cfg.augment = false;
    const TrainResult r = train_loop(m, d, cfg);
    ASSERT_EQ(r.history.size(), 50u);
    for (std::size_t i = 1; i < r.history.size(); ++i)
        EXPECT_LT(r.history[i].train_loss, r.history[i - 1].train_loss) << "step " << r.history[i].step;
}

TEST(TrainLoop, DeterministicHistoryAndBestSelection) {
    const Dataset d = tiny_dataset(6, 3, 16, 9);
    auto run = [&] {
        AnyModel m = make_model(ModelKind::contour_evolution, 8, 4);
        TrainConfig cfg;
        cfg.batch_size = 2;
        cfg.max_steps = 6;
        cfg.eval_every = 2;
        cfg.seed = 12;
        const TrainResult r = train_loop(m, d, cfg);
        return std::pair{r, flat_values(m)};
    };
    const auto [a, va] = run();
    const auto [b, vb] = run();
    std::ostringstream ha, hb;
    write_history(ha, a.history);
    write_history(hb, b.history);
    EXPECT_EQ(ha.str(), hb.str());
    EXPECT_EQ(va, vb);
    ASSERT_EQ(a.history.size(), 3u);
    double best = 1e300;
    for (const auto& e : a.history) best = std::min(best, e.val_loss);
    EXPECT_EQ(a.best_val_loss, best);
    const std::string line = ha.str().substr(0, ha.str().find('\n'));
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 4);
}

TEST(TrainLoop, ErrorsCarryBatchContext) {
    Dataset d = tiny_dataset(3, 0, 16, 2);
    for (auto& s : d.train) s.initial_phi.reset();
    AnyModel m = make_model(ModelKind::contour_evolution, 1, 4);
    TrainConfig cfg;
    cfg.max_steps = 1;
    cfg.augment = false;
    try {
        train_loop(m, d, cfg);
        FAIL() << "missing initial contour accepted";
    } catch (const TrainingError& e) {
        EXPECT_EQ(e.step(), 1);
        EXPECT_EQ(e.batch_item(), 0);
        EXPECT_NE(std::string(e.what()).find("batch item 0"), std::string::npos);
    }
}
