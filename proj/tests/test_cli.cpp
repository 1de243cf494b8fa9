#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "nls/cli.hpp"

using namespace nls;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("nls_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

struct Outcome {
    int code;
    std::string out, err;
};

Outcome run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = detail::read_file(e.path());
    return files;
}

std::vector<std::string> small_data(const fs::path& dir) {
    return {"gen-data", "--seed", "7", "--out", dir.string(), "--set", "data.train_count=6", "--set",
            "data.val_count=3", "--set", "data.size=32"};
}

void write(const fs::path& p, const std::string& s) { detail::write_file(p, s); }

}  // namespace

TEST(Config, EmptyFileGivesDefaults) {
    TempDir t("empty");
    write(t.path / "c.cfg", "# nothing here\n\n");
    const AppConfig c = parse_config(t.path / "c.cfg");
    std::ostringstream a, b;
    write_config(a, c);
    write_config(b, AppConfig{});
    EXPECT_EQ(a.str(), b.str());
    EXPECT_TRUE(c.explicit_keys.empty());
    EXPECT_EQ(c.ode.a_tol, ode::SolverConfig{}.a_tol);
}

TEST(Config, OverrideReachesSolverConfig) {
    const AppConfig c = parse_config({}, {"ode.a_tol = 1e-4"});
    EXPECT_EQ(c.ode.a_tol, 1e-4);
    EXPECT_TRUE(c.is_set("ode.a_tol"));
}

TEST(Config, TypeMismatchNamesKeyAndType) {
    try {
        parse_config({}, {"ode.a_tol=banana"});
        FAIL() << "accepted banana";
    } catch (const ConfigError& e) {
        const std::string w = e.what();
        EXPECT_NE(w.find("ode.a_tol"), std::string::npos);
        EXPECT_NE(w.find("float"), std::string::npos);
    }
    EXPECT_THROW(parse_config({}, {"train.batch_size=2.5"}), ConfigError);
    EXPECT_THROW(parse_config({}, {"train.augment=maybe"}), ConfigError);
    EXPECT_THROW(parse_config({}, {"model.kind=unet"}), ConfigError);
}

TEST(Config, UnknownKeysAndBadLinesRejected) {
    EXPECT_THROW(parse_config({}, {"ode.atol=1e-4"}), ConfigError);
    EXPECT_THROW(parse_config({}, {"noequals"}), ConfigError);
    TempDir t("bad");
    write(t.path / "c.cfg", "ode.a_tol 1e-4\n");
    EXPECT_THROW(parse_config(t.path / "c.cfg"), ConfigError);
    EXPECT_THROW(parse_config(t.path / "missing.cfg"), ConfigError);
    EXPECT_THROW(parse_config({}, {"train.anneal_factor=1.5"}), ConfigError);
}

TEST(Config, FileSectionsCommentsAndOverridePrecedence) {
    TempDir t("file");
    write(t.path / "c.cfg",
          "# solver\node.a_tol = 1e-5   # trailing comment\node.method = rk4\n"
          "train.max_steps=20\ndata.family = blob\nmodel.kind = image-evolution\n");
    const AppConfig c = parse_config(t.path / "c.cfg", {"train.max_steps=30"});
    EXPECT_EQ(c.ode.a_tol, 1e-5);
    EXPECT_EQ(c.ode.method, ode::Method::rk4_fixed);
    EXPECT_EQ(c.train.max_steps, 30);
    EXPECT_EQ(c.data.family, ShapeFamily::blob);
    EXPECT_EQ(c.model_kind, ModelKind::image_evolution);
}

TEST(Config, EveryKeyDocumentedAndRoundTrips) {
    TempDir t("dump");
    std::ostringstream os;
    write_config(os);
    write(t.path / "all.cfg", os.str());
    const AppConfig c = parse_config(t.path / "all.cfg");
    EXPECT_EQ(c.explicit_keys.size(), config_keys().size());
    for (const auto& k : config_keys()) {
        EXPECT_FALSE(k.doc.empty()) << k.name;
        EXPECT_EQ(k.get(c), k.get(AppConfig{})) << k.name;
    }
}

TEST(Frames, BandRenderingConvention) {
    EXPECT_EQ(cli::band_value(0.0), 128);
    EXPECT_EQ(cli::band_value(std::numeric_limits<double>::infinity()), 255);
    EXPECT_EQ(cli::band_value(-std::numeric_limits<double>::infinity()), 0);
    EXPECT_EQ(cli::band_value(1e6), 255);
    EXPECT_EQ(cli::band_value(-1e6), 0);
    const auto px = cli::render_band(DistanceMap(3, 4, 0.0));
    for (auto v : px) EXPECT_EQ(v, 128);
}

TEST(Frames, FileCountAndContents) {
    TempDir t("frames");
    std::vector<Frame> frames;
    for (int k = 0; k < 5; ++k) frames.push_back({0.25 * k, DistanceMap(8, 8, k - 2.0)});
    const auto files = cli::export_frames(frames, t.path / "f");
    EXPECT_EQ(files.size(), 11u);
    int n = 0;
    for (const auto& e : fs::directory_iterator(t.path / "f")) n += e.is_regular_file();
    EXPECT_EQ(n, 11);
    const ImageGrid mid = load_grayscale_image(t.path / "f" / "frame_0002.pgm");
    for (auto v : mid.values()) EXPECT_EQ(v, 128.0 / 255.0);
    const std::string times = detail::read_file(t.path / "f" / "times.txt");
    EXPECT_EQ(times, "0000\t0\n0001\t0.25\n0002\t0.5\n0003\t0.75\n0004\t1\n");
    EXPECT_THROW(cli::export_frames({}, t.path / "g"), InvalidInput);
}

TEST(Frames, OverlayMarksContour) {
    const DistanceMap phi = signed_distance_transform([] {
        BinaryMask m(9, 9);
        for (int r = 3; r < 6; ++r)
            for (int c = 3; c < 6; ++c) m(r, c) = 1;
        return m;
    }());
    const ImageGrid bg(9, 9, 0.0);
    const auto px = cli::render_overlay(phi, &bg);
    EXPECT_EQ(px[3 * 9 + 3], 255);
    EXPECT_EQ(px[4 * 9 + 4], 0);
    EXPECT_EQ(px[0], 0);
}

TEST(Frames, SelectKeepsEnds) {
    std::vector<Frame> frames;
    for (int k = 0; k < 10; ++k) frames.push_back({double(k), DistanceMap(1, 1, 0.0)});
    const auto s = cli::select_frames(frames, 4);
    ASSERT_EQ(s.size(), 4u);
    EXPECT_EQ(s.front().t, 0.0);
    EXPECT_EQ(s.back().t, 9.0);
    EXPECT_EQ(cli::select_frames(frames, 0).size(), 10u);
}

TEST(Cli, UsageErrorsExitTwo) {
    for (const auto& args : std::vector<std::vector<std::string>>{
             {}, {"bogus"}, {"eval", "--no-such-flag"}, {"train", "--method", "unet", "--out", "x"},
             {"solver-bench", "--set", "ode.a_tol=banana"}, {"solver-bench", "--set", "nope=1"},
             {"eval", "--method", "classical"}}) {
        const Outcome r = run(args);
        EXPECT_EQ(r.code, 2) << (args.empty() ? "" : args[0]);
        EXPECT_NE(r.err.find("Usage"), std::string::npos);
    }
    const Outcome h = run({"--help"});
    EXPECT_EQ(h.code, 0);
    EXPECT_NE(h.out.find("solver-bench"), std::string::npos);
}

TEST(Cli, RuntimeErrorsExitThree) {
    TempDir t("rt");
    EXPECT_EQ(run({"eval", "--set", "data.dir=" + (t.path / "nothing").string(), "--set", "eval.source=initial"}).code,
              3);
    write(t.path / "file", "x");
    save_pgm(t.path / "img.pgm", ImageGrid(16, 16, 0.5));
    const Outcome r = run({"evolve", "--method", "classical", "--image", (t.path / "img.pgm").string(), "--out",
                       (t.path / "file" / "sub").string(), "--set", "classical.steps=2"});
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("error"), std::string::npos);
}

TEST(Cli, GenDataTwiceIdentical) {
    TempDir t("gen");
    ASSERT_EQ(run(small_data(t.path / "a")).code, 0);
    ASSERT_EQ(run(small_data(t.path / "b")).code, 0);
    const auto a = tree(t.path / "a"), b = tree(t.path / "b");
    EXPECT_EQ(a.size(), 1 + 9 * 4u);
    EXPECT_EQ(a, b);
}

TEST(Cli, EvalPerfectPredictions) {
    TempDir t("evalp");
    ASSERT_EQ(run(small_data(t.path / "d")).code, 0);
    const Outcome r = run({"eval", "--set", "data.dir=" + (t.path / "d").string(), "--set", "eval.source=masks", "--set",
                       "eval.masks_dir=" + (t.path / "d" / "masks").string(), "--out", (t.path / "o").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, "dataset\tIOU\talpha_F_beta\tomega_F_beta\nd/val\t1.000000\t1.000000\t1.000000\n");
    EXPECT_EQ(detail::read_file(t.path / "o" / "metrics.tsv"), r.out);
}

TEST(Cli, EvolveIdentityCheckpointKeepsContour) {
    TempDir t("evolve");
    save_checkpoint(t.path / "zero.lsck", make_model(ModelKind::contour_evolution, 3, 4));
    ImageGrid img(16, 16, 0.3);
    for (int r = 4; r < 12; ++r)
        for (int c = 4; c < 12; ++c) img(r, c) = 0.8;
    save_pgm(t.path / "img.pgm", img);
    const std::vector<std::string> args{"evolve", "--checkpoint", (t.path / "zero.lsck").string(), "--image",
                                        (t.path / "img.pgm").string(), "--out", (t.path / "o").string()};
    const Outcome r = run(args);
    ASSERT_EQ(r.code, 0) << r.err;
    std::vector<fs::path> frames;
    for (const auto& e : fs::directory_iterator(t.path / "o"))
        if (e.path().filename().string().rfind("frame_", 0) == 0) frames.push_back(e.path());
    std::sort(frames.begin(), frames.end());
    ASSERT_GE(frames.size(), 2u);
    EXPECT_EQ(detail::read_file(frames.front()), detail::read_file(frames.back()));

    auto first = tree(t.path / "o");
    fs::remove_all(t.path / "o");
    ASSERT_EQ(run(args).code, 0);
    EXPECT_EQ(tree(t.path / "o"), first);
}

TEST(Cli, EvolveClassicalFrameCount) {
    TempDir t("classical");
    save_pgm(t.path / "img.pgm", ImageGrid(16, 16, 0.5));
    const Outcome r = run({"evolve", "--method", "classical", "--image", (t.path / "img.pgm").string(), "--out",
                       (t.path / "o").string(), "--set", "classical.steps=9", "--frames", "4"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(tree(t.path / "o").size(), 2 * 4 + 1u);
}

TEST(Cli, WritesOnlyUnderOut) {
    TempDir t("sandbox");
    ASSERT_EQ(run(small_data(t.path / "d")).code, 0);
    const auto before = tree(t.path);
    const fs::path out = t.path / "o";
    const std::string data = "data.dir=" + (t.path / "d").string();
    ASSERT_EQ(run({"train", "--method", "regression", "--out", out.string(), "--set", data, "--set",
                   "train.max_steps=2", "--set", "train.eval_every=1", "--set", "train.batch_size=1"})
                  .code,
              0);
    ASSERT_EQ(run({"eval", "--checkpoint", (out / "checkpoint.lsck").string(), "--set", data, "--out",
                   out.string()})
                  .code,
              0);
    ASSERT_EQ(run({"solver-bench", "--out", out.string()}).code, 0);
    for (const auto& [name, bytes] : tree(t.path)) {
        if (name.rfind("o/", 0) == 0) continue;
        ASSERT_TRUE(before.count(name)) << name;
        EXPECT_EQ(before.at(name), bytes) << name;
    }
    const auto o = tree(out);
    for (const char* f : {"checkpoint.lsck", "history.tsv", "metrics.tsv", "solver_bench.tsv"})
        EXPECT_TRUE(o.count(f)) << f;
    EXPECT_EQ(load_checkpoint(out / "checkpoint.lsck").index(), AnyModel(RegressionModel{}).index());
}

TEST(Cli, TrainEvalDeterministic) {
    TempDir t("det");
    ASSERT_EQ(run(small_data(t.path / "d")).code, 0);
    std::vector<std::string> tables;
    for (const char* o : {"o1", "o2"}) {
        const fs::path out = t.path / o;
        ASSERT_EQ(run({"train", "--method", "contour-evolution", "--out", out.string(), "--set",
                       "data.dir=" + (t.path / "d").string(), "--set", "train.max_steps=3", "--set",
                       "train.eval_every=3", "--set", "train.batch_size=2", "--set", "model.embed_channels=2"})
                      .code,
                  0);
        const Outcome e = run({"eval", "--checkpoint", (out / "checkpoint.lsck").string(), "--set",
                           "data.dir=" + (t.path / "d").string()});
        ASSERT_EQ(e.code, 0) << e.err;
        tables.push_back(e.out + detail::read_file(out / "history.tsv"));
    }
    EXPECT_EQ(tables[0], tables[1]);
}

TEST(Cli, SolverBenchSweep) {
    const Outcome r = run({"solver-bench"});
    ASSERT_EQ(r.code, 0);
    std::istringstream in(r.out);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "problem\ta_tol\tr_tol\tmax_error\tnfe\taccepted\trejected");
    int rows = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string name;
        double tol, rtol, err;
        long nfe, acc, rej;
        ls >> name >> tol >> rtol >> err >> nfe >> acc >> rej;
        EXPECT_EQ(nfe, 1 + 6 * (acc + rej));
        EXPECT_LE(err, 10 * tol);
        ++rows;
    }
    EXPECT_EQ(rows, 6);
    EXPECT_EQ(run({"solver-bench", "--atol", "1e-6"}).out.find("1.000000e-06") != std::string::npos, true);
}

TEST(Cli, GradCheckPasses) {
    for (const char* m : {"regression", "contour-evolution", "image-evolution"}) {
        const Outcome r = run({"grad-check", "--method", m, "--set", "model.embed_channels=2"});
        EXPECT_EQ(r.code, 0) << m << "\n" << r.out << r.err;
        EXPECT_NE(r.out.find("check\tparams\tmax_rel_error\tstatus"), std::string::npos);
    }
}
