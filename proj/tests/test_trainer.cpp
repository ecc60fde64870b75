// Adam optimizer, the three training loops, metric logs, and checkpoints.
#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <string>

#include "vseg/checkpoint.hpp"
#include "vseg/trainer.hpp"

#include "helpers.hpp"

using namespace vseg;

namespace {

std::string temp_dir(const char* name) {
    const auto p = std::filesystem::temp_directory_path() / "vseg_tests" / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

ArchConfig tiny_arch() {
    ArchConfig a;
    a.height = 16;
    a.width = 16;
    a.base_width = 4;
    return a;
}

TrainConfig tiny_cfg(int epochs) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 2;
    cfg.seed = 3;
    return cfg;
}

bool params_equal(const ParamSet32& a, const ParamSet32& b) {
    if (a.items.size() != b.items.size()) return false;
    for (std::size_t i = 0; i < a.items.size(); ++i) {
        if (a.items[i].first != b.items[i].first) return false;
        if (!bitwise_equal(a.items[i].second, b.items[i].second)) return false;
    }
    return true;
}

} // namespace

TEST_CASE("adam single step matches the hand-derived update") {
    ParamSet32 ps;
    ps.add("p.w", Tensor32({1}, {1.0f}));
    auto st = OptimState32::for_params(ps, 1e-3);

    Tape32 tape;
    const auto bp = bind(tape, ps);
    const Tensor32 loss = tape.sum(tape.mul(bp.get("p.w"), tape.constant_scalar(0.5f)));
    adam_step(ps, bp, tape.backward(loss), st);

    // g = 0.5: m-hat = g, v-hat = g^2 after one bias-corrected step
    const double m = 0.1 * 0.5, v = 0.001 * 0.25;
    const double mhat = m / 0.1, vhat = v / 0.001;
    const float expected = float(1.0 - 1e-3 * mhat / (std::sqrt(vhat) + 1e-8));
    CHECK(ps.get("p.w").at(0) == expected);
    CHECK(st.step == 1);
}

TEST_CASE("adam with zero or absent gradient leaves parameters untouched") {
    SECTION("gradient identically zero") {
        ParamSet32 ps;
        ps.add("p.w", Tensor32({3}, {1.0f, -2.0f, 0.5f}));
        auto st = OptimState32::for_params(ps);
        Tape32 tape;
        const auto bp = bind(tape, ps);
        const Tensor32 loss = tape.sum(tape.mul(bp.get("p.w"), tape.constant(Tensor32::zeros({3}))));
        adam_step(ps, bp, tape.backward(loss), st);
        CHECK(bitwise_equal(ps.get("p.w"), Tensor32({3}, {1.0f, -2.0f, 0.5f})));
    }
    SECTION("parameter unreachable from the loss") {
        ParamSet32 ps;
        ps.add("p.w", Tensor32({2}, {0.25f, 4.0f}));
        auto st = OptimState32::for_params(ps);
        Tape32 tape;
        const auto bp = bind(tape, ps);
        const Tensor32 loss = tape.sum(tape.constant_scalar(7.0f));
        adam_step(ps, bp, tape.backward(loss), st); // gradient map has no entry for p.w
        CHECK(bitwise_equal(ps.get("p.w"), Tensor32({2}, {0.25f, 4.0f})));
    }
}

TEST_CASE("adam step size approaches lr under a constant gradient") {
    ParamSet32 ps;
    ps.add("p.w", Tensor32({1}, {1.0f}));
    auto st = OptimState32::for_params(ps, 1e-3);
    float prev = 1.0f;
    double last_delta = 0.0;
    for (int i = 0; i < 500; ++i) {
        Tape32 tape;
        const auto bp = bind(tape, ps);
        const Tensor32 loss = tape.sum(tape.mul(bp.get("p.w"), tape.constant_scalar(0.5f)));
        adam_step(ps, bp, tape.backward(loss), st);
        last_delta = double(prev) - double(ps.get("p.w").at(0));
        prev = ps.get("p.w").at(0);
    }
    CHECK(last_delta == Catch::Approx(1e-3).epsilon(0.01));
}

TEST_CASE("adam contract violations") {
    ParamSet32 ps;
    ps.add("a.w", Tensor32({1}, {1.0f}));
    auto st = OptimState32::for_params(ps);

    SECTION("bound set with a different parameter") {
        ParamSet32 other;
        other.add("b.w", Tensor32({1}, {1.0f}));
        Tape32 tape;
        const auto bo = bind(tape, other);
        const auto grads = tape.backward(tape.sum(bo.get("b.w")));
        CHECK_THROWS_AS(adam_step(ps, bo, grads, st), ContractViolation);
    }
    SECTION("bound set of the wrong size") {
        ParamSet32 other;
        other.add("a.w", Tensor32({1}, {1.0f}));
        other.add("c.w", Tensor32({1}, {1.0f}));
        Tape32 tape;
        const auto bo = bind(tape, other);
        const auto grads = tape.backward(tape.sum(bo.get("a.w")));
        CHECK_THROWS_AS(adam_step(ps, bo, grads, st), ContractViolation);
    }
    SECTION("optimizer state from a different parameter set") {
        ParamSet32 two;
        two.add("a.w", Tensor32({1}, {1.0f}));
        two.add("b.w", Tensor32({1}, {1.0f}));
        auto st2 = OptimState32::for_params(two);
        Tape32 tape;
        const auto bp = bind(tape, ps);
        const auto grads = tape.backward(tape.sum(bp.get("a.w")));
        CHECK_THROWS_AS(adam_step(ps, bp, grads, st2), ContractViolation);
    }
    SECTION("non-positive learning rate") {
        CHECK_THROWS_AS(OptimState32::for_params(ps, 0.0), ConfigError);
    }
}

TEST_CASE("train_joint is deterministic and logs every epoch") {
    const Dataset ds = test_helpers::tiny_dataset();
    const ArchConfig arch = tiny_arch();
    const TrainConfig cfg = tiny_cfg(3);

    ModelTriple32 m1 = init_params<float>(arch, 17);
    ModelTriple32 m2 = init_params<float>(arch, 17);
    const auto log1 = train_joint(m1, ds.train, cfg);
    const auto log2 = train_joint(m2, ds.train, cfg);

    REQUIRE(log1.size() == 3);
    CHECK(metrics_csv(log1) == metrics_csv(log2));
    CHECK(params_equal(m1.encoder, m2.encoder));
    CHECK(params_equal(m1.decoder, m2.decoder));
    CHECK(params_equal(m1.segnet, m2.segnet));

    for (std::size_t e = 0; e < log1.size(); ++e) {
        CHECK(log1[e].epoch == int(e) + 1);
        CHECK(std::isfinite(log1[e].total));
        // logged total is the weighted sum of the logged terms (all weights 1)
        CHECK(log1[e].total == Catch::Approx(log1[e].ce + log1[e].rec + log1[e].kl).margin(1e-4));
        CHECK(log1[e].ce >= 0.0);
        CHECK(log1[e].rec >= 0.0);
        CHECK(log1[e].kl >= 0.0);
    }

    SECTION("different training seed gives a different trajectory") {
        ModelTriple32 m3 = init_params<float>(arch, 17);
        TrainConfig cfg2 = cfg;
        cfg2.seed = 4;
        const auto log3 = train_joint(m3, ds.train, cfg2);
        CHECK(metrics_csv(log1) != metrics_csv(log3));
    }
    SECTION("empty dataset and bad config are rejected") {
        ModelTriple32 m = init_params<float>(arch, 1);
        CHECK_THROWS_AS(train_joint(m, {}, cfg), InputError);
        TrainConfig bad = cfg;
        bad.epochs = 0;
        CHECK_THROWS_AS(train_joint(m, ds.train, bad), ConfigError);
        TrainConfig badw = cfg;
        badw.weights.lambda_kl = -1.0;
        CHECK_THROWS_AS(train_joint(m, ds.train, badw), ConfigError);
    }
}

TEST_CASE("train_joint aborts on the first non-finite loss term") {
    const Dataset ds = test_helpers::tiny_dataset();
    ModelTriple32 m = init_params<float>(tiny_arch(), 17);
    Tensor32 head = m.segnet.get("head.w");
    std::vector<float> poisoned(head.data().begin(), head.data().end());
    poisoned[0] = std::numeric_limits<float>::infinity();
    m.segnet.set("head.w", Tensor32(head.shape(), std::move(poisoned)));

    try {
        train_joint(m, ds.train, tiny_cfg(1));
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("non-finite") != std::string::npos);
        CHECK(msg.find("'ce'") != std::string::npos);
        CHECK(msg.find("epoch 1") != std::string::npos);
    }
}

TEST_CASE("train_independent_baseline trains one distinct net per rater") {
    const Dataset ds = test_helpers::tiny_dataset();
    const ArchConfig arch = tiny_arch();
    const TrainConfig cfg = tiny_cfg(2);

    const TrainedIndependent t1 = train_independent_baseline(ds.train, 3, cfg, arch);
    REQUIRE(t1.nets.size() == 3);
    REQUIRE(t1.log.size() == 2);
    CHECK_FALSE(params_equal(t1.nets[0], t1.nets[1]));
    CHECK_FALSE(params_equal(t1.nets[1], t1.nets[2]));
    // baseline logs have no latent terms
    for (const auto& e : t1.log) {
        CHECK(e.rec == 0.0);
        CHECK(e.kl == 0.0);
        CHECK(e.total == e.ce);
    }

    SECTION("bitwise deterministic across runs") {
        const TrainedIndependent t2 = train_independent_baseline(ds.train, 3, cfg, arch);
        for (int i = 0; i < 3; ++i) CHECK(params_equal(t1.nets[std::size_t(i)], t2.nets[std::size_t(i)]));
        CHECK(metrics_csv(t1.log) == metrics_csv(t2.log));
    }
    SECTION("K=1 degenerates to a single net") {
        const TrainedIndependent one = train_independent_baseline(ds.train, 1, cfg, arch);
        CHECK(one.nets.size() == 1);
        CHECK(one.log.size() == 2);
    }
    SECTION("asking for more raters than the data has is an input error") {
        CHECK_THROWS_AS(train_independent_baseline(ds.train, 4, cfg, arch), InputError);
        CHECK_THROWS_AS(train_independent_baseline(ds.train, 0, cfg, arch), InputError);
    }
}

TEST_CASE("train_mc_dropout_baseline validates its rate and is deterministic") {
    const Dataset ds = test_helpers::tiny_dataset();
    const ArchConfig arch = tiny_arch();
    TrainConfig cfg = tiny_cfg(2);

    cfg.dropout_rate = 0.0;
    CHECK_THROWS_AS(train_mc_dropout_baseline(ds.train, cfg, arch), ConfigError);
    cfg.dropout_rate = 1.0;
    CHECK_THROWS_AS(train_mc_dropout_baseline(ds.train, cfg, arch), ConfigError);

    cfg.dropout_rate = 0.5;
    const TrainedDropout d1 = train_mc_dropout_baseline(ds.train, cfg, arch);
    const TrainedDropout d2 = train_mc_dropout_baseline(ds.train, cfg, arch);
    REQUIRE(d1.log.size() == 2);
    CHECK(params_equal(d1.net, d2.net));
    CHECK(metrics_csv(d1.log) == metrics_csv(d2.log));
}

TEST_CASE("metrics_csv emits the canonical header and one line per epoch") {
    std::vector<EpochMetrics> log{{1, 0.5, 0.25, 0.125, 0.875}, {2, 0.25, 0.125, 0.0625, 0.4375}};
    const std::string csv = metrics_csv(log);
    CHECK(csv == "epoch,ce,rec,kl,total\n"
                 "1,0.5,0.25,0.125,0.875\n"
                 "2,0.25,0.125,0.0625,0.4375\n");
    CHECK(metrics_csv({}) == "epoch,ce,rec,kl,total\n");
}

TEST_CASE("joint checkpoints round-trip bitwise") {
    const std::string dir = temp_dir("ckpt_joint");
    const ArchConfig arch = tiny_arch();
    ModelTriple32 m = init_params<float>(arch, 41);

    const std::string path = dir + "/model.vsck";
    save_checkpoint(path, m);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.kind == "joint");
    CHECK(ck.arch == arch);
    CHECK(ck.z_channels == arch.latent_dim);
    CHECK(params_equal(ck.triple.encoder, m.encoder));
    CHECK(params_equal(ck.triple.decoder, m.decoder));
    CHECK(params_equal(ck.triple.segnet, m.segnet));
    CHECK(ck.triple.encoder.rng_seed == m.encoder.rng_seed);

    // save(load(save(x))) is byte-identical to save(x)
    const std::string path2 = dir + "/model2.vsck";
    save_checkpoint(path2, ck.triple);
    CHECK(detail::read_file_bytes(path) == detail::read_file_bytes(path2));

    SECTION("loaded parameters drive a bitwise-identical forward pass") {
        const Dataset ds = test_helpers::tiny_dataset();
        const Tensor32 x = ds.train[0].image;
        Tensor32 z_zero = Tensor32::zeros({arch.latent_dim});
        Tape32 t1, t2;
        const auto b1 = bind_frozen(t1, m.segnet);
        const auto b2 = bind_frozen(t2, ck.triple.segnet);
        const Tensor32 zc1 = t1.constant(z_zero), zc2 = t2.constant(z_zero);
        const Tensor32 l1 = segnet_forward(t1, b1, arch, t1.constant(x), &zc1);
        const Tensor32 l2 = segnet_forward(t2, b2, arch, t2.constant(x), &zc2);
        CHECK(bitwise_equal(l1, l2));
    }
}

TEST_CASE("segnet checkpoints round-trip bitwise") {
    const std::string dir = temp_dir("ckpt_segnet");
    const ArchConfig arch = tiny_arch();
    ParamSet32 net = init_segnet_params<float>(arch, 0, 99);

    const std::string path = dir + "/net.vsck";
    save_checkpoint(path, net, arch, 0);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.kind == "segnet");
    CHECK(ck.arch == arch);
    CHECK(ck.z_channels == 0);
    CHECK(params_equal(ck.net, net));
    CHECK(ck.net.rng_seed == 99);

    const std::string path2 = dir + "/net2.vsck";
    save_checkpoint(path2, ck.net, ck.arch, ck.z_channels);
    CHECK(detail::read_file_bytes(path) == detail::read_file_bytes(path2));
}

TEST_CASE("checkpoint loader rejects malformed files") {
    const std::string dir = temp_dir("ckpt_bad");
    ModelTriple32 m = init_params<float>(tiny_arch(), 1);
    const std::string path = dir + "/model.vsck";
    save_checkpoint(path, m);
    const std::string good = detail::read_file_bytes(path);

    const auto expect_format_error = [&](const std::string& bytes, const char* label) {
        INFO(label);
        const std::string f = dir + "/bad.vsck";
        detail::write_file_bytes(f, bytes);
        CHECK_THROWS_AS(load_checkpoint(f), FormatError);
    };
    expect_format_error(good.substr(0, 3), "truncated magic");
    expect_format_error(good.substr(0, good.size() / 2), "truncated tensors");
    expect_format_error(good + "junk", "trailing bytes");
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    expect_format_error(bad_magic, "bad magic");
    std::string bad_version = good;
    bad_version[4] = 9;
    expect_format_error(bad_version, "bad version");

    CHECK_THROWS_AS(load_checkpoint(dir + "/missing.vsck"), IoError);
}
