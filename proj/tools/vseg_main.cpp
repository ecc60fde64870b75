// Command-line front end: dataset generation, training, evaluation,
// visualization, and a quick numerical self-test.
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vseg/vseg.hpp"

namespace {

using namespace vseg;

struct CliArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out;
    std::string method;
    int samples = 0;
    int epochs = 0;
    std::string data_dir;
    std::string run_dir;
};

RunConfig merged_config(const CliArgs& a) {
    RunConfig cfg;
    if (!a.config_path.empty()) cfg.load_file(a.config_path);
    if (a.seed_given) cfg.seed = a.seed;
    if (!a.method.empty()) cfg.method = a.method;
    if (a.samples > 0) cfg.samples = a.samples;
    if (a.epochs > 0) cfg.epochs = a.epochs;
    cfg.validate();
    return cfg;
}

int cmd_gen(const CliArgs& a) {
    const RunConfig cfg = merged_config(a);
    const DatasetManifest man = cfg.to_manifest();
    const Dataset ds = make_dataset(man);
    write_dataset(ds, a.out);
    std::printf("wrote dataset to %s: train=%d val=%d test=%d k=%d size=%dx%d seed=%llu spread=%s\n", a.out.c_str(),
                man.train, man.val, man.test, man.k, man.height, man.width, (unsigned long long)man.seed,
                format_double(man.threshold_spread).c_str());
    return 0;
}

int cmd_train(const CliArgs& a) {
    const RunConfig cfg = merged_config(a);
    const Dataset ds = read_dataset(a.data_dir);
    const ArchConfig arch = cfg.to_arch(ds.manifest.height, ds.manifest.width);
    const TrainConfig tc = cfg.to_train_config();
    std::filesystem::create_directories(a.out);

    std::vector<EpochMetrics> log;
    if (cfg.method == "joint") {
        ModelTriple32 model = init_params<float>(arch, cfg.seed);
        log = train_joint(model, ds.train, tc);
        save_checkpoint(a.out + "/model.vsck", model);
    } else if (cfg.method == "independent") {
        TrainedIndependent ti = train_independent_baseline(ds.train, ds.manifest.k, tc, arch);
        log = std::move(ti.log);
        for (std::size_t k = 0; k < ti.nets.size(); ++k)
            save_checkpoint(a.out + "/model_k" + std::to_string(k) + ".vsck", ti.nets[k], arch, 0);
    } else {
        TrainedDropout td = train_mc_dropout_baseline(ds.train, tc, arch);
        log = std::move(td.log);
        ArchConfig darch = arch;
        darch.dropout_rate = tc.dropout_rate;
        save_checkpoint(a.out + "/model.vsck", td.net, darch, 0);
    }
    detail::write_file_bytes(a.out + "/metrics.csv", metrics_csv(log));
    const EpochMetrics& last = log.back();
    std::printf("trained method=%s epochs=%d  final: ce=%.6g rec=%.6g kl=%.6g total=%.6g\n", cfg.method.c_str(),
                cfg.epochs, last.ce, last.rec, last.kl, last.total);
    std::printf("checkpoints and metrics.csv written to %s\n", a.out.c_str());
    return 0;
}

// A run directory is either K per-rater checkpoints (model_k*.vsck) or a
// single model.vsck whose arch block says joint vs dropout.
struct LoadedRun {
    std::string method;
    Checkpoint single;              // joint or dropout
    std::vector<ParamSet32> nets;   // independent
    ArchConfig arch;
};

LoadedRun load_run(const std::string& run_dir) {
    LoadedRun r;
    if (std::filesystem::exists(run_dir + "/model_k0.vsck")) {
        r.method = "independent";
        for (int k = 0;; ++k) {
            const std::string path = run_dir + "/model_k" + std::to_string(k) + ".vsck";
            if (!std::filesystem::exists(path)) break;
            Checkpoint ck = load_checkpoint(path);
            if (ck.kind != "segnet")
                throw FormatError("run dir " + run_dir + ": " + path + " is not a segnet checkpoint");
            r.arch = ck.arch;
            r.nets.push_back(std::move(ck.net));
        }
        return r;
    }
    r.single = load_checkpoint(run_dir + "/model.vsck");
    r.arch = r.single.arch;
    r.method = r.single.kind == "joint" ? "joint" : "dropout";
    return r;
}

int cmd_eval(const CliArgs& a) {
    const RunConfig cfg = merged_config(a);
    const Dataset ds = read_dataset(a.data_dir);
    const LoadedRun run = load_run(a.run_dir);
    if (!a.method.empty() && a.method != run.method)
        throw InputError("--method " + a.method + " does not match run directory contents (" + run.method + ")");
    const auto& split = ds.split(cfg.split);

    EvalResult r;
    if (run.method == "joint")
        r = evaluate_joint(run.single.triple, split, cfg.samples, cfg.seed);
    else if (run.method == "independent")
        r = evaluate_independent(run.nets, run.arch, split);
    else
        r = evaluate_dropout(run.single.net, run.arch, run.arch.dropout_rate, split, cfg.samples, cfg.seed);

    std::fputs(r.table().c_str(), stdout);
    std::printf("%s\n", r.summary().c_str());
    if (!a.out.empty()) {
        std::string csv = "sample_id,dice\n";
        char buf[96];
        for (const auto& [id, d] : r.per_sample) {
            std::snprintf(buf, sizeof buf, "%s,%.9g\n", id.c_str(), d);
            csv += buf;
        }
        detail::write_file_bytes(a.out, csv);
    }
    return 0;
}

int cmd_plot(const CliArgs& a) {
    const RunConfig cfg = merged_config(a);
    const Dataset ds = read_dataset(a.data_dir);
    const LoadedRun run = load_run(a.run_dir);
    const auto& split = ds.split(cfg.split);
    if (cfg.plot_index >= int(split.size()))
        throw InputError("plot_index " + std::to_string(cfg.plot_index) + " out of range for split '" + cfg.split +
                         "' of size " + std::to_string(split.size()));
    const AnnotatedSample& sample = split[std::size_t(cfg.plot_index)];

    std::vector<Tensor32> maps;
    if (run.method == "joint")
        maps = sample_segmentations(run.single.triple.segnet, run.arch, sample.image, cfg.samples, cfg.seed);
    else if (run.method == "dropout")
        maps = sample_dropout_predictions(run.single.net, run.arch, run.arch.dropout_rate, sample.image, cfg.samples,
                                          cfg.seed);
    else {
        for (const auto& net : run.nets) {
            Tape32 tape;
            const auto bn = bind_frozen(tape, net);
            maps.push_back(tape.sigmoid(segnet_forward(tape, bn, run.arch, tape.constant(sample.image))));
        }
    }

    std::filesystem::create_directories(a.out);
    write_pgm(a.out + "/input.pgm", sample.image);
    char name[64];
    for (std::size_t m = 0; m < maps.size(); ++m) {
        std::snprintf(name, sizeof name, "/sample_%02zu.pgm", m);
        write_pgm(a.out + name, maps[m]);
    }
    write_pgm(a.out + "/confidence.pgm", confidence_map(maps).values);
    write_pgm(a.out + "/disagreement.pgm", disagreement_map(maps).values);
    std::printf("wrote %zu prediction images + input/confidence/disagreement to %s (sample %s)\n", maps.size(),
                a.out.c_str(), sample.sample_id.c_str());
    return 0;
}

int cmd_selftest() {
    int failures = 0;
    const auto report = [&](const char* name, bool ok, double value) {
        std::printf("[%s] %-34s %.3g\n", ok ? "PASS" : "FAIL", name, value);
        if (!ok) ++failures;
    };

    // gradient check per op kind on small fixed shapes (f64 oracle)
    RandomGen rng(17);
    double worst = 0.0;
    for (Op kind : kOpKinds) {
        OpAttrs attrs;
        std::vector<Tensor64> inputs;
        const auto rnd = [&](Shape s) {
            std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
            rng.fill_uniform(std::span<double>(v), -1.0, 1.0);
            return Tensor64(s, std::move(v));
        };
        switch (kind) {
            case Op::Add: case Op::Sub: case Op::Mul:
                inputs = {rnd({3, 4}), rnd({3, 4})};
                break;
            case Op::MatMul:
                inputs = {rnd({3, 4}), rnd({4, 2})};
                break;
            case Op::Conv2d:
                inputs = {rnd({2, 6, 6}), rnd({3, 2, 3, 3})};
                attrs.stride = 2; attrs.pad = 1;
                break;
            case Op::Log: {
                Tensor64 t = rnd({3, 4});
                std::vector<double> v(t.data().begin(), t.data().end());
                for (auto& x : v) x = 1.5 + 0.5 * x; // keep log inputs positive
                inputs = {Tensor64({3, 4}, std::move(v))};
                break;
            }
            case Op::Concat:
                inputs = {rnd({2, 3}), rnd({2, 2})};
                attrs.axis = 1;
                break;
            case Op::Slice:
                inputs = {rnd({3, 5})};
                attrs.axis = 1; attrs.start = 1; attrs.len = 3;
                break;
            case Op::Broadcast:
                inputs = {rnd({3, 1, 1})};
                attrs.target = {3, 4, 2};
                break;
            case Op::Reshape:
                inputs = {rnd({3, 4})};
                attrs.target = {2, 6};
                break;
            case Op::Upsample2x:
                inputs = {rnd({2, 3, 3})};
                break;
            default:
                inputs = {rnd({3, 4})};
                break;
        }
        const double err = finite_diff_check<double>(
            [&](Tape64& tape, const std::vector<Tensor64>& bound) {
                return tape.sum(tape.forward_op(kind, bound, attrs));
            },
            inputs, 1e-5);
        worst = std::max(worst, err);
        char label[64];
        std::snprintf(label, sizeof label, "gradcheck %s", op_name(kind));
        report(label, err < 1e-4, err);
    }
    report("gradcheck worst-case", worst < 1e-4, worst);

    // exact finite-alphabet decomposition oracle
    RandomGen erng(23);
    double worst_resid = 0.0, worst_rem = 0.0;
    for (int i = 0; i < 100; ++i) {
        const DiscreteJoint dj = DiscreteJoint::random(erng, 2, 3, 4);
        for (int x = 0; x < dj.nx; ++x)
            for (int s = 0; s < dj.ns; ++s) {
                const auto dec = discrete_elbo_decomposition(dj, x, s);
                worst_resid = std::max(worst_resid, std::abs(dec.residual()));
                worst_rem = std::max(worst_rem, -dec.remainder());
            }
    }
    report("decomposition residual", worst_resid < 1e-10, worst_resid);
    report("bound validity (remainder >= 0)", worst_rem < 1e-12, worst_rem);

    std::printf(failures == 0 ? "selftest: all checks passed\n" : "selftest: %d check(s) FAILED\n", failures);
    return failures == 0 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"variational inter-observer segmentation toolkit"};
    app.require_subcommand(1);
    CliArgs a;

    const auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", a.config_path, "key=value config file");
        cmd->add_option("--seed", a.seed, "RNG seed")->each([&](const std::string&) { a.seed_given = true; });
    };

    CLI::App* gen = app.add_subcommand("gen", "generate a synthetic multi-rater dataset");
    add_common(gen);
    gen->add_option("--out", a.out, "output dataset directory")->required();

    CLI::App* train = app.add_subcommand("train", "train a model on a dataset");
    add_common(train);
    train->add_option("data", a.data_dir, "dataset directory")->required();
    train->add_option("--method", a.method, "joint | independent | dropout");
    train->add_option("--epochs", a.epochs, "override epoch count");
    train->add_option("--out", a.out, "run output directory")->required();

    CLI::App* eval = app.add_subcommand("eval", "score a trained run on a dataset split");
    add_common(eval);
    eval->add_option("data", a.data_dir, "dataset directory")->required();
    eval->add_option("run", a.run_dir, "run directory with checkpoints")->required();
    eval->add_option("--method", a.method, "expected method (checked against run dir)");
    eval->add_option("--samples", a.samples, "predictions averaged per sample");
    eval->add_option("--out", a.out, "optional CSV output file");

    CLI::App* plot = app.add_subcommand("plot", "write PGM visualizations for one sample");
    add_common(plot);
    plot->add_option("data", a.data_dir, "dataset directory")->required();
    plot->add_option("run", a.run_dir, "run directory with checkpoints")->required();
    plot->add_option("--samples", a.samples, "number of sampled predictions");
    plot->add_option("--out", a.out, "output image directory")->required();

    CLI::App* selftest = app.add_subcommand("selftest", "run gradient checks and the decomposition oracle");
    (void)selftest;

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        std::fputs(app.help().c_str(), stderr);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen(a);
        if (train->parsed()) return cmd_train(a);
        if (eval->parsed()) return cmd_eval(a);
        if (plot->parsed()) return cmd_plot(a);
        return cmd_selftest();
    } catch (const vseg::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const vseg::InputError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
