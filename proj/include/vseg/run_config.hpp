#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/networks.hpp"
#include "vseg/synthetic.hpp"
#include "vseg/trainer.hpp"

namespace vseg {

// Merged view of dataset manifest + training + evaluation options. Files use
// the same flat key=value form as dataset manifests; every key must be in
// the schema below. Precedence: built-in defaults < config file < CLI flags.
struct RunConfig {
    // dataset generation
    int train_count = 34;
    int val_count = 5;
    int test_count = 10;
    int k = 7;
    int height = 64;
    int width = 64;
    double threshold_spread = 0.15;
    double blur_sigma = 1.5;
    double noise_level = 0.05;

    // shared
    std::uint64_t seed = 0;

    // architecture
    int base_width = 16;
    int latent_dim = 6;

    // training
    int epochs = 200;
    int batch_size = 4;
    double lr = 1e-3;
    double lambda_seg = 1.0;
    double lambda_rec = 1.0;
    double lambda_kl = 1.0;
    double dropout_rate = 0.5;
    int m_train = 1;

    // evaluation / plotting
    std::string method = "joint"; // joint | independent | dropout
    int samples = 7;              // M predictions averaged at test time
    std::string split = "val";    // train | val | test
    int plot_index = 0;           // sample index within split for plots

    void apply_kv(const std::vector<std::pair<std::string, std::string>>& kv, const std::string& origin) {
        for (const auto& [key, val] : kv) {
            if (key == "train") train_count = int(kv_to_int(key, val));
            else if (key == "val") val_count = int(kv_to_int(key, val));
            else if (key == "test") test_count = int(kv_to_int(key, val));
            else if (key == "k") k = int(kv_to_int(key, val));
            else if (key == "height") height = int(kv_to_int(key, val));
            else if (key == "width") width = int(kv_to_int(key, val));
            else if (key == "threshold_spread") threshold_spread = kv_to_double(key, val);
            else if (key == "blur_sigma") blur_sigma = kv_to_double(key, val);
            else if (key == "noise_level") noise_level = kv_to_double(key, val);
            else if (key == "seed") seed = kv_to_u64(key, val);
            else if (key == "base_width") base_width = int(kv_to_int(key, val));
            else if (key == "latent_dim") latent_dim = int(kv_to_int(key, val));
            else if (key == "epochs") epochs = int(kv_to_int(key, val));
            else if (key == "batch_size") batch_size = int(kv_to_int(key, val));
            else if (key == "lr") lr = kv_to_double(key, val);
            else if (key == "lambda_seg") lambda_seg = kv_to_double(key, val);
            else if (key == "lambda_rec") lambda_rec = kv_to_double(key, val);
            else if (key == "lambda_kl") lambda_kl = kv_to_double(key, val);
            else if (key == "dropout_rate") dropout_rate = kv_to_double(key, val);
            else if (key == "m_train") m_train = int(kv_to_int(key, val));
            else if (key == "method") method = val;
            else if (key == "samples") samples = int(kv_to_int(key, val));
            else if (key == "split") split = val;
            else if (key == "plot_index") plot_index = int(kv_to_int(key, val));
            else throw ConfigError(origin + ": unknown config key '" + key + "'");
        }
    }

    void load_file(const std::string& path) { apply_kv(read_kv_file(path), path); }

    void validate() const {
        if (method != "joint" && method != "independent" && method != "dropout")
            throw ConfigError("config: method must be joint|independent|dropout, got '" + method + "'");
        if (split != "train" && split != "val" && split != "test")
            throw ConfigError("config: split must be train|val|test, got '" + split + "'");
        if (samples < 1) throw ConfigError("config: samples must be >= 1");
        if (plot_index < 0) throw ConfigError("config: plot_index must be >= 0");
        to_manifest().validate();
        to_train_config().validate();
    }

    DatasetManifest to_manifest() const {
        DatasetManifest m;
        m.train = train_count;
        m.val = val_count;
        m.test = test_count;
        m.k = k;
        m.height = height;
        m.width = width;
        m.seed = seed;
        m.threshold_spread = threshold_spread;
        m.blur_sigma = blur_sigma;
        m.noise_level = noise_level;
        return m;
    }

    TrainConfig to_train_config() const {
        TrainConfig t;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.seed = seed;
        t.weights = LossWeights{lambda_seg, lambda_rec, lambda_kl};
        t.lr = lr;
        t.dropout_rate = dropout_rate;
        t.m_train_samples = m_train;
        return t;
    }

    // Architecture for a dataset of the given spatial size (the dataset
    // manifest, not the config, owns H and W once a dataset exists).
    ArchConfig to_arch(int data_height, int data_width) const {
        ArchConfig a;
        a.height = data_height;
        a.width = data_width;
        a.base_width = base_width;
        a.latent_dim = latent_dim;
        a.dropout_rate = method == "dropout" ? dropout_rate : 0.0;
        return a;
    }
};

} // namespace vseg
