// SPDX-License-Identifier: Apache-2.0
//
// Synthetic run pools on a quadratic score surface. Snapshot t of run j
// (config c, seed s):
//
//   w = w*_trg + delta_c + max(0, 1 - decay*t/T) * d_j + b_j + eps_t
//
// delta_c ~ N(0, (config_bias_ratio*sigma_bias)^2) is shared by the seeds of
// a config, d_j ~ N(0, init_scale^2), b_j ~ N(0, sigma_bias^2),
// eps_t ~ N(0, sigma_noise^2). The source optimum is
// w*_src = w*_trg + delta_src_trg*sqrt(dim)*u for a fixed unit vector u, so
// delta_src_trg is in per-coordinate units like the other scales. Target
// language l has optimum w*_trg + lang_spread*z_l.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "core/evaluator.hpp"
#include "core/registry.hpp"
#include "core/weight_store.hpp"

namespace snapsoup {

struct SynthConfig {
    std::uint64_t dim = 256;
    int n_configs = 21;
    int seeds_per_config = 3;
    int snapshots_per_run = kDefaultSnapshotsPerRun;
    double sigma_noise = 0.5;
    double sigma_bias = 1.0;
    double config_bias_ratio = 1.0;
    double init_scale = 1.0;
    double decay = 1.0;
    double delta_src_trg = 2.0;
    int languages = 5;
    double lang_spread = 0.5;
    double s0 = 100.0;
    double curvature = 0.0; // 0 selects 1/dim
    std::uint64_t rng_seed = 42;
    std::string metric = "synthetic";

    void validate() const;
};

/// (lr, bs) of config c: lr from {1e-6, 5e-6, 1e-5, ...}, bs from {16, 32, 64}.
ConfigKey synth_config_key(int c);
std::string synth_run_id(const ConfigKey& key, int seed);
std::vector<std::string> synth_languages(int count);

struct SynthPool {
    RunPool pool; // with score records for every snapshot and the CA sentinel
    std::shared_ptr<MemoryWeightStore> weights;
    SyntheticTruth truth;
};

/// Deterministic in cfg; runs are generated in parallel from per-run streams.
SynthPool generate(const SynthConfig& cfg, unsigned jobs = 1);

/// Writes manifest.json, snapshots/<run>/snap-XX.tpak, scores.csv and truth.json.
void write_synth_pool(const SynthPool& sp, const std::filesystem::path& out_dir);

nlohmann::json synth_config_to_json(const SynthConfig& cfg);

} // namespace snapsoup
