// SPDX-License-Identifier: Apache-2.0

#include "core/synthgen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "core/averaging.hpp"
#include "core/error.hpp"
#include "core/rng.hpp"

namespace snapsoup {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSynthDomain = 0x73796e7468ull; // "synth"
constexpr const char* kTensorName = "weight";

std::vector<double> normals(CounterRng& rng, std::uint64_t n, double scale)
{
    std::vector<double> v(n);
    for (auto& x : v)
        x = scale * rng.normal();
    return v;
}

TensorMap vector_map(const std::vector<float>& v)
{
    TensorMap tm;
    tm.insert(kTensorName, Tensor({v.size()}, v));
    return tm;
}

struct RunOutput {
    std::vector<TensorMap> snapshots;
    std::vector<ScoreRecord> scores;
};

} // namespace

void SynthConfig::validate() const
{
    if (dim < 1)
        usage_error("synth: dim must be >= 1");
    if (n_configs < 1 || seeds_per_config < 1 || snapshots_per_run < 1)
        usage_error("synth: configs, seeds and snapshots must be >= 1");
    if (languages < 1)
        usage_error("synth: languages must be >= 1");
    for (double s : {sigma_noise, sigma_bias, config_bias_ratio, init_scale, decay, delta_src_trg, lang_spread,
                     curvature})
        if (!(s >= 0) || !std::isfinite(s))
            usage_error("synth: scales must be finite and >= 0");
    if (!std::isfinite(s0))
        usage_error("synth: s0 must be finite");
    if (metric.empty())
        usage_error("synth: metric must not be empty");
}

ConfigKey synth_config_key(int c)
{
    const int lr_slot = c / 3;
    const double lr = (lr_slot == 0 ? 1.0 : 5.0 * lr_slot) / 1e6; // correctly rounded decimals
    return {lr, std::int64_t{16} << (c % 3)};
}

std::string synth_run_id(const ConfigKey& key, int seed)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "lr%.1e-bs%lld-s%d", key.learning_rate, static_cast<long long>(key.batch_size),
                  seed);
    return buf;
}

std::vector<std::string> synth_languages(int count)
{
    static const char* const codes[] = {"ar", "de", "es", "fr", "hi", "ru", "sw", "tr", "ur", "vi", "zh", "bg", "el", "th"};
    std::vector<std::string> out;
    for (int i = 0; i < count; ++i)
        out.push_back(i < static_cast<int>(std::size(codes)) ? codes[i] : "l" + std::to_string(i));
    std::sort(out.begin(), out.end());
    return out;
}

SynthPool generate(const SynthConfig& cfg, unsigned jobs)
{
    cfg.validate();
    const std::uint64_t dim = cfg.dim;
    const double curvature = cfg.curvature > 0 ? cfg.curvature : 1.0 / static_cast<double>(dim);

    // Ground truth.
    SynthPool out;
    out.truth.s0 = cfg.s0;
    out.truth.curvature = curvature;
    CounterRng truth_rng(cfg.rng_seed, stream_id(kSynthDomain, 0));
    std::vector<float> w_trg(dim);
    for (auto& x : w_trg)
        x = static_cast<float>(truth_rng.normal());
    std::vector<double> u = normals(truth_rng, dim, 1.0);
    double norm = 0.0;
    for (double x : u)
        norm += x * x;
    norm = std::sqrt(norm);
    const double src_scale = cfg.delta_src_trg * std::sqrt(static_cast<double>(dim)) / norm;
    std::vector<float> w_src(dim);
    for (std::uint64_t i = 0; i < dim; ++i)
        w_src[i] = static_cast<float>(static_cast<double>(w_trg[i]) + src_scale * u[i]);
    out.truth.target_optimum = vector_map(w_trg);
    out.truth.source_optimum = vector_map(w_src);
    const auto languages = synth_languages(cfg.languages);
    for (const auto& lang : languages) {
        const auto z = normals(truth_rng, dim, cfg.lang_spread);
        std::vector<float> w(dim);
        for (std::uint64_t i = 0; i < dim; ++i)
            w[i] = static_cast<float>(static_cast<double>(w_trg[i]) + z[i]);
        out.truth.language_optima.emplace(lang, vector_map(w));
    }

    std::vector<std::vector<double>> config_offsets;
    for (int c = 0; c < cfg.n_configs; ++c) {
        CounterRng rng(cfg.rng_seed, stream_id(kSynthDomain, 1, static_cast<std::uint64_t>(c)));
        config_offsets.push_back(normals(rng, dim, cfg.config_bias_ratio * cfg.sigma_bias));
    }

    std::vector<Run> runs;
    for (int c = 0; c < cfg.n_configs; ++c) {
        const ConfigKey key = synth_config_key(c);
        for (int s = 1; s <= cfg.seeds_per_config; ++s) {
            Run run;
            run.run_id = synth_run_id(key, s);
            run.hparams = {key.learning_rate, key.batch_size, s};
            for (int t = 1; t <= cfg.snapshots_per_run; ++t)
                run.snapshots.push_back({t, std::nullopt});
            runs.push_back(std::move(run));
        }
    }

    std::vector<SplitSpec> splits{{SplitId::src_dev(), cfg.metric}};
    for (const auto& lang : languages) {
        splits.push_back({SplitId::trg_dev(lang), cfg.metric});
        splits.push_back({SplitId::test(lang), cfg.metric});
    }

    std::vector<RunOutput> outputs(runs.size());
    auto make_run = [&](std::size_t j) {
        const Run& run = runs[j];
        const auto c = j / static_cast<std::size_t>(cfg.seeds_per_config);
        CounterRng rng(cfg.rng_seed, stream_id(kSynthDomain, 2, j));
        const auto d = normals(rng, dim, cfg.init_scale);
        const auto b = normals(rng, dim, cfg.sigma_bias);
        const auto& delta = config_offsets[c];
        auto& ro = outputs[j];
        const double T = cfg.snapshots_per_run;
        for (int t = 1; t <= cfg.snapshots_per_run; ++t) {
            const double f = std::max(0.0, 1.0 - cfg.decay * t / T);
            std::vector<float> w(dim);
            for (std::uint64_t i = 0; i < dim; ++i)
                w[i] = static_cast<float>(static_cast<double>(w_trg[i]) + delta[i] + f * d[i] + b[i] +
                                          cfg.sigma_noise * rng.normal());
            TensorMap tm = vector_map(w);
            tm.meta()["id"] = run.run_id + "@" + std::to_string(t);
            tm.meta()["run_id"] = run.run_id;
            tm.meta()["snapshot"] = std::to_string(t);
            ro.snapshots.push_back(std::move(tm));
        }
        TensorMap ca = average_checkpoints(std::span<const TensorMap>(ro.snapshots));
        auto score_all = [&](const TensorMap& w, int index) {
            for (const auto& sp : splits)
                ro.scores.push_back({{run.run_id, index, sp.split.to_string(), sp.metric},
                                     quadratic_score(w, out.truth.optimum_for(sp.split), cfg.s0, curvature)});
        };
        score_all(ca, kCaSnapshotIndex);
        for (int t = 1; t <= cfg.snapshots_per_run; ++t)
            score_all(ro.snapshots[static_cast<std::size_t>(t - 1)], t);
    };

    const unsigned workers = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(runs.size())));
    if (workers == 1) {
        for (std::size_t j = 0; j < runs.size(); ++j)
            make_run(j);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> threads;
        for (unsigned w = 0; w < workers; ++w)
            threads.emplace_back([&] {
                for (std::size_t j = next++; j < runs.size(); j = next++)
                    make_run(j);
            });
    }

    out.weights = std::make_shared<MemoryWeightStore>();
    std::vector<ScoreRecord> records;
    for (std::size_t j = 0; j < runs.size(); ++j) {
        auto& ro = outputs[j];
        for (std::size_t t = 0; t < ro.snapshots.size(); ++t)
            out.weights->put(runs[j].run_id, static_cast<int>(t + 1), std::move(ro.snapshots[t]));
        records.insert(records.end(), ro.scores.begin(), ro.scores.end());
    }
    out.pool = ingest_scores(RunPool::from_runs(std::move(runs), cfg.snapshots_per_run), records);
    return out;
}

nlohmann::json synth_config_to_json(const SynthConfig& cfg)
{
    return {{"dim", cfg.dim},
            {"configs", cfg.n_configs},
            {"seeds", cfg.seeds_per_config},
            {"snapshots", cfg.snapshots_per_run},
            {"sigma_noise", cfg.sigma_noise},
            {"sigma_bias", cfg.sigma_bias},
            {"config_bias_ratio", cfg.config_bias_ratio},
            {"init_scale", cfg.init_scale},
            {"decay", cfg.decay},
            {"delta_src_trg", cfg.delta_src_trg},
            {"languages", cfg.languages},
            {"lang_spread", cfg.lang_spread},
            {"s0", cfg.s0},
            {"curvature", cfg.curvature},
            {"seed", cfg.rng_seed},
            {"metric", cfg.metric}};
}

void write_synth_pool(const SynthPool& sp, const fs::path& out_dir)
{
    std::error_code ec;
    fs::create_directories(out_dir / "snapshots", ec);
    if (ec)
        fail(ErrorKind::Io, "cannot create '" + (out_dir / "snapshots").string() + "': " + ec.message());

    std::vector<Run> runs = sp.pool.runs();
    for (auto& run : runs) {
        const fs::path dir = fs::path("snapshots") / run.run_id;
        fs::create_directories(out_dir / dir, ec);
        if (ec)
            fail(ErrorKind::Io, "cannot create '" + (out_dir / dir).string() + "': " + ec.message());
        for (auto& s : run.snapshots) {
            char name[32];
            std::snprintf(name, sizeof name, "snap-%02d.tpak", s.index);
            s.weights_path = dir / name;
            save_tensormap(*sp.weights->load(run, s.index), out_dir / *s.weights_path);
        }
    }
    const RunPool with_paths = RunPool::from_runs(std::move(runs), sp.pool.snapshots_per_run());

    auto write_text = [&](const fs::path& name, const std::string& text) {
        const fs::path path = out_dir / name;
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f || !(f << text) || !f.flush())
            fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
    };
    write_text("manifest.json", manifest_to_json(with_paths).dump(2) + "\n");

    std::string csv = "run_id,snapshot_index,split,metric,value\n";
    for (const auto& [key, value] : sp.pool.scores())
        csv += key.run_id + "," + std::to_string(key.snapshot_index) + "," + key.split + "," + key.metric + "," +
               format_double(value) + "\n";
    write_text("scores.csv", csv);
    write_text("truth.json", truth_to_json(sp.truth).dump() + "\n");
}

} // namespace snapsoup
