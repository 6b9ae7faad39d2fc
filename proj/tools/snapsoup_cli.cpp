// SPDX-License-Identifier: Apache-2.0
//
// snapsoup command-line tool. Talks to the library through the C API only.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "snapsoup/snapsoup.h"

using json = nlohmann::json;

namespace {

// Exit codes: 0 ok, 1 usage, 2 data/validation, 3 external evaluator.
int exit_code(ss_status st)
{
    switch (st) {
    case SS_OK:
        return 0;
    case SS_ERR_USAGE:
        return 1;
    case SS_ERR_EXTERNAL:
        return 3;
    default:
        return 2;
    }
}

struct Failure {
    int code;
};

void check(ss_status st)
{
    if (st != SS_OK) {
        std::fprintf(stderr, "snapsoup: error: %s\n", ss_last_error());
        throw Failure{exit_code(st)};
    }
}

[[noreturn]] void usage(const std::string& msg)
{
    std::fprintf(stderr, "snapsoup: error: %s\n", msg.c_str());
    throw Failure{1};
}

std::string take(char* s)
{
    std::string out = s ? s : "";
    ss_free_string(s);
    return out;
}

struct PoolDeleter {
    void operator()(ss_pool* p) const { ss_pool_free(p); }
};
struct EvalDeleter {
    void operator()(ss_evaluator* e) const { ss_evaluator_free(e); }
};
struct MapDeleter {
    void operator()(ss_tensormap* m) const { ss_tensormap_free(m); }
};
using PoolPtr = std::unique_ptr<ss_pool, PoolDeleter>;
using EvalPtr = std::unique_ptr<ss_evaluator, EvalDeleter>;
using MapPtr = std::unique_ptr<ss_tensormap, MapDeleter>;

void write_output(const std::string& text, const std::string& out)
{
    if (out.empty() || out == "-") {
        std::fwrite(text.data(), 1, text.size(), stdout);
        std::fflush(stdout);
        return;
    }
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f || !(f << text) || !f.flush()) {
        std::fprintf(stderr, "snapsoup: error: cannot write '%s'\n", out.c_str());
        throw Failure{2};
    }
}

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty())
                out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    if (!cur.empty())
        out.push_back(cur);
    return out;
}

unsigned default_jobs()
{
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : n;
}

struct PoolArgs {
    std::vector<std::string> manifests;
    std::vector<std::string> scores;

    void add(CLI::App* app, bool scores_required = false)
    {
        app->add_option("--manifest", manifests, "Manifest file (repeat to merge fragments)")->required();
        auto* s = app->add_option("--scores", scores, "Score file, CSV or JSONL (repeatable)");
        if (scores_required)
            s->required();
    }

    PoolPtr load() const
    {
        std::vector<const char*> paths;
        for (const auto& m : manifests)
            paths.push_back(m.c_str());
        ss_pool* p = nullptr;
        check(ss_pool_load(paths.data(), paths.size(), &p));
        PoolPtr pool(p);
        for (const auto& s : scores)
            check(ss_pool_ingest_scores(pool.get(), s.c_str()));
        return pool;
    }
};

struct EvalArgs {
    std::string backend = "table";
    std::string truth;
    std::string command;
    long long timeout = 0;
    std::string scratch;

    void add(CLI::App* app)
    {
        app->add_option("--evaluator", backend, "Scoring backend")
            ->check(CLI::IsMember({"table", "synthetic", "external"}))
            ->capture_default_str();
        app->add_option("--truth", truth, "truth.json for the synthetic evaluator (default: next to the manifest)");
        app->add_option("--command", command, "External evaluator command template with {model} and {split}");
        app->add_option("--timeout", timeout,
                        "External evaluator timeout in seconds (default: $SNAPSOUP_EVAL_TIMEOUT_SECS or 3600)");
        app->add_option("--scratch-dir", scratch, "Directory for composite models passed to the external evaluator");
    }

    EvalPtr create(const ss_pool* pool, const PoolArgs& pa, unsigned jobs) const
    {
        json cfg{{"backend", backend}};
        if (backend == "synthetic") {
            std::string t = truth;
            if (t.empty()) {
                const auto dir = std::filesystem::path(pa.manifests.front()).parent_path();
                t = (dir / "truth.json").string();
            }
            cfg["truth"] = t;
        } else if (backend == "external") {
            cfg["command"] = command;
            if (timeout > 0)
                cfg["timeout_secs"] = timeout;
            cfg["max_parallel"] = jobs;
            if (!scratch.empty())
                cfg["scratch_dir"] = scratch;
        }
        ss_evaluator* e = nullptr;
        check(ss_evaluator_create(pool, cfg.dump().c_str(), &e));
        return EvalPtr(e);
    }
};

std::string read_input(const std::string& path)
{
    if (path == "-") {
        std::ostringstream ss;
        ss << std::cin.rdbuf();
        return ss.str();
    }
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        std::fprintf(stderr, "snapsoup: error: cannot open '%s'\n", path.c_str());
        throw Failure{2};
    }
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"snapsoup: checkpoint averaging and model selection for zero-shot cross-lingual transfer"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(ss_version()));

    // validate
    auto* validate = app.add_subcommand("validate", "Load and check a run pool");
    PoolArgs v_pool;
    v_pool.add(validate);
    bool v_weights = false;
    std::string v_write;
    validate->add_flag("--check-weights", v_weights, "Load every TPAK and check names/shapes agree");
    validate->add_option("--write-manifest", v_write, "Write the merged manifest");

    // average
    auto* average = app.add_subcommand("average", "Uniformly average TPAK checkpoints");
    std::vector<std::string> a_inputs;
    std::string a_out;
    unsigned a_jobs = default_jobs();
    bool a_nonfinite = false;
    average->add_option("--inputs", a_inputs, "Input TPAK files")->required()->expected(1, -1);
    average->add_option("--out", a_out, "Output TPAK file")->required();
    average->add_option("--jobs", a_jobs, "Worker threads")->check(CLI::PositiveNumber);
    average->add_flag("--allow-nonfinite", a_nonfinite, "Accept NaN/Inf in inputs");

    // soup
    auto* soup = app.add_subcommand("soup", "Average the top-k snapshots by src-dev score");
    PoolArgs s_pool;
    s_pool.add(soup, true);
    std::size_t s_k = 5;
    std::string s_metric, s_runs, s_out;
    soup->add_option("--k", s_k, "Number of snapshots")->capture_default_str();
    soup->add_option("--metric", s_metric, "Metric (default: the single metric present)");
    soup->add_option("--runs", s_runs, "Comma-separated run ids to draw from (default: all)");
    soup->add_option("--out", s_out, "Write the soup as TPAK");

    // select
    auto* select = app.add_subcommand("select", "Build one run's variant model");
    PoolArgs se_pool;
    se_pool.add(select);
    EvalArgs se_eval;
    se_eval.add(select);
    std::string se_run, se_variant = "src-dev", se_metric, se_out;
    select->add_option("--run", se_run, "Run id")->required();
    select->add_option("--variant", se_variant, "last | src-dev | ca | trg-dev")->capture_default_str();
    select->add_option("--metric", se_metric, "Metric");
    select->add_option("--out", se_out, "Write the model as TPAK");

    // best
    auto* best = app.add_subcommand("best", "Select the best run for a variant (Max-SRC-DEV / Max-TRG-DEV)");
    PoolArgs b_pool;
    b_pool.add(best);
    EvalArgs b_eval;
    b_eval.add(best);
    std::string b_variant = "src-dev", b_by = "src-dev", b_metric, b_runs;
    best->add_option("--variant", b_variant, "last | src-dev | ca | trg-dev")->capture_default_str();
    best->add_option("--by", b_by, "Selection split")
        ->check(CLI::IsMember({"src-dev", "trg-dev"}))
        ->capture_default_str();
    best->add_option("--metric", b_metric, "Metric");
    best->add_option("--runs", b_runs, "Comma-separated candidate run ids (default: all)");

    // protocol
    auto* protocol = app.add_subcommand("protocol", "Run the repeated run-sampling protocol");
    PoolArgs p_pool;
    p_pool.add(protocol);
    EvalArgs p_eval;
    p_eval.add(protocol);
    int p_rmax = 10, p_reps = 10;
    std::uint64_t p_seed = 0;
    std::string p_variants = "last,src-dev,ca", p_strategies = "max-src-dev,acc-avg", p_baseline = "row";
    std::string p_metric, p_languages, p_out;
    std::size_t p_soup_k = 5;
    bool p_fresh = false, p_all = false;
    unsigned p_jobs = default_jobs();
    protocol->add_option("--r-max", p_rmax, "Largest number of sampled runs")->capture_default_str();
    protocol->add_option("--reps", p_reps, "Repetitions")->capture_default_str();
    protocol->add_option("--seed", p_seed, "RNG seed")->capture_default_str();
    protocol->add_option("--variants", p_variants, "Comma-separated variants")->capture_default_str();
    protocol->add_option("--strategies", p_strategies, "Comma-separated: max-src-dev, max-trg-dev, acc-avg, soup")
        ->capture_default_str();
    protocol->add_option("--soup-k", p_soup_k, "Soup size")->capture_default_str();
    protocol->add_flag("--fresh-per-r", p_fresh, "Draw an independent sample for every r");
    protocol->add_flag("--all-runs", p_all, "Sample uniformly over runs instead of distinct configs");
    protocol->add_option("--baseline", p_baseline, "Highlight baseline")
        ->check(CLI::IsMember({"row", "global", "variant"}))
        ->capture_default_str();
    protocol->add_option("--metric", p_metric, "Metric");
    protocol->add_option("--languages", p_languages, "Comma-separated target languages (default: all)");
    protocol->add_option("--out", p_out, "Output JSON (default: stdout)");
    protocol->add_option("--jobs", p_jobs, "Worker threads")->check(CLI::PositiveNumber);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic run pool");
    json sy;
    std::uint64_t sy_dim = 256, sy_seed = 42;
    int sy_configs = 21, sy_seeds = 3, sy_snaps = 10, sy_langs = 5;
    double sy_noise = 0.5, sy_bias = 1.0, sy_ratio = 1.0, sy_init = 1.0, sy_decay = 1.0, sy_delta = 2.0,
           sy_spread = 0.5, sy_s0 = 100.0, sy_curv = 0.0;
    std::string sy_out, sy_metric = "synthetic";
    unsigned sy_jobs = default_jobs();
    synth->add_option("--dim", sy_dim, "Weights per snapshot")->capture_default_str();
    synth->add_option("--configs", sy_configs, "Hyperparameter configs")->capture_default_str();
    synth->add_option("--seeds", sy_seeds, "Seeds per config")->capture_default_str();
    synth->add_option("--snapshots", sy_snaps, "Snapshots per run")->capture_default_str();
    synth->add_option("--sigma-noise", sy_noise, "Per-snapshot noise scale")->capture_default_str();
    synth->add_option("--sigma-bias", sy_bias, "Per-run bias scale")->capture_default_str();
    synth->add_option("--config-bias-ratio", sy_ratio, "Config offset scale relative to sigma-bias")
        ->capture_default_str();
    synth->add_option("--init-scale", sy_init, "Initial displacement scale")->capture_default_str();
    synth->add_option("--decay", sy_decay, "Displacement decay rate")->capture_default_str();
    synth->add_option("--delta", sy_delta, "Source/target optimum offset (per coordinate)")->capture_default_str();
    synth->add_option("--languages", sy_langs, "Target languages")->capture_default_str();
    synth->add_option("--lang-spread", sy_spread, "Spread of per-language optima")->capture_default_str();
    synth->add_option("--s0", sy_s0, "Score at the optimum")->capture_default_str();
    synth->add_option("--curvature", sy_curv, "Score curvature (0: 1/dim)")->capture_default_str();
    synth->add_option("--seed", sy_seed, "RNG seed")->capture_default_str();
    synth->add_option("--metric", sy_metric, "Metric name")->capture_default_str();
    synth->add_option("--out", sy_out, "Output directory")->required();
    synth->add_option("--jobs", sy_jobs, "Worker threads")->check(CLI::PositiveNumber);

    // report
    auto* report = app.add_subcommand("report", "Render a protocol table or grid");
    std::string r_in, r_format = "markdown", r_baseline, r_out, r_variants, r_metric;
    bool r_grid = false;
    PoolArgs r_pool;
    EvalArgs r_eval;
    report->add_option("--in", r_in, "protocol_table or grid JSON ('-' for stdin)");
    report->add_option("--format", r_format, "Output format")
        ->check(CLI::IsMember({"markdown", "md", "csv", "json"}))
        ->capture_default_str();
    report->add_option("--baseline", r_baseline, "Highlight baseline (default: the table's own)")
        ->check(CLI::IsMember({"row", "global", "variant"}));
    report->add_option("--out", r_out, "Output file (default: stdout)");
    report->add_flag("--grid", r_grid, "Build a per-config grid from --manifest/--scores instead of --in");
    report->add_option("--manifest", r_pool.manifests, "Manifest for --grid");
    report->add_option("--scores", r_pool.scores, "Score file for --grid");
    report->add_option("--variants", r_variants, "Grid columns (default: all available)");
    report->add_option("--metric", r_metric, "Metric for --grid");
    r_eval.add(report);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (validate->parsed()) {
            auto pool = v_pool.load();
            const json s = json::parse(take([&] {
                char* out = nullptr;
                check(ss_pool_summary(pool.get(), &out));
                return out;
            }()));
            for (const auto& w : s.at("warnings"))
                std::fprintf(stderr, "snapsoup: warning: %s\n", w.get<std::string>().c_str());
            if (v_weights) {
                char* out = nullptr;
                check(ss_pool_check_weights(pool.get(), &out));
                const json c = json::parse(take(out));
                std::fprintf(stderr, "checked %zu weight files: compatible\n", c.at("checked").get<std::size_t>());
            }
            if (!v_write.empty())
                check(ss_pool_write_manifest(pool.get(), v_write.c_str()));
            std::string metrics;
            for (const auto& m : s.at("metrics"))
                metrics += (metrics.empty() ? "" : ",") + m.get<std::string>();
            std::printf("%zu runs, %zu snapshots\n", s.at("runs").get<std::size_t>(),
                        s.at("snapshots").get<std::size_t>());
            std::printf("%zu configs, %zu score records%s%s\n", s.at("configs").get<std::size_t>(),
                        s.at("scores").get<std::size_t>(), metrics.empty() ? "" : ", metrics: ", metrics.c_str());
            return 0;
        }

        if (average->parsed()) {
            std::vector<MapPtr> maps;
            std::vector<const ss_tensormap*> ptrs;
            for (const auto& in : a_inputs) {
                ss_tensormap* m = nullptr;
                check(ss_tensormap_load(in.c_str(), a_nonfinite ? 1 : 0, &m));
                maps.emplace_back(m);
                ptrs.push_back(m);
            }
            ss_tensormap* avg = nullptr;
            check(ss_tensormap_average(ptrs.data(), ptrs.size(), a_jobs, &avg));
            MapPtr out(avg);
            check(ss_tensormap_save(out.get(), a_out.c_str()));
            return 0;
        }

        if (soup->parsed()) {
            auto pool = s_pool.load();
            json req{{"k", s_k}};
            if (!s_metric.empty())
                req["metric"] = s_metric;
            if (!s_runs.empty())
                req["runs"] = split_list(s_runs);
            ss_tensormap* m = nullptr;
            char* members = nullptr;
            check(ss_soup(pool.get(), req.dump().c_str(), s_out.empty() ? nullptr : &m, &members));
            MapPtr map(m);
            const std::string text = take(members);
            if (map)
                check(ss_tensormap_save(map.get(), s_out.c_str()));
            write_output(json::parse(text).dump(2) + "\n", "");
            return 0;
        }

        if (select->parsed()) {
            auto pool = se_pool.load();
            auto ev = se_eval.create(pool.get(), se_pool, 1);
            json req{{"run", se_run}, {"variant", se_variant}};
            if (!se_metric.empty())
                req["metric"] = se_metric;
            if (!se_out.empty())
                req["out"] = se_out;
            char* out = nullptr;
            check(ss_select(pool.get(), ev.get(), req.dump().c_str(), &out));
            write_output(json::parse(take(out)).dump(2) + "\n", "");
            return 0;
        }

        if (best->parsed()) {
            auto pool = b_pool.load();
            auto ev = b_eval.create(pool.get(), b_pool, 1);
            json req{{"variant", b_variant}, {"by", b_by}};
            if (!b_metric.empty())
                req["metric"] = b_metric;
            if (!b_runs.empty())
                req["runs"] = split_list(b_runs);
            char* out = nullptr;
            check(ss_best(pool.get(), ev.get(), req.dump().c_str(), &out));
            write_output(json::parse(take(out)).dump(2) + "\n", "");
            return 0;
        }

        if (protocol->parsed()) {
            auto pool = p_pool.load();
            auto ev = p_eval.create(pool.get(), p_pool, p_jobs);
            json req{{"r_max", p_rmax},
                     {"repetitions", p_reps},
                     {"seed", p_seed},
                     {"variants", split_list(p_variants)},
                     {"strategies", split_list(p_strategies)},
                     {"soup_k", p_soup_k},
                     {"fresh_per_r", p_fresh},
                     {"sample_all_runs", p_all},
                     {"baseline", p_baseline},
                     {"jobs", p_jobs}};
            if (!p_metric.empty())
                req["metric"] = p_metric;
            if (!p_languages.empty())
                req["languages"] = split_list(p_languages);
            char* out = nullptr;
            check(ss_protocol_run(pool.get(), ev.get(), req.dump().c_str(), &out));
            write_output(take(out), p_out);
            return 0;
        }

        if (synth->parsed()) {
            sy = {{"dim", sy_dim},          {"configs", sy_configs},
                  {"seeds", sy_seeds},      {"snapshots", sy_snaps},
                  {"sigma_noise", sy_noise}, {"sigma_bias", sy_bias},
                  {"config_bias_ratio", sy_ratio}, {"init_scale", sy_init},
                  {"decay", sy_decay},      {"delta_src_trg", sy_delta},
                  {"languages", sy_langs},  {"lang_spread", sy_spread},
                  {"s0", sy_s0},            {"curvature", sy_curv},
                  {"seed", sy_seed},        {"metric", sy_metric},
                  {"jobs", sy_jobs}};
            char* out = nullptr;
            check(ss_synth_generate(sy.dump().c_str(), sy_out.c_str(), &out));
            const json s = json::parse(take(out));
            std::printf("%zu runs, %zu snapshots written to %s\n", s.at("runs").get<std::size_t>(),
                        s.at("snapshots").get<std::size_t>(), sy_out.c_str());
            return 0;
        }

        if (report->parsed()) {
            std::string doc;
            if (r_grid) {
                if (!r_in.empty())
                    usage("report: --grid builds its input from --manifest; do not pass --in");
                if (r_pool.manifests.empty())
                    usage("report --grid needs --manifest");
                auto pool = r_pool.load();
                auto ev = r_eval.create(pool.get(), r_pool, 1);
                json req = json::object();
                if (!r_variants.empty())
                    req["variants"] = split_list(r_variants);
                if (!r_metric.empty())
                    req["metric"] = r_metric;
                char* out = nullptr;
                check(ss_grid_build(pool.get(), ev.get(), req.dump().c_str(), &out));
                doc = take(out);
            } else {
                if (r_in.empty())
                    usage("report needs --in (or --grid with --manifest)");
                doc = read_input(r_in);
            }
            char* text = nullptr;
            check(ss_report_render(doc.c_str(), r_format.c_str(), r_baseline.empty() ? nullptr : r_baseline.c_str(),
                                   &text));
            write_output(take(text), r_out);
            return 0;
        }
    } catch (const Failure& f) {
        return f.code;
    } catch (const json::exception& e) {
        std::fprintf(stderr, "snapsoup: error: %s\n", e.what());
        return 2;
    }
    return 1;
}
