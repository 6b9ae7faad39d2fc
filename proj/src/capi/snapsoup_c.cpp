// SPDX-License-Identifier: Apache-2.0
//
// extern "C" surface over the C++ core. Exceptions never cross this boundary.

#include "snapsoup/snapsoup.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/averaging.hpp"
#include "core/error.hpp"
#include "core/evaluator.hpp"
#include "core/protocol.hpp"
#include "core/registry.hpp"
#include "core/report.hpp"
#include "core/selection.hpp"
#include "core/synthgen.hpp"
#include "core/tensor_store.hpp"
#include "core/weight_store.hpp"

using namespace snapsoup;
using json = nlohmann::json;
namespace fs = std::filesystem;

struct ss_tensormap {
    TensorMap map;
};

struct ss_pool {
    RunPool pool;
};

struct ss_evaluator {
    const ss_pool* pool = nullptr;
    std::unique_ptr<FileWeightStore> store;
    std::unique_ptr<Evaluator> ev;
};

namespace {

thread_local std::string g_last_error;

ss_status status_of(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::Usage:
        return SS_ERR_USAGE;
    case ErrorKind::Data:
        return SS_ERR_DATA;
    case ErrorKind::External:
        return SS_ERR_EXTERNAL;
    case ErrorKind::Io:
        return SS_ERR_IO;
    case ErrorKind::Internal:
        return SS_ERR_INTERNAL;
    }
    return SS_ERR_INTERNAL;
}

template <class F>
ss_status guarded(F&& f) noexcept
{
    g_last_error.clear();
    try {
        f();
        return SS_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return status_of(e.kind());
    } catch (const nlohmann::json::exception& e) {
        g_last_error = std::string("invalid JSON: ") + e.what();
        return SS_ERR_DATA;
    } catch (const fs::filesystem_error& e) {
        g_last_error = e.what();
        return SS_ERR_IO;
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return SS_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return SS_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return SS_ERR_INTERNAL;
    }
}

char* dup_string(const std::string& s)
{
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out)
        throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

template <class T>
void require(const T* p, const char* what)
{
    if (!p)
        usage_error(std::string(what) + " must not be NULL");
}

json parse_request(const char* text)
{
    if (!text || !*text)
        return json::object();
    try {
        json j = json::parse(text);
        if (!j.is_object())
            usage_error("request must be a JSON object");
        return j;
    } catch (const json::exception& e) {
        usage_error(std::string("request is not valid JSON: ") + e.what());
    }
}

template <class T>
T opt(const json& j, const char* key, T fallback)
{
    if (!j.contains(key) || j.at(key).is_null())
        return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        usage_error(std::string("request field '") + key + "' has the wrong type");
    }
}

std::vector<Variant> variants_of(const json& j, const char* key, std::vector<Variant> fallback)
{
    if (!j.contains(key) || j.at(key).is_null())
        return fallback;
    std::vector<Variant> out;
    for (const auto& s : opt<std::vector<std::string>>(j, key, {}))
        out.push_back(parse_variant(s));
    return out;
}

std::vector<const Run*> runs_of(const RunPool& pool, const json& j)
{
    std::vector<const Run*> out;
    for (const auto& id : opt<std::vector<std::string>>(j, "runs", {}))
        out.push_back(&pool.run(id));
    return out;
}

json model_json(const VariantModel& vm)
{
    json j;
    j["run_id"] = vm.run_id;
    j["variant"] = variant_name(vm.variant);
    j["snapshot_index"] = vm.snapshot_index ? json(*vm.snapshot_index) : json();
    j["checkpoint_average"] = vm.checkpoint_average;
    j["language_snapshot"] = vm.language_snapshot;
    j["src_dev"] = vm.src_dev ? json(*vm.src_dev) : json();
    j["trg_dev_mean"] = vm.trg_dev_mean ? json(*vm.trg_dev_mean) : json();
    j["test_mean"] = vm.test_mean ? json(*vm.test_mean) : json();
    j["oracle"] = is_oracle(vm.variant);
    return j;
}

// Borrowed view of the evaluator to use, defaulting to the pool's records.
struct EvalContext {
    std::unique_ptr<ScoreTableEvaluator> table;
    std::unique_ptr<FileWeightStore> local_store;
    const Evaluator* ev = nullptr;
    const WeightStore* store = nullptr;

    EvalContext(const RunPool& pool, const ss_evaluator* e)
    {
        if (e) {
            if (e->pool && &e->pool->pool != &pool)
                usage_error("evaluator was created for a different pool");
            ev = e->ev.get();
            store = e->store.get();
        } else {
            table = std::make_unique<ScoreTableEvaluator>(pool);
            ev = table.get();
        }
        if (!store) {
            local_store = std::make_unique<FileWeightStore>();
            store = local_store.get();
        }
    }
};

LanguageSets available_languages(const Evaluator& ev, const std::string& metric)
{
    return {ev.languages(SplitFamily::TrgDev, metric), ev.languages(SplitFamily::Test, metric)};
}

std::string metric_of(const RunPool& pool, const json& req)
{
    const auto m = opt<std::string>(req, "metric", "");
    return m.empty() ? pool.default_metric() : m;
}

} // namespace

extern "C" {

const char* ss_version(void)
{
    return "0.1.0";
}

const char* ss_last_error(void)
{
    return g_last_error.c_str();
}

void ss_free_string(char* s)
{
    std::free(s);
}

// --- tensor maps ---

ss_status ss_tensormap_load(const char* path, int allow_nonfinite, ss_tensormap** out)
{
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = nullptr;
        auto tm = std::make_unique<ss_tensormap>();
        tm->map = load_tensormap(path, TpakOptions{allow_nonfinite != 0});
        *out = tm.release();
    });
}

ss_status ss_tensormap_save(const ss_tensormap* tm, const char* path)
{
    return guarded([&] {
        require(tm, "tensormap");
        require(path, "path");
        save_tensormap(tm->map, path, TpakOptions{true});
    });
}

ss_status ss_tensormap_describe(const ss_tensormap* tm, char** json_out)
{
    return guarded([&] {
        require(tm, "tensormap");
        require(json_out, "json_out");
        nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
        for (const auto& [name, t] : tm->map)
            tensors[name] = {{"shape", t.shape}, {"numel", t.numel()}};
        nlohmann::ordered_json j;
        j["tensors"] = std::move(tensors);
        j["meta"] = tm->map.meta();
        j["total_elements"] = tm->map.total_elements();
        *json_out = dup_string(j.dump());
    });
}

ss_status ss_tensormap_compat(const ss_tensormap* a, const ss_tensormap* b, char** json_out)
{
    return guarded([&] {
        require(a, "a");
        require(b, "b");
        require(json_out, "json_out");
        const auto r = check_compatibility(a->map, b->map);
        json mism = json::array();
        for (const auto& m : r.shape_mismatches)
            mism.push_back({{"name", m.name}, {"shape_a", m.shape_a}, {"shape_b", m.shape_b}});
        json j{{"compatible", r.compatible()},
               {"missing_in_a", r.missing_in_a},
               {"missing_in_b", r.missing_in_b},
               {"shape_mismatches", mism},
               {"summary", r.summary()}};
        *json_out = dup_string(j.dump());
    });
}

ss_status ss_tensormap_bit_equal(const ss_tensormap* a, const ss_tensormap* b, int* equal_out)
{
    return guarded([&] {
        require(a, "a");
        require(b, "b");
        require(equal_out, "equal_out");
        *equal_out = bit_equal(a->map, b->map) ? 1 : 0;
    });
}

ss_status ss_tensormap_average(const ss_tensormap* const* maps, size_t n, unsigned jobs, ss_tensormap** out)
{
    return guarded([&] {
        require(out, "out");
        *out = nullptr;
        if (n > 0)
            require(maps, "maps");
        std::vector<const TensorMap*> ptrs;
        for (size_t i = 0; i < n; ++i) {
            require(maps[i], "maps[i]");
            ptrs.push_back(&maps[i]->map);
        }
        auto tm = std::make_unique<ss_tensormap>();
        tm->map = average_checkpoints(std::span<const TensorMap* const>(ptrs), jobs);
        *out = tm.release();
    });
}

void ss_tensormap_free(ss_tensormap* tm)
{
    delete tm;
}

// --- pools ---

ss_status ss_pool_load(const char* const* manifest_paths, size_t n, ss_pool** out)
{
    return guarded([&] {
        require(out, "out");
        *out = nullptr;
        if (n == 0)
            usage_error("at least one manifest is required");
        require(manifest_paths, "manifest_paths");
        std::vector<fs::path> paths;
        for (size_t i = 0; i < n; ++i) {
            require(manifest_paths[i], "manifest path");
            paths.emplace_back(manifest_paths[i]);
        }
        auto p = std::make_unique<ss_pool>();
        p->pool = load_manifests(paths);
        *out = p.release();
    });
}

ss_status ss_pool_ingest_scores(ss_pool* pool, const char* path)
{
    return guarded([&] {
        require(pool, "pool");
        require(path, "path");
        pool->pool = ingest_scores(std::move(pool->pool), fs::path(path));
    });
}

ss_status ss_pool_summary(const ss_pool* pool, char** json_out)
{
    return guarded([&] {
        require(pool, "pool");
        require(json_out, "json_out");
        const auto& p = pool->pool;
        nlohmann::ordered_json j;
        j["runs"] = p.runs().size();
        j["snapshots"] = p.snapshot_count();
        j["configs"] = p.runs_by_config().size();
        j["snapshots_per_run"] = p.snapshots_per_run();
        j["scores"] = p.scores().size();
        j["metrics"] = p.metrics();
        j["warnings"] = p.warnings();
        *json_out = dup_string(j.dump());
    });
}

ss_status ss_pool_check_weights(const ss_pool* pool, char** json_out)
{
    return guarded([&] {
        require(pool, "pool");
        require(json_out, "json_out");
        std::optional<TensorMap> reference;
        std::string reference_id;
        std::size_t checked = 0;
        for (const auto& run : pool->pool.runs())
            for (const auto& s : run.snapshots) {
                if (!s.weights_path)
                    data_error("run '" + run.run_id + "' snapshot " + std::to_string(s.index) + " has no weight file");
                TensorMap tm = load_tensormap(*s.weights_path);
                const std::string id = run.run_id + "@" + std::to_string(s.index);
                if (!reference) {
                    reference = std::move(tm);
                    reference_id = id;
                } else {
                    const auto r = check_compatibility(*reference, tm);
                    if (!r.compatible())
                        data_error(id + " is not compatible with " + reference_id + ": " + r.summary());
                }
                ++checked;
            }
        json j{{"checked", checked}, {"compatible", true}};
        *json_out = dup_string(j.dump());
    });
}

ss_status ss_pool_write_manifest(const ss_pool* pool, const char* path)
{
    return guarded([&] {
        require(pool, "pool");
        require(path, "path");
        std::FILE* f = std::fopen(path, "wb");
        if (!f)
            fail(ErrorKind::Io, std::string("cannot write '") + path + "'");
        const std::string text = manifest_to_json(pool->pool).dump(2) + "\n";
        const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
        if (std::fclose(f) != 0 || !ok)
            fail(ErrorKind::Io, std::string("cannot write '") + path + "'");
    });
}

void ss_pool_free(ss_pool* pool)
{
    delete pool;
}

// --- evaluators ---

ss_status ss_evaluator_create(const ss_pool* pool, const char* config_json, ss_evaluator** out)
{
    return guarded([&] {
        require(pool, "pool");
        require(out, "out");
        *out = nullptr;
        const json cfg = parse_request(config_json);
        const auto backend = opt<std::string>(cfg, "backend", "table");
        auto e = std::make_unique<ss_evaluator>();
        e->pool = pool;
        if (backend == "table") {
            e->ev = std::make_unique<ScoreTableEvaluator>(pool->pool);
        } else if (backend == "synthetic") {
            const auto truth = opt<std::string>(cfg, "truth", "");
            if (truth.empty())
                usage_error("synthetic evaluator needs \"truth\" (path to truth.json)");
            e->store = std::make_unique<FileWeightStore>();
            e->ev = std::make_unique<SyntheticQuadraticEvaluator>(load_truth(truth), &pool->pool, e->store.get());
        } else if (backend == "external") {
            ExternalConfig ec;
            ec.command_template = opt<std::string>(cfg, "command", "");
            if (ec.command_template.empty())
                usage_error("external evaluator needs \"command\"");
            const auto secs = opt<long long>(cfg, "timeout_secs", 0);
            ec.timeout = secs > 0 ? std::chrono::seconds(secs) : timeout_from_env(std::chrono::seconds(3600));
            ec.max_parallel = opt<unsigned>(cfg, "max_parallel", 1u);
            ec.scratch_dir = opt<std::string>(cfg, "scratch_dir", "");
            e->store = std::make_unique<FileWeightStore>();
            e->ev = std::make_unique<ExternalCommandEvaluator>(std::move(ec), pool->pool, e->store.get());
        } else {
            usage_error("unknown evaluator backend '" + backend + "' (expected table, synthetic or external)");
        }
        *out = e.release();
    });
}

void ss_evaluator_free(ss_evaluator* ev)
{
    delete ev;
}

// --- workflows ---

ss_status ss_soup(const ss_pool* pool, const char* request_json, ss_tensormap** out, char** members_json)
{
    return guarded([&] {
        require(pool, "pool");
        const json req = parse_request(request_json);
        const auto& p = pool->pool;
        const auto k = opt<std::size_t>(req, "k", 5);
        const std::string metric = metric_of(p, req);
        const auto runs = runs_of(p, req);
        const auto members = soup_members(p, k, metric, runs);
        if (out) {
            *out = nullptr;
            FileWeightStore store;
            auto tm = std::make_unique<ss_tensormap>();
            tm->map = soup(p, k, metric, store, runs);
            *out = tm.release();
        }
        if (members_json) {
            json ms = json::array();
            for (const auto& m : members)
                ms.push_back({{"run_id", m.run_id}, {"snapshot_index", m.snapshot_index}, {"src_dev", m.src_dev}});
            *members_json = dup_string(json{{"key", soup_key(members)}, {"members", ms}}.dump());
        }
    });
}

ss_status ss_select(const ss_pool* pool, const ss_evaluator* ev, const char* request_json, char** json_out)
{
    return guarded([&] {
        require(pool, "pool");
        require(json_out, "json_out");
        const json req = parse_request(request_json);
        const auto& p = pool->pool;
        const auto run_id = opt<std::string>(req, "run", "");
        if (run_id.empty())
            usage_error("select needs \"run\"");
        const Variant v = parse_variant(opt<std::string>(req, "variant", "src-dev"));
        const auto out_path = opt<std::string>(req, "out", "");
        if (!out_path.empty() && v == Variant::TrgDev)
            usage_error("trg-dev selects one snapshot per language and has no single model to write");
        const std::string metric = metric_of(p, req);
        EvalContext ctx(p, ev);
        RecordFirstEvaluator scorer(p, *ctx.ev);
        const auto langs = available_languages(scorer, metric);
        VariantOptions vo;
        vo.scorer = &scorer;
        vo.weights = (!out_path.empty() || scorer.needs_weights()) ? ctx.store : nullptr;
        vo.languages = langs.trg_dev;
        auto vm = build_variant(p, p.run(run_id), v, metric, vo);
        resolve_scores(vm, scorer, metric, langs);
        if (!out_path.empty())
            save_tensormap(*vm.weights, out_path);
        *json_out = dup_string(model_json(vm).dump());
    });
}

ss_status ss_best(const ss_pool* pool, const ss_evaluator* ev, const char* request_json, char** json_out)
{
    return guarded([&] {
        require(pool, "pool");
        require(json_out, "json_out");
        const json req = parse_request(request_json);
        const auto& p = pool->pool;
        const Variant v = parse_variant(opt<std::string>(req, "variant", "src-dev"));
        const auto by = opt<std::string>(req, "by", "src-dev");
        if (by != "src-dev" && by != "trg-dev")
            usage_error("\"by\" must be src-dev or trg-dev");
        if (by == "src-dev" && v == Variant::TrgDev)
            usage_error("trg-dev variants have no single src-dev model; use by=trg-dev");
        const std::string metric = metric_of(p, req);
        EvalContext ctx(p, ev);
        RecordFirstEvaluator scorer(p, *ctx.ev);
        auto langs = available_languages(scorer, metric);
        if (by == "trg-dev" && langs.trg_dev.empty())
            data_error("by=trg-dev needs target dev scores, none found for metric '" + metric + "'");
        VariantOptions vo;
        vo.scorer = &scorer;
        vo.weights = scorer.needs_weights() ? ctx.store : nullptr;
        vo.languages = langs.trg_dev;
        auto runs = runs_of(p, req);
        if (runs.empty())
            for (const auto& r : p.runs())
                runs.push_back(&r);
        std::vector<VariantModel> models;
        for (const Run* r : runs) {
            models.push_back(build_variant(p, *r, v, metric, vo));
            resolve_scores(models.back(), scorer, metric, langs);
        }
        const std::size_t idx = by == "src-dev" ? max_src_dev_index(models) : max_trg_dev_index(models);
        json j{{"by", by}, {"candidates", models.size()}, {"oracle", by == "trg-dev" || is_oracle(v)},
               {"selected", model_json(models[idx])}};
        *json_out = dup_string(j.dump());
    });
}

ss_status ss_protocol_run(const ss_pool* pool, const ss_evaluator* ev, const char* config_json, char** table_json)
{
    return guarded([&] {
        require(pool, "pool");
        require(table_json, "table_json");
        const json req = parse_request(config_json);
        const auto& p = pool->pool;
        ProtocolConfig cfg;
        cfg.r_max = opt<int>(req, "r_max", cfg.r_max);
        cfg.repetitions = opt<int>(req, "repetitions", cfg.repetitions);
        cfg.rng_seed = opt<std::uint64_t>(req, "seed", cfg.rng_seed);
        cfg.variants = variants_of(req, "variants", cfg.variants);
        if (req.contains("strategies") && !req.at("strategies").is_null()) {
            cfg.strategies.clear();
            for (const auto& s : opt<std::vector<std::string>>(req, "strategies", {}))
                cfg.strategies.push_back(parse_strategy(s));
        }
        cfg.metric = opt<std::string>(req, "metric", "");
        cfg.target_languages = opt<std::vector<std::string>>(req, "languages", {});
        cfg.soup_k = opt<std::size_t>(req, "soup_k", cfg.soup_k);
        cfg.fresh_per_r = opt<bool>(req, "fresh_per_r", false);
        cfg.sample_all_runs = opt<bool>(req, "sample_all_runs", false);
        cfg.highlight.baseline = parse_baseline(opt<std::string>(req, "baseline", "row"));
        cfg.jobs = opt<unsigned>(req, "jobs", 1u);
        EvalContext ctx(p, ev);
        const auto table = run_protocol(p, *ctx.ev, cfg, ctx.store);
        *table_json = dup_string(table_to_json(table).dump(2) + "\n");
    });
}

ss_status ss_grid_build(const ss_pool* pool, const ss_evaluator* ev, const char* request_json, char** grid_json)
{
    return guarded([&] {
        require(pool, "pool");
        require(grid_json, "grid_json");
        const json req = parse_request(request_json);
        const auto& p = pool->pool;
        const std::string metric = metric_of(p, req);
        EvalContext ctx(p, ev);
        RecordFirstEvaluator scorer(p, *ctx.ev);
        std::vector<Variant> fallback{Variant::Last, Variant::SrcDev, Variant::Ca};
        if (!scorer.languages(SplitFamily::TrgDev, metric).empty())
            fallback.push_back(Variant::TrgDev);
        const auto variants = variants_of(req, "variants", fallback);
        const Grid grid = build_grid(p, scorer, variants, metric, ctx.store);
        *grid_json = dup_string(grid_to_json(grid).dump(2) + "\n");
    });
}

ss_status ss_synth_generate(const char* config_json, const char* out_dir, char** summary_json)
{
    return guarded([&] {
        require(out_dir, "out_dir");
        const json req = parse_request(config_json);
        SynthConfig c;
        c.dim = opt<std::uint64_t>(req, "dim", c.dim);
        c.n_configs = opt<int>(req, "configs", c.n_configs);
        c.seeds_per_config = opt<int>(req, "seeds", c.seeds_per_config);
        c.snapshots_per_run = opt<int>(req, "snapshots", c.snapshots_per_run);
        c.sigma_noise = opt<double>(req, "sigma_noise", c.sigma_noise);
        c.sigma_bias = opt<double>(req, "sigma_bias", c.sigma_bias);
        c.config_bias_ratio = opt<double>(req, "config_bias_ratio", c.config_bias_ratio);
        c.init_scale = opt<double>(req, "init_scale", c.init_scale);
        c.decay = opt<double>(req, "decay", c.decay);
        c.delta_src_trg = opt<double>(req, "delta_src_trg", c.delta_src_trg);
        c.languages = opt<int>(req, "languages", c.languages);
        c.lang_spread = opt<double>(req, "lang_spread", c.lang_spread);
        c.s0 = opt<double>(req, "s0", c.s0);
        c.curvature = opt<double>(req, "curvature", c.curvature);
        c.rng_seed = opt<std::uint64_t>(req, "seed", c.rng_seed);
        c.metric = opt<std::string>(req, "metric", c.metric);
        const auto sp = generate(c, opt<unsigned>(req, "jobs", 1u));
        write_synth_pool(sp, out_dir);
        if (summary_json) {
            json j{{"runs", sp.pool.runs().size()},
                   {"snapshots", sp.pool.snapshot_count()},
                   {"scores", sp.pool.scores().size()},
                   {"languages", sp.truth.languages()},
                   {"config", synth_config_to_json(c)}};
            *summary_json = dup_string(j.dump());
        }
    });
}

ss_status ss_report_render(const char* doc_json, const char* format, const char* baseline, char** text_out)
{
    return guarded([&] {
        require(doc_json, "doc_json");
        require(text_out, "text_out");
        nlohmann::ordered_json doc;
        try {
            doc = nlohmann::ordered_json::parse(doc_json);
        } catch (const json::exception& e) {
            data_error(std::string("report input is not valid JSON: ") + e.what());
        }
        const Format fmt = parse_format(format ? format : "markdown");
        std::optional<HighlightBaseline> b;
        if (baseline && *baseline)
            b = parse_baseline(baseline);
        *text_out = dup_string(render_document(doc, fmt, b));
    });
}

} // extern "C"
