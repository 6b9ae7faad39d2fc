// SPDX-License-Identifier: Apache-2.0

#include "core/protocol.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

#include "core/averaging.hpp"
#include "core/error.hpp"

namespace snapsoup {

std::string_view strategy_name(Strategy s)
{
    switch (s) {
    case Strategy::MaxSrcDev:
        return "max-src-dev";
    case Strategy::MaxTrgDev:
        return "max-trg-dev";
    case Strategy::AccumulativeAvg:
        return "acc-avg";
    case Strategy::Soup:
        return "soup";
    }
    return "?";
}

std::string_view strategy_label(Strategy s)
{
    switch (s) {
    case Strategy::MaxSrcDev:
        return "Max-SRC-DEV";
    case Strategy::MaxTrgDev:
        return "Max-TRG-DEV";
    case Strategy::AccumulativeAvg:
        return "Acc. avg";
    case Strategy::Soup:
        return "Soup";
    }
    return "?";
}

Strategy parse_strategy(std::string_view text)
{
    if (text == "max-src-dev" || text == "MAX_SRC_DEV")
        return Strategy::MaxSrcDev;
    if (text == "max-trg-dev" || text == "MAX_TRG_DEV")
        return Strategy::MaxTrgDev;
    if (text == "acc-avg" || text == "ACCUMULATIVE_AVG" || text == "accumulative")
        return Strategy::AccumulativeAvg;
    if (text == "soup" || text == "SOUP")
        return Strategy::Soup;
    usage_error("unknown strategy '" + std::string(text) + "' (expected max-src-dev, max-trg-dev, acc-avg or soup)");
}

std::string_view baseline_name(HighlightBaseline b)
{
    switch (b) {
    case HighlightBaseline::Row:
        return "row";
    case HighlightBaseline::Global:
        return "global";
    case HighlightBaseline::Variant:
        return "variant";
    }
    return "?";
}

HighlightBaseline parse_baseline(std::string_view text)
{
    if (text == "row")
        return HighlightBaseline::Row;
    if (text == "global")
        return HighlightBaseline::Global;
    if (text == "variant")
        return HighlightBaseline::Variant;
    usage_error("unknown highlight baseline '" + std::string(text) + "' (expected row, global or variant)");
}

std::string_view level_name(HighlightLevel l)
{
    return l == HighlightLevel::Strong ? "strong" : "weak";
}

bool CellResult::oracle() const
{
    return strategy == Strategy::MaxTrgDev || (variant && is_oracle(*variant));
}

const CellResult* ProtocolTable::find(int r, std::optional<Variant> v, Strategy s) const
{
    for (const auto& c : cells)
        if (c.r == r && c.variant == v && c.strategy == s)
            return &c;
    return nullptr;
}

// --- highlights --------------------------------------------------------------

std::vector<Highlight> compute_highlights(std::span<const CellResult> cells, const HighlightRule& rule)
{
    if (!(rule.strong_threshold > rule.weak_band) || rule.weak_band < 0)
        usage_error("highlight rule needs strong_threshold > weak_band >= 0");
    constexpr double slack = 1e-9;
    std::vector<Highlight> out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& c = cells[i];
        if (c.strategy != Strategy::AccumulativeAvg || c.r < 2 || !c.variant)
            continue;
        std::optional<double> base;
        for (const auto& d : cells) {
            if (d.strategy != Strategy::MaxSrcDev)
                continue;
            if (rule.baseline != HighlightBaseline::Global && d.r != c.r)
                continue;
            if (rule.baseline == HighlightBaseline::Variant && d.variant != c.variant)
                continue;
            if (!base || d.mean > *base)
                base = d.mean;
        }
        if (!base)
            continue;
        const double diff = c.mean - *base;
        if (diff >= rule.strong_threshold - slack)
            out.push_back({i, HighlightLevel::Strong, diff, *base});
        else if (std::fabs(diff) <= rule.weak_band + slack)
            out.push_back({i, HighlightLevel::Weak, diff, *base});
    }
    return out;
}

// --- aggregation -------------------------------------------------------------

CellResult aggregate(std::span<const double> values)
{
    if (values.empty())
        data_error("cannot aggregate an empty list of repetition values");
    double mean = 0.0;
    double m2 = 0.0;
    std::size_t n = 0;
    for (double x : values) {
        if (!std::isfinite(x))
            data_error("non-finite repetition value");
        ++n;
        const double d = x - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (x - mean);
    }
    CellResult c;
    c.mean = mean;
    c.std = std::sqrt(std::max(0.0, m2 / static_cast<double>(n)));
    c.n_reps = static_cast<int>(n);
    c.values.assign(values.begin(), values.end());
    return c;
}

// --- sampling ----------------------------------------------------------------

std::vector<const Run*> sample_runs(const RunPool& pool, int r, CounterRng& rng, bool all_runs)
{
    if (r < 1)
        usage_error("sample size r must be >= 1");
    std::vector<const Run*> out;
    if (all_runs) {
        std::vector<const Run*> runs;
        for (const auto& run : pool.runs())
            runs.push_back(&run);
        if (static_cast<std::size_t>(r) > runs.size())
            usage_error("r=" + std::to_string(r) + " exceeds the " + std::to_string(runs.size()) + " runs in the pool");
        for (std::size_t i = 0; i < static_cast<std::size_t>(r); ++i) {
            std::swap(runs[i], runs[i + rng.below(runs.size() - i)]);
            out.push_back(runs[i]);
        }
        return out;
    }

    std::vector<std::vector<const Run*>> configs;
    for (auto& [_, runs] : pool.runs_by_config())
        configs.push_back(std::move(runs));
    if (static_cast<std::size_t>(r) > configs.size())
        usage_error("r=" + std::to_string(r) + " exceeds the " + std::to_string(configs.size()) +
                    " distinct (lr, batch size) configs in the pool");
    for (std::size_t i = 0; i < static_cast<std::size_t>(r); ++i) {
        std::swap(configs[i], configs[i + rng.below(configs.size() - i)]);
        const auto& seeds = configs[i];
        out.push_back(seeds[rng.below(seeds.size())]);
    }
    return out;
}

std::uint64_t repetition_stream(int rep, int r)
{
    constexpr std::uint64_t kProtocolDomain = 0x70726f746f636f6cull; // "protocol"
    return stream_id(kProtocolDomain, static_cast<std::uint64_t>(rep), static_cast<std::uint64_t>(r));
}

std::string average_key(Variant v, std::vector<std::string> run_ids)
{
    std::sort(run_ids.begin(), run_ids.end());
    std::string key = "avg:" + std::string(variant_name(v)) + ":";
    for (std::size_t i = 0; i < run_ids.size(); ++i) {
        if (i)
            key += '+';
        key += run_ids[i];
    }
    return key;
}

std::string display_cell(double mean, double std)
{
    auto one = [](double x) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.1f", x);
        std::string s(buf);
        if (s == "-0.0")
            s = "0.0";
        return s;
    };
    return one(mean) + "_{" + one(std) + "}";
}

// --- protocol ----------------------------------------------------------------

namespace {

struct CellSpec {
    Strategy strategy;
    std::optional<Variant> variant;
};

bool contains(const std::vector<Strategy>& v, Strategy s)
{
    return std::find(v.begin(), v.end(), s) != v.end();
}

void validate(const RunPool& pool, const ProtocolConfig& cfg)
{
    if (cfg.repetitions < 1)
        usage_error("repetitions must be >= 1");
    if (cfg.r_max < 1)
        usage_error("r_max must be >= 1");
    const std::size_t limit = cfg.sample_all_runs ? pool.runs().size() : pool.runs_by_config().size();
    if (static_cast<std::size_t>(cfg.r_max) > limit)
        usage_error("r_max=" + std::to_string(cfg.r_max) + " exceeds the " + std::to_string(limit) +
                    (cfg.sample_all_runs ? " runs" : " distinct (lr, batch size) configs") + " in the pool");
    if (cfg.strategies.empty())
        usage_error("no strategies requested");
    const bool needs_variants = std::any_of(cfg.strategies.begin(), cfg.strategies.end(),
                                            [](Strategy s) { return s != Strategy::Soup; });
    if (needs_variants && cfg.variants.empty())
        usage_error("no variants requested");
    for (Variant v : cfg.variants) {
        if (v != Variant::TrgDev)
            continue;
        if (contains(cfg.strategies, Strategy::MaxSrcDev))
            usage_error("max-src-dev cannot select trg-dev variants: they have no single src-dev model");
        if (contains(cfg.strategies, Strategy::AccumulativeAvg))
            usage_error("acc-avg cannot average trg-dev variants: they have no single weight-space model");
    }
    if (contains(cfg.strategies, Strategy::Soup)) {
        if (cfg.soup_k == 0)
            usage_error("soup size k must be >= 1");
        // r=1 offers only one run's snapshots as candidates.
        if (cfg.soup_k > static_cast<std::size_t>(pool.snapshots_per_run()))
            usage_error("soup size k=" + std::to_string(cfg.soup_k) + " exceeds the " +
                        std::to_string(pool.snapshots_per_run()) + " snapshots available at r=1");
    }
}

double target_mean(const Evaluator& scorer, const ModelRef& model, const std::vector<std::string>& langs,
                   const std::string& metric)
{
    double sum = 0.0;
    for (const auto& lang : langs)
        sum += scorer.score(model, {SplitId::test(lang), metric});
    return sum / static_cast<double>(langs.size());
}

nlohmann::ordered_json config_echo(const RunPool& pool, const Evaluator& ev, const ProtocolConfig& cfg,
                                   const std::string& metric, const std::vector<std::string>& langs)
{
    nlohmann::ordered_json j;
    j["r_max"] = cfg.r_max;
    j["repetitions"] = cfg.repetitions;
    auto& vs = j["variants"] = nlohmann::ordered_json::array();
    for (Variant v : cfg.variants)
        vs.push_back(variant_name(v));
    auto& ss = j["strategies"] = nlohmann::ordered_json::array();
    for (Strategy s : cfg.strategies)
        ss.push_back(strategy_name(s));
    j["rng"] = CounterRng::algorithm;
    j["rng_seed"] = cfg.rng_seed;
    j["metric"] = metric;
    j["target_split"] = "test";
    j["target_languages"] = langs;
    if (contains(cfg.strategies, Strategy::Soup))
        j["soup_k"] = cfg.soup_k;
    j["sampling"] = cfg.sample_all_runs ? "all-runs" : "distinct-config";
    j["nesting"] = cfg.fresh_per_r ? "fresh" : "prefix";
    j["evaluator"] = backend_name(ev.backend());
    j["highlight_baseline"] = baseline_name(cfg.highlight.baseline);
    j["pool"] = {{"runs", pool.runs().size()}, {"configs", pool.runs_by_config().size()}};
    return j;
}

} // namespace

ProtocolTable run_protocol(const RunPool& pool, const Evaluator& ev, const ProtocolConfig& cfg,
                           const WeightStore* weights)
{
    validate(pool, cfg);
    const bool materialize = ev.needs_weights();
    if (materialize && !weights)
        usage_error(std::string(backend_name(ev.backend())) + " evaluator needs a weight store");
    const std::string metric = cfg.metric.empty() ? pool.default_metric() : cfg.metric;
    RecordFirstEvaluator scorer(pool, ev);

    LanguageSets langs;
    langs.test = cfg.target_languages.empty() ? ev.languages(SplitFamily::Test, metric) : cfg.target_languages;
    if (langs.test.empty())
        data_error("no target (test) languages for metric '" + metric + "'");
    const bool wants_trg = contains(cfg.strategies, Strategy::MaxTrgDev) ||
                           std::find(cfg.variants.begin(), cfg.variants.end(), Variant::TrgDev) != cfg.variants.end();
    if (wants_trg) {
        langs.trg_dev = ev.languages(SplitFamily::TrgDev, metric);
        if (langs.trg_dev.empty())
            data_error("max-trg-dev and trg-dev need target dev languages, none found for metric '" + metric + "'");
    }

    std::vector<CellSpec> specs;
    for (Strategy s : cfg.strategies) {
        if (s == Strategy::Soup)
            specs.push_back({s, std::nullopt});
        else
            for (Variant v : cfg.variants)
                specs.push_back({s, v});
    }

    // Variant models of every pool run, scored once.
    const auto& runs = pool.runs();
    const std::size_t nv = cfg.variants.size();
    std::vector<VariantModel> models(runs.size() * nv);
    {
        VariantOptions opts;
        opts.scorer = &scorer;
        opts.weights = materialize ? weights : nullptr;
        opts.languages = langs.trg_dev;
        for (std::size_t i = 0; i < runs.size(); ++i)
            for (std::size_t k = 0; k < nv; ++k) {
                auto& vm = models[i * nv + k];
                vm = build_variant(pool, runs[i], cfg.variants[k], metric, opts);
                resolve_scores(vm, scorer, metric, langs);
            }
    }
    auto model_of = [&](const Run* run, std::size_t k) -> const VariantModel& {
        return models[static_cast<std::size_t>(run - runs.data()) * nv + k];
    };
    auto variant_slot = [&](Variant v) {
        return static_cast<std::size_t>(std::find(cfg.variants.begin(), cfg.variants.end(), v) - cfg.variants.begin());
    };

    const auto r_max = static_cast<std::size_t>(cfg.r_max);
    const auto reps = static_cast<std::size_t>(cfg.repetitions);
    std::vector<std::vector<double>> values(r_max * specs.size(), std::vector<double>(reps));

    auto cell_value = [&](const CellSpec& cs, std::span<const Run* const> sample) -> double {
        if (cs.strategy == Strategy::Soup) {
            const auto members = soup_members(pool, cfg.soup_k, metric, sample);
            std::shared_ptr<const TensorMap> w;
            if (materialize) {
                std::vector<std::shared_ptr<const TensorMap>> held;
                std::vector<const TensorMap*> ptrs;
                for (const auto& m : members) {
                    held.push_back(weights->load(pool.run(m.run_id), m.snapshot_index));
                    ptrs.push_back(held.back().get());
                }
                w = std::make_shared<const TensorMap>(average_checkpoints(std::span<const TensorMap* const>(ptrs)));
            }
            return target_mean(scorer, ModelRef::composite(soup_key(members), w), langs.test, metric);
        }

        const std::size_t k = variant_slot(*cs.variant);
        std::vector<VariantModel> subset;
        subset.reserve(sample.size());
        for (const Run* run : sample)
            subset.push_back(model_of(run, k));

        switch (cs.strategy) {
        case Strategy::MaxSrcDev:
            return *subset[max_src_dev_index(subset)].test_mean;
        case Strategy::MaxTrgDev:
            return *subset[max_trg_dev_index(subset)].test_mean;
        case Strategy::AccumulativeAvg: {
            if (subset.size() == 1)
                return *subset.front().test_mean;
            // Canonical run_id order keeps the float result independent of the
            // sampling order, so equal keys always denote bit-equal weights.
            std::sort(subset.begin(), subset.end(),
                      [](const VariantModel& a, const VariantModel& b) { return a.run_id < b.run_id; });
            std::vector<std::string> ids;
            std::vector<const TensorMap*> ptrs;
            for (const auto& vm : subset) {
                ids.push_back(vm.run_id);
                ptrs.push_back(vm.weights.get());
            }
            std::shared_ptr<const TensorMap> w;
            if (materialize)
                w = std::make_shared<const TensorMap>(average_checkpoints(std::span<const TensorMap* const>(ptrs)));
            return target_mean(scorer, ModelRef::composite(average_key(*cs.variant, std::move(ids)), w),
                               langs.test, metric);
        }
        case Strategy::Soup:
            break;
        }
        fail(ErrorKind::Internal, "unhandled strategy");
    };

    auto run_repetition = [&](std::size_t rep) {
        std::vector<const Run*> nested;
        if (!cfg.fresh_per_r) {
            CounterRng rng(cfg.rng_seed, repetition_stream(static_cast<int>(rep)));
            nested = sample_runs(pool, cfg.r_max, rng, cfg.sample_all_runs);
        }
        for (std::size_t r = 1; r <= r_max; ++r) {
            std::vector<const Run*> fresh;
            std::span<const Run* const> sample;
            if (cfg.fresh_per_r) {
                CounterRng rng(cfg.rng_seed, repetition_stream(static_cast<int>(rep), static_cast<int>(r)));
                fresh = sample_runs(pool, static_cast<int>(r), rng, cfg.sample_all_runs);
                sample = fresh;
            } else {
                sample = std::span<const Run* const>(nested.data(), r);
            }
            for (std::size_t s = 0; s < specs.size(); ++s)
                values[(r - 1) * specs.size() + s][rep] = cell_value(specs[s], sample);
        }
    };

    const unsigned workers = std::max(1u, std::min<unsigned>(cfg.jobs, static_cast<unsigned>(reps)));
    if (workers == 1) {
        for (std::size_t rep = 0; rep < reps; ++rep)
            run_repetition(rep);
    } else {
        std::vector<std::exception_ptr> errors(reps);
        std::atomic<std::size_t> next{0};
        {
            std::vector<std::jthread> threads;
            for (unsigned w = 0; w < workers; ++w)
                threads.emplace_back([&] {
                    for (std::size_t rep = next++; rep < reps; rep = next++) {
                        try {
                            run_repetition(rep);
                        } catch (...) {
                            errors[rep] = std::current_exception();
                        }
                    }
                });
        }
        for (auto& e : errors)
            if (e)
                std::rethrow_exception(e);
    }

    ProtocolTable table;
    table.config = config_echo(pool, ev, cfg, metric, langs.test);
    for (std::size_t r = 1; r <= r_max; ++r)
        for (std::size_t s = 0; s < specs.size(); ++s) {
            CellResult c = aggregate(values[(r - 1) * specs.size() + s]);
            c.r = static_cast<int>(r);
            c.variant = specs[s].variant;
            c.strategy = specs[s].strategy;
            table.cells.push_back(std::move(c));
        }
    table.highlights = compute_highlights(table.cells, cfg.highlight);
    return table;
}

// --- JSON --------------------------------------------------------------------

nlohmann::ordered_json table_to_json(const ProtocolTable& table)
{
    std::vector<const Highlight*> by_cell(table.cells.size(), nullptr);
    for (const auto& h : table.highlights)
        if (h.cell < by_cell.size())
            by_cell[h.cell] = &h;

    nlohmann::ordered_json cells = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < table.cells.size(); ++i) {
        const auto& c = table.cells[i];
        nlohmann::ordered_json jc;
        jc["r"] = c.r;
        jc["variant"] = c.variant ? nlohmann::ordered_json(variant_name(*c.variant)) : nlohmann::ordered_json();
        jc["strategy"] = strategy_name(c.strategy);
        jc["mean"] = c.mean;
        jc["std"] = c.std;
        jc["n_reps"] = c.n_reps;
        jc["values"] = c.values;
        jc["display"] = display_cell(c.mean, c.std);
        jc["oracle"] = c.oracle();
        jc["highlight"] = by_cell[i] ? nlohmann::ordered_json(level_name(by_cell[i]->level)) : nlohmann::ordered_json();
        cells.push_back(std::move(jc));
    }
    nlohmann::ordered_json hs = nlohmann::ordered_json::array();
    for (const auto& h : table.highlights) {
        const auto& c = table.cells[h.cell];
        hs.push_back({{"cell", h.cell},
                      {"r", c.r},
                      {"variant", c.variant ? nlohmann::ordered_json(variant_name(*c.variant)) : nlohmann::ordered_json()},
                      {"strategy", strategy_name(c.strategy)},
                      {"level", level_name(h.level)},
                      {"diff", h.diff},
                      {"baseline", h.baseline}});
    }
    nlohmann::ordered_json j;
    j["kind"] = "protocol_table";
    j["config"] = table.config;
    j["cells"] = std::move(cells);
    j["highlights"] = std::move(hs);
    return j;
}

ProtocolTable table_from_json(const nlohmann::ordered_json& j, const HighlightRule& rule)
{
    ProtocolTable t;
    try {
        if (j.contains("kind") && j.at("kind") != "protocol_table")
            data_error("expected a protocol_table, got kind '" + j.at("kind").dump() + "'");
        if (j.contains("config"))
            t.config = j.at("config");
        for (const auto& jc : j.at("cells")) {
            CellResult c;
            c.r = jc.at("r").get<int>();
            if (c.r < 1)
                data_error("cell r must be >= 1");
            if (jc.contains("variant") && !jc.at("variant").is_null())
                c.variant = parse_variant(jc.at("variant").get<std::string>());
            c.strategy = parse_strategy(jc.at("strategy").get<std::string>());
            c.mean = jc.at("mean").get<double>();
            c.std = jc.at("std").get<double>();
            if (jc.contains("values"))
                c.values = jc.at("values").get<std::vector<double>>();
            c.n_reps = jc.contains("n_reps") ? jc.at("n_reps").get<int>() : static_cast<int>(c.values.size());
            if (!std::isfinite(c.mean) || !std::isfinite(c.std) || c.std < 0)
                data_error("cell (r=" + std::to_string(c.r) + ", " + std::string(strategy_name(c.strategy)) +
                           ") has an invalid mean/std");
            if (c.strategy != Strategy::Soup && !c.variant)
                data_error("cell (r=" + std::to_string(c.r) + ", " + std::string(strategy_name(c.strategy)) +
                           ") needs a variant");
            if (t.find(c.r, c.variant, c.strategy))
                data_error("duplicate cell (r=" + std::to_string(c.r) + ", " + std::string(strategy_name(c.strategy)) +
                           ")");
            t.cells.push_back(std::move(c));
        }
    } catch (const nlohmann::json::exception& e) {
        data_error(std::string("malformed protocol table: ") + e.what());
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Usage)
            data_error(std::string("malformed protocol table: ") + e.what());
        throw;
    }
    t.highlights = compute_highlights(t.cells, rule);
    return t;
}

} // namespace snapsoup
