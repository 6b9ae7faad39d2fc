// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "core/error.hpp"
#include "core/protocol.hpp"
#include "core/synthgen.hpp"
#include "support.hpp"

using namespace snapsoup;

namespace {

ErrorKind kind_of(auto&& fn)
{
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::Internal;
}

SynthConfig small_synth(std::uint64_t seed = 3)
{
    SynthConfig c;
    c.dim = 16;
    c.n_configs = 6;
    c.seeds_per_config = 2;
    c.snapshots_per_run = 4;
    c.languages = 2;
    c.rng_seed = seed;
    return c;
}

struct Fixture {
    SynthPool sp = generate(small_synth());
    SyntheticQuadraticEvaluator ev{sp.truth, &sp.pool, sp.weights.get()};
};

ProtocolConfig small_protocol()
{
    ProtocolConfig cfg;
    cfg.r_max = 4;
    cfg.repetitions = 6;
    cfg.rng_seed = 17;
    return cfg;
}

// Two configs, one seed each, two snapshots; test scores by hand.
RunPool hand_pool()
{
    auto pool = RunPool::from_runs(testing::make_runs(2, 1, 2), 2);
    const std::string a = "c0-s0", b = "c1-s0";
    pool.add_score({{a, 1, "src-dev", "acc"}, 50});
    pool.add_score({{a, 2, "src-dev", "acc"}, 60});
    pool.add_score({{b, 1, "src-dev", "acc"}, 55});
    pool.add_score({{b, 2, "src-dev", "acc"}, 58});
    pool.add_score({{a, 1, "test:de", "acc"}, 70});
    pool.add_score({{a, 2, "test:de", "acc"}, 72});
    pool.add_score({{b, 1, "test:de", "acc"}, 71});
    pool.add_score({{b, 2, "test:de", "acc"}, 75});
    pool.add_score({{"avg:last:c0-s0+c1-s0", 0, "test:de", "acc"}, 76});
    pool.add_score({{"avg:src-dev:c0-s0+c1-s0", 0, "test:de", "acc"}, 74});
    return pool;
}

} // namespace

TEST_CASE("aggregate examples")
{
    const std::vector<double> two{76, 77};
    const auto c = aggregate(two);
    CHECK(c.mean == 76.5);
    CHECK(c.std == 0.5);
    CHECK(c.n_reps == 2);
    CHECK(c.values == two);

    const std::vector<double> one{42};
    CHECK(aggregate(one).std == 0.0);
    CHECK(kind_of([] { aggregate(std::vector<double>{}); }) == ErrorKind::Data);
    CHECK(kind_of([] { aggregate(std::vector<double>{1, std::numeric_limits<double>::quiet_NaN()}); }) ==
          ErrorKind::Data);
}

TEST_CASE("Welford matches a two-pass oracle")
{
    std::mt19937_64 g(8);
    std::normal_distribution<double> val(70.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> xs(1 + trial % 40);
        for (auto& x : xs)
            x = val(g);
        long double mean = 0;
        for (double x : xs)
            mean += x;
        mean /= xs.size();
        long double ss = 0;
        for (double x : xs)
            ss += (x - mean) * (x - mean);
        const double std = std::sqrt(static_cast<double>(ss / xs.size()));
        const auto c = aggregate(xs);
        CHECK(std::abs(c.mean - static_cast<double>(mean)) <= 1e-12 * std::abs(static_cast<double>(mean)));
        CHECK(std::abs(c.std - std) <= 1e-12 * std::max(1.0, std));
    }
}

TEST_CASE("sampling draws distinct configs and nests")
{
    const auto pool = RunPool::from_runs(testing::make_runs(7, 3, 1), 1);
    for (int rep = 0; rep < 50; ++rep) {
        CounterRng big(5, repetition_stream(rep));
        const auto full = sample_runs(pool, 7, big);
        std::set<ConfigKey> cfgs;
        for (const Run* r : full)
            cfgs.insert(r->config());
        CHECK(cfgs.size() == 7);
        for (int r = 1; r <= 7; ++r) {
            CounterRng rng(5, repetition_stream(rep));
            const auto part = sample_runs(pool, r, rng);
            CHECK(std::equal(part.begin(), part.end(), full.begin()));
        }
    }
    CounterRng rng(1, 1);
    CHECK(kind_of([&] { sample_runs(pool, 8, rng); }) == ErrorKind::Usage);
    CHECK(kind_of([&] { sample_runs(pool, 0, rng); }) == ErrorKind::Usage);

    const auto all = sample_runs(pool, 21, rng, true);
    CHECK(std::set<const Run*>(all.begin(), all.end()).size() == 21);
    CHECK(repetition_stream(1, 2) != repetition_stream(2, 1));
}

TEST_CASE("every seed of a config gets sampled")
{
    const auto pool = RunPool::from_runs(testing::make_runs(1, 3, 1), 1);
    std::map<std::string, int> hits;
    for (int rep = 0; rep < 3000; ++rep) {
        CounterRng rng(9, repetition_stream(rep));
        ++hits[sample_runs(pool, 1, rng)[0]->run_id];
    }
    REQUIRE(hits.size() == 3);
    for (const auto& [_, n] : hits)
        CHECK(std::abs(n - 1000) < 120);
}

TEST_CASE("hand-computed protocol table")
{
    const auto pool = hand_pool();
    ScoreTableEvaluator ev(pool);
    ProtocolConfig cfg;
    cfg.r_max = 2;
    cfg.repetitions = 3;
    cfg.variants = {Variant::Last, Variant::SrcDev};
    cfg.strategies = {Strategy::MaxSrcDev, Strategy::AccumulativeAvg};
    const auto t = run_protocol(pool, ev, cfg);

    // r=2 always sees both runs.
    const auto* last = t.find(2, Variant::Last, Strategy::MaxSrcDev);
    REQUIRE(last);
    CHECK(last->mean == 72.0); // src-dev of finals: 60 vs 58
    CHECK(last->std == 0.0);
    const auto* src = t.find(2, Variant::SrcDev, Strategy::MaxSrcDev);
    CHECK(src->mean == 72.0);
    const auto* avg = t.find(2, Variant::Last, Strategy::AccumulativeAvg);
    CHECK(avg->mean == 76.0);
    CHECK(t.find(2, Variant::SrcDev, Strategy::AccumulativeAvg)->mean == 74.0);
    // r=1 picks one of the two runs per repetition.
    const auto* r1 = t.find(1, Variant::Last, Strategy::MaxSrcDev);
    for (double v : r1->values)
        CHECK((v == 72.0 || v == 75.0));
    CHECK(t.config["metric"] == "acc");
    CHECK(t.config["target_languages"] == nlohmann::json::array({"de"}));

    // The composite for src-dev picks has no record.
    cfg.variants = {Variant::Last, Variant::Ca};
    CHECK(kind_of([&] { run_protocol(pool, ev, cfg); }) == ErrorKind::Data);
}

TEST_CASE("at r=1 accumulative averaging equals Max-SRC-DEV")
{
    Fixture f;
    auto cfg = small_protocol();
    cfg.strategies = {Strategy::MaxSrcDev, Strategy::AccumulativeAvg};
    const auto t = run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get());
    for (Variant v : cfg.variants) {
        const auto* a = t.find(1, v, Strategy::MaxSrcDev);
        const auto* b = t.find(1, v, Strategy::AccumulativeAvg);
        REQUIRE(a);
        REQUIRE(b);
        CHECK(a->values == b->values);
    }
}

TEST_CASE("the oracle selection dominates src-dev selection")
{
    // Synthetic trg-dev and test share per-language optima, so choosing on
    // trg-dev can only help the test mean.
    Fixture f;
    auto cfg = small_protocol();
    cfg.strategies = {Strategy::MaxSrcDev, Strategy::MaxTrgDev};
    const auto t = run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get());
    for (int r = 1; r <= cfg.r_max; ++r)
        for (Variant v : cfg.variants) {
            const auto* src = t.find(r, v, Strategy::MaxSrcDev);
            const auto* trg = t.find(r, v, Strategy::MaxTrgDev);
            CHECK(trg->oracle());
            CHECK_FALSE(src->oracle());
            for (std::size_t i = 0; i < src->values.size(); ++i)
                CHECK(trg->values[i] >= src->values[i]);
        }
}

TEST_CASE("invalid strategy and variant combinations")
{
    Fixture f;
    auto cfg = small_protocol();
    cfg.variants = {Variant::TrgDev};
    cfg.strategies = {Strategy::MaxSrcDev};
    CHECK(kind_of([&] { run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get()); }) == ErrorKind::Usage);
    cfg.strategies = {Strategy::AccumulativeAvg};
    CHECK(kind_of([&] { run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get()); }) == ErrorKind::Usage);
    cfg.strategies = {Strategy::MaxTrgDev};
    CHECK_NOTHROW(run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get()));

    cfg = small_protocol();
    cfg.r_max = 7;
    CHECK(kind_of([&] { run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get()); }) == ErrorKind::Usage);
    cfg.sample_all_runs = true;
    CHECK_NOTHROW(run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get()));

    cfg = small_protocol();
    CHECK(kind_of([&] { run_protocol(f.sp.pool, f.ev, cfg); }) == ErrorKind::Usage);
    cfg.repetitions = 0;
    CHECK(kind_of([&] { run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get()); }) == ErrorKind::Usage);
}

TEST_CASE("results do not depend on jobs; fresh sampling is its own mode")
{
    Fixture f;
    auto cfg = small_protocol();
    cfg.strategies = {Strategy::MaxSrcDev, Strategy::MaxTrgDev, Strategy::AccumulativeAvg, Strategy::Soup};
    cfg.soup_k = 3;
    const auto one = table_to_json(run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get())).dump();
    cfg.jobs = 3;
    const auto three = table_to_json(run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get())).dump();
    CHECK(one == three);

    cfg.fresh_per_r = true;
    const auto fresh = run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get());
    CHECK(fresh.config["nesting"] == "fresh");
    CHECK(table_to_json(fresh).dump() != one);
    cfg.jobs = 1;
    CHECK(table_to_json(run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get())).dump() ==
          table_to_json(fresh).dump());
}

TEST_CASE("table JSON round trip")
{
    Fixture f;
    auto cfg = small_protocol();
    cfg.strategies = {Strategy::MaxSrcDev, Strategy::AccumulativeAvg, Strategy::Soup};
    CHECK(kind_of([&] { run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get()); }) == ErrorKind::Usage);
    cfg.soup_k = 4;
    const auto t = run_protocol(f.sp.pool, f.ev, cfg, f.sp.weights.get());
    const auto j = table_to_json(t);
    CHECK(j["kind"] == "protocol_table");
    CHECK(j["config"]["rng"] == "philox4x32-10");
    CHECK(j["config"]["soup_k"] == 4);
    const auto back = table_from_json(nlohmann::ordered_json::parse(j.dump()));
    CHECK(table_to_json(back) == j);
    const auto* soup = back.find(2, std::nullopt, Strategy::Soup);
    REQUIRE(soup);
    CHECK_FALSE(soup->variant.has_value());
}

TEST_CASE("highlight rule")
{
    auto cell = [](int r, Variant v, Strategy s, double mean) {
        CellResult c;
        c.r = r;
        c.variant = v;
        c.strategy = s;
        c.mean = mean;
        return c;
    };
    const std::vector<CellResult> cells{
        cell(1, Variant::Last, Strategy::MaxSrcDev, 70.0),   cell(1, Variant::Last, Strategy::AccumulativeAvg, 75.0),
        cell(2, Variant::Last, Strategy::MaxSrcDev, 77.6),   cell(2, Variant::Ca, Strategy::MaxSrcDev, 77.0),
        cell(2, Variant::Last, Strategy::AccumulativeAvg, 78.0), cell(2, Variant::Ca, Strategy::AccumulativeAvg, 77.5),
        cell(2, Variant::SrcDev, Strategy::AccumulativeAvg, 77.75),
    };
    const auto hs = compute_highlights(cells, {});
    REQUIRE(hs.size() == 2);
    CHECK(hs[0].cell == 4);
    CHECK(hs[0].level == HighlightLevel::Strong);
    CHECK(hs[0].diff == doctest::Approx(0.4));
    CHECK(hs[0].baseline == 77.6);
    CHECK(hs[1].cell == 5);
    CHECK(hs[1].level == HighlightLevel::Weak);

    HighlightRule per_variant;
    per_variant.baseline = HighlightBaseline::Variant;
    const auto hv = compute_highlights(cells, per_variant);
    REQUIRE(hv.size() == 2);
    CHECK(hv[1].cell == 5);
    CHECK(hv[1].level == HighlightLevel::Strong);

    CHECK(kind_of([&] { compute_highlights(cells, {0.1, 0.2, HighlightBaseline::Row}); }) == ErrorKind::Usage);
    CHECK(display_cell(48.44, 0.46) == "48.4_{0.5}");
    CHECK(display_cell(-0.04, 0.0) == "0.0_{0.0}");
    CHECK(average_key(Variant::Ca, {"b", "a"}) == "avg:ca:a+b");
}

TEST_CASE("strategy and baseline names")
{
    for (Strategy s : {Strategy::MaxSrcDev, Strategy::MaxTrgDev, Strategy::AccumulativeAvg, Strategy::Soup})
        CHECK(parse_strategy(strategy_name(s)) == s);
    CHECK(strategy_label(Strategy::AccumulativeAvg) == "Acc. avg");
    for (auto b : {HighlightBaseline::Row, HighlightBaseline::Global, HighlightBaseline::Variant})
        CHECK(parse_baseline(baseline_name(b)) == b);
    CHECK(kind_of([] { parse_strategy("best"); }) == ErrorKind::Usage);
}

TEST_CASE("selection plateaus while averaging rises")
{
    // Eight runs on a circle of radius R around the target optimum, one
    // config each. Every run scores the same on the target, so selection is
    // flat in r; the average of r runs drawn without replacement has
    // E|mean|^2 = R^2 (N - r) / (r (N - 1)), which falls to 0 at r = N.
    const int n = 8;
    const double R = 2.0;
    auto pool = RunPool::from_runs(testing::make_runs(n, 1, 1), 1);
    MemoryWeightStore store;
    const double pi = std::acos(-1.0);
    for (int j = 0; j < n; ++j) {
        TensorMap m;
        m.insert("weight", Tensor({2}, {float(R * std::cos(2 * pi * j / n)), float(R * std::sin(2 * pi * j / n))}));
        store.put(pool.runs()[j].run_id, 1, std::move(m));
    }
    SyntheticTruth truth;
    truth.s0 = 100;
    truth.curvature = 1;
    TensorMap origin, far;
    origin.insert("weight", Tensor({2}, {0.0f, 0.0f}));
    far.insert("weight", Tensor({2}, {50.0f, 0.0f}));
    truth.target_optimum = origin;
    truth.source_optimum = far;
    truth.language_optima.emplace("de", origin);
    SyntheticQuadraticEvaluator ev(truth, &pool, &store);

    ProtocolConfig cfg;
    cfg.r_max = n;
    cfg.repetitions = 400;
    cfg.variants = {Variant::Last};
    cfg.metric = "synthetic";
    const auto t = run_protocol(pool, ev, cfg, &store);

    double prev = -1e300;
    for (int r = 1; r <= n; ++r) {
        const auto* sel = t.find(r, Variant::Last, Strategy::MaxSrcDev);
        CHECK(sel->mean == doctest::Approx(100 - R * R).epsilon(1e-6));
        CHECK(sel->std == doctest::Approx(0).epsilon(1e-5));
        const auto* avg = t.find(r, Variant::Last, Strategy::AccumulativeAvg);
        CHECK(avg->mean > prev);
        prev = avg->mean;
        const double expected = 100 - R * R * (n - r) / (r * (n - 1.0));
        CHECK(avg->mean == doctest::Approx(expected).epsilon(0.01));
    }
    CHECK(prev == doctest::Approx(100).epsilon(1e-9));
}
