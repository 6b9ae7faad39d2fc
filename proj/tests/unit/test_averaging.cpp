// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "core/averaging.hpp"
#include "core/error.hpp"
#include "core/selection.hpp"
#include "support.hpp"

using namespace snapsoup;

namespace {

TensorMap single(std::vector<float> v, const std::string& name = "w")
{
    TensorMap m;
    const Shape shape{v.size()};
    m.insert(name, Tensor(shape, std::move(v)));
    return m;
}

// Relative error between two tensors, normalized by the larger magnitude.
double max_rel_err(const TensorMap& a, const TensorMap& b)
{
    double worst = 0.0;
    for (const auto& [name, t] : a) {
        const auto& u = b.at(name).data;
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double x = t.data[i], y = u[i];
            const double scale = std::max({std::abs(x), std::abs(y), 1e-30});
            worst = std::max(worst, std::abs(x - y) / scale);
        }
    }
    return worst;
}

// Long double oracle for the element-wise mean.
TensorMap oracle_mean(const std::vector<TensorMap>& maps)
{
    TensorMap out;
    for (const auto& [name, t] : maps.front()) {
        std::vector<float> d(t.data.size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            long double s = 0;
            for (const auto& m : maps)
                s += m.at(name).data[i];
            d[i] = static_cast<float>(s / maps.size());
        }
        out.insert(name, Tensor(t.shape, std::move(d)));
    }
    return out;
}

// Pool of runs with weights "w" = run-specific base + snapshot index.
struct WeightedPool {
    RunPool pool;
    MemoryWeightStore store;
};

WeightedPool weighted_pool(int configs, int seeds, int snaps)
{
    WeightedPool wp;
    wp.pool = RunPool::from_runs(testing::make_runs(configs, seeds, snaps), snaps);
    int k = 0;
    for (const auto& r : wp.pool.runs()) {
        for (const auto& s : r.snapshots) {
            auto m = single({float(10 * k + s.index), float(-s.index)});
            m.meta()["run_id"] = r.run_id;
            m.meta()["snapshot"] = std::to_string(s.index);
            wp.store.put(r.run_id, s.index, std::move(m));
        }
        ++k;
    }
    return wp;
}

} // namespace

TEST_CASE("hand-checked means")
{
    const std::vector<TensorMap> maps{single({1, 2, 3}), single({3, 4, 5})};
    const auto avg = average_checkpoints(maps);
    CHECK(avg.at("w").data == std::vector<float>{2, 3, 4});
    CHECK(avg.meta().at("count") == "2");
    CHECK(avg.meta().at("constituents") == "#0,#1");

    const std::vector<TensorMap> three{single({0}), single({0}), single({1})};
    CHECK(average_checkpoints(three).at("w").data[0] == static_cast<float>(1.0 / 3.0));
}

TEST_CASE("a single input is returned unchanged")
{
    std::mt19937_64 g(7);
    auto m = testing::random_map(g, 4);
    m.meta()["id"] = "only";
    const std::vector<TensorMap> one{m};
    CHECK(bit_equal(average_checkpoints(one), m));
}

TEST_CASE("identical inputs average to themselves")
{
    std::mt19937_64 g(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto m = testing::random_map(g, 3);
        const std::vector<TensorMap> maps(1 + trial % 5, m);
        const auto avg = average_checkpoints(maps);
        for (const auto& [name, t] : m)
            CHECK(bit_equal(avg.at(name), t));
    }
}

TEST_CASE("incompatible inputs are rejected")
{
    const std::vector<TensorMap> shape{single({1, 2}), single({1, 2, 3})};
    CHECK_THROWS_AS(average_checkpoints(shape), Error);
    const std::vector<TensorMap> names{single({1}, "a"), single({1}, "b")};
    CHECK_THROWS_AS(average_checkpoints(names), Error);
    CHECK_THROWS_AS(average_checkpoints(std::vector<TensorMap>{}), Error);

    RunningAverage ra;
    CHECK_THROWS_AS(ra.finalize(), Error);
    ra.push(single({1, 2}));
    CHECK_THROWS_AS(ra.push(single({1})), Error);
    CHECK_THROWS_AS(ra.push(single({1, 2}, "v")), Error);
}

TEST_CASE("metadata names the constituents")
{
    auto a = single({1});
    a.meta()["id"] = "alpha";
    auto b = single({2});
    b.meta()["run_id"] = "r";
    b.meta()["snapshot"] = "4";
    const std::vector<TensorMap> maps{a, b, single({3})};
    CHECK(average_checkpoints(maps).meta().at("constituents") == "alpha,r@4,#2");
}

TEST_CASE("batch, streaming and oracle agree; order does not matter")
{
    std::mt19937_64 g(11);
    for (int trial = 0; trial < 50; ++trial) {
        const auto like = testing::random_map(g, 1 + trial % 4, 8);
        std::vector<TensorMap> maps;
        for (int i = 0; i < 2 + trial % 9; ++i)
            maps.push_back(testing::random_like(g, like));

        const auto batch = average_checkpoints(maps);
        RunningAverage ra;
        for (const auto& m : maps)
            ra.push(m);
        const auto stream = ra.finalize();
        const auto oracle = oracle_mean(maps);
        CHECK(max_rel_err(batch, oracle) <= 1e-6);
        CHECK(max_rel_err(stream, oracle) <= 1e-6);

        auto shuffled = maps;
        std::shuffle(shuffled.begin(), shuffled.end(), g);
        CHECK(max_rel_err(average_checkpoints(shuffled), batch) <= 1e-6);
    }
}

TEST_CASE("averaging is linear")
{
    std::mt19937_64 g(5);
    std::uniform_real_distribution<float> coef(-2.0f, 2.0f);
    for (int trial = 0; trial < 30; ++trial) {
        const auto like = testing::random_map(g, 2);
        std::vector<TensorMap> xs, ys, mix;
        const float a = coef(g), b = coef(g);
        for (int i = 0; i < 4; ++i) {
            xs.push_back(testing::random_like(g, like));
            ys.push_back(testing::random_like(g, like));
            TensorMap m;
            for (const auto& [name, t] : xs.back()) {
                std::vector<float> d(t.data.size());
                for (std::size_t e = 0; e < d.size(); ++e)
                    d[e] = a * t.data[e] + b * ys.back().at(name).data[e];
                m.insert(name, Tensor(t.shape, std::move(d)));
            }
            mix.push_back(std::move(m));
        }
        const auto ax = average_checkpoints(xs), ay = average_checkpoints(ys), am = average_checkpoints(mix);
        for (const auto& [name, t] : am)
            for (std::size_t e = 0; e < t.data.size(); ++e) {
                const double want = a * ax.at(name).data[e] + b * ay.at(name).data[e];
                CHECK(std::abs(t.data[e] - want) <= 1e-5 * (1.0 + std::abs(want)));
            }
    }
}

TEST_CASE("accumulation happens in double")
{
    // 1e8 + 1 + ... cancels in float; the double sum keeps the small terms.
    std::vector<TensorMap> maps{single({1e8f}), single({-1e8f})};
    for (int i = 0; i < 8; ++i)
        maps.push_back(single({1.0f}));
    CHECK(average_checkpoints(maps).at("w").data[0] == doctest::Approx(0.8f));

    RunningAverage ra;
    for (const auto& m : maps)
        ra.push(m);
    CHECK(ra.finalize().at("w").data[0] == doctest::Approx(0.8f).epsilon(1e-6));
}

TEST_CASE("jobs do not change the result")
{
    std::mt19937_64 g(19);
    const auto like = testing::random_map(g, 7, 9);
    std::vector<TensorMap> maps;
    for (int i = 0; i < 6; ++i)
        maps.push_back(testing::random_like(g, like));
    const auto ref = average_checkpoints(maps, 1);
    for (unsigned jobs : {2u, 3u, 8u, 32u})
        CHECK(bit_equal(average_checkpoints(maps, jobs), ref));
}

TEST_CASE("checkpoint average of a run")
{
    auto wp = weighted_pool(1, 1, 4);
    const auto ca = ca_of_run(wp.pool.runs()[0], wp.store);
    CHECK(ca.at("w").data == std::vector<float>{2.5f, -2.5f});
    CHECK(ca.meta().at("id") == "c0-s0@ca");
    CHECK(ca.meta().at("constituents") == "c0-s0@1,c0-s0@2,c0-s0@3,c0-s0@4");
}

TEST_CASE("accumulative average over variant models")
{
    auto wp = weighted_pool(2, 1, 3);
    std::vector<const Run*> runs;
    for (const auto& r : wp.pool.runs())
        runs.push_back(&r);

    CHECK(accumulative_average(wp.pool, runs, Variant::Last, "acc", wp.store).at("w").data ==
          std::vector<float>{8.0f, -3.0f});
    CHECK(accumulative_average(wp.pool, runs, Variant::Ca, "acc", wp.store).at("w").data ==
          std::vector<float>{7.0f, -2.0f});

    wp.pool.add_score({{"c0-s0", 1, "src-dev", "acc"}, 5});
    wp.pool.add_score({{"c0-s0", 2, "src-dev", "acc"}, 9});
    wp.pool.add_score({{"c0-s0", 3, "src-dev", "acc"}, 9});
    wp.pool.add_score({{"c1-s0", 1, "src-dev", "acc"}, 9});
    wp.pool.add_score({{"c1-s0", 2, "src-dev", "acc"}, 1});
    wp.pool.add_score({{"c1-s0", 3, "src-dev", "acc"}, 2});
    // c0 ties at 2 and 3 -> later (3); c1 -> 1.
    CHECK(accumulative_average(wp.pool, runs, Variant::SrcDev, "acc", wp.store).at("w").data ==
          std::vector<float>{7.0f, -2.0f});

    CHECK_THROWS_AS(accumulative_average(wp.pool, runs, Variant::TrgDev, "acc", wp.store), Error);
    CHECK_THROWS_AS(accumulative_average(wp.pool, {}, Variant::Last, "acc", wp.store), Error);
}

TEST_CASE("soup members, ties and key")
{
    auto wp = weighted_pool(1, 2, 3);
    auto& pool = wp.pool;
    pool.add_score({{"c0-s0", 1, "src-dev", "acc"}, 5});
    pool.add_score({{"c0-s0", 2, "src-dev", "acc"}, 7});
    pool.add_score({{"c0-s0", 3, "src-dev", "acc"}, 7});
    pool.add_score({{"c0-s1", 1, "src-dev", "acc"}, 7});
    pool.add_score({{"c0-s1", 2, "src-dev", "acc"}, 8});
    pool.add_score({{"c0-s1", 3, "src-dev", "acc"}, 1});

    const auto m = soup_members(pool, 3, "acc");
    REQUIRE(m.size() == 3);
    CHECK(m[0] == SoupMember{"c0-s1", 2, 8});
    CHECK(m[1] == SoupMember{"c0-s0", 2, 7});
    CHECK(m[2] == SoupMember{"c0-s0", 3, 7});
    CHECK(soup_key(m) == "soup:c0-s0@2+c0-s0@3+c0-s1@2");

    auto rev = m;
    std::reverse(rev.begin(), rev.end());
    CHECK(soup_key(rev) == soup_key(m));

    const auto s = soup(pool, 3, "acc", wp.store);
    CHECK(s.meta().at("id") == soup_key(m));
    CHECK(s.at("w").data[1] == doctest::Approx(-7.0 / 3.0));

    CHECK_THROWS_AS(soup_members(pool, 0, "acc"), Error);
    CHECK_THROWS_AS(soup_members(pool, 7, "acc"), Error);

    const Run* only = pool.find_run("c0-s0");
    const auto scoped = soup_members(pool, 1, "acc", std::span<const Run* const>(&only, 1));
    CHECK(scoped[0] == SoupMember{"c0-s0", 2, 7});
}
