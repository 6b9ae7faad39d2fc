// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <random>
#include <sys/stat.h>

#include "core/averaging.hpp"
#include "core/error.hpp"
#include "core/evaluator.hpp"
#include "support.hpp"

using namespace snapsoup;
using testing::TempDir;
using testing::write_file;

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

TensorMap vec(std::vector<float> v)
{
    TensorMap m;
    const Shape shape{v.size()};
    m.insert("weight", Tensor(shape, std::move(v)));
    return m;
}

std::filesystem::path script(const TempDir& dir, const std::string& name, const std::string& body)
{
    const auto p = dir / name;
    write_file(p, "#!/bin/sh\n" + body);
    ::chmod(p.c_str(), 0755);
    return p;
}

std::size_t line_count(const std::filesystem::path& p)
{
    const auto text = testing::read_file(p);
    return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

SyntheticTruth small_truth()
{
    SyntheticTruth t;
    t.s0 = 10.0;
    t.curvature = 0.5;
    t.target_optimum = vec({0, 0});
    t.source_optimum = vec({1, 1});
    t.language_optima.emplace("de", vec({0, 2}));
    t.language_optima.emplace("fr", vec({-1, 0}));
    return t;
}

} // namespace

TEST_CASE("score table lookups")
{
    auto pool = RunPool::from_runs(testing::make_runs(1, 1, 2), 2);
    pool.add_score({{"c0-s0", 2, "test:de", "acc"}, 61.0});
    pool.add_score({{"c0-s0", 0, "test:de", "acc"}, 62.0});
    pool.add_score({{"avg:ca:c0-s0", 0, "test:de", "acc"}, 63.0});
    ScoreTableEvaluator ev(pool);
    const SplitSpec de{SplitId::test("de"), "acc"};
    CHECK(ev.score(ModelRef::snapshot("c0-s0", 2), de) == 61.0);
    CHECK(ev.score(ModelRef::checkpoint_average("c0-s0"), de) == 62.0);
    CHECK(ev.score(ModelRef::composite("avg:ca:c0-s0"), de) == 63.0);
    CHECK(kind_of([&] { ev.score(ModelRef::composite("avg:ca:zz"), de); }) == ErrorKind::Data);
    CHECK(kind_of([&] { ev.score(ModelRef::snapshot("c0-s0", 1), de); }) == ErrorKind::Data);
    CHECK(ev.languages(SplitFamily::Test, "acc") == std::vector<std::string>{"de"});
    CHECK_FALSE(ev.needs_weights());
}

TEST_CASE("quadratic score matches a hand computation")
{
    const auto t = small_truth();
    // |(2,3) - (0,2)|^2 = 4 + 1 = 5 -> 10 - 0.5 * 5
    CHECK(quadratic_score(vec({2, 3}), t.language_optima.at("de"), t.s0, t.curvature) == 7.5);
    CHECK(quadratic_score(vec({1, 1}), t.source_optimum, t.s0, t.curvature) == 10.0);
    CHECK(kind_of([&] { quadratic_score(vec({1}), t.source_optimum, 1, 1); }) == ErrorKind::Data);

    SyntheticQuadraticEvaluator ev(t);
    const auto m = ModelRef::composite("x", std::make_shared<const TensorMap>(vec({2, 3})));
    CHECK(ev.score(m, {SplitId::src_dev(), "synthetic"}) == 10.0 - 0.5 * 5);
    CHECK(ev.score(m, {SplitId::test("fr"), "synthetic"}) == 10.0 - 0.5 * 18);
    CHECK(kind_of([&] { ev.score(m, {SplitId::test("es"), "synthetic"}); }) == ErrorKind::Data);
    CHECK(kind_of([&] { ev.score(ModelRef::composite("y"), {SplitId::src_dev(), "synthetic"}); }) ==
          ErrorKind::Data);
    CHECK(ev.languages(SplitFamily::Test, "synthetic") == std::vector<std::string>{"de", "fr"});
    CHECK(ev.languages(SplitFamily::SrcDev, "synthetic").empty());
}

TEST_CASE("synthetic evaluator loads pool entries and their checkpoint average")
{
    const auto pool = RunPool::from_runs(testing::make_runs(1, 1, 2), 2);
    MemoryWeightStore store;
    store.put("c0-s0", 1, vec({0, 0}));
    store.put("c0-s0", 2, vec({2, 2}));
    SyntheticQuadraticEvaluator ev(small_truth(), &pool, &store);
    const SplitSpec src{SplitId::src_dev(), "synthetic"};
    CHECK(ev.score(ModelRef::snapshot("c0-s0", 2), src) == 9.0);
    CHECK(ev.score(ModelRef::checkpoint_average("c0-s0"), src) == 10.0);
}

TEST_CASE("truth JSON round trip")
{
    TempDir dir;
    const auto t = small_truth();
    const auto j = truth_to_json(t);
    write_file(dir / "truth.json", j.dump());
    const auto back = load_truth(dir / "truth.json");
    CHECK(truth_to_json(back) == j);
    CHECK(bit_equal(back.language_optima.at("de"), t.language_optima.at("de")));
    CHECK(kind_of([] { truth_from_json({{"s0", 1}}); }) == ErrorKind::Data);
    CHECK(kind_of([&] { load_truth(dir / "none.json"); }) == ErrorKind::Io);
}

TEST_CASE("record-first evaluator uses records and memoizes the rest")
{
    auto pool = RunPool::from_runs(testing::make_runs(1, 1, 2), 2);
    pool.add_score({{"c0-s0", 1, "src-dev", "synthetic"}, -42.0});
    MemoryWeightStore store;
    store.put("c0-s0", 1, vec({0, 0}));
    store.put("c0-s0", 2, vec({1, 1}));

    struct Counting final : Evaluator {
        const Evaluator& inner;
        mutable int calls = 0;
        explicit Counting(const Evaluator& e) : inner(e) {}
        Backend backend() const override { return inner.backend(); }
        bool needs_weights() const override { return true; }
        double score(const ModelRef& m, const SplitSpec& s) const override
        {
            ++calls;
            return inner.score(m, s);
        }
        std::vector<std::string> languages(SplitFamily f, const std::string& metric) const override
        {
            return inner.languages(f, metric);
        }
    };
    SyntheticQuadraticEvaluator syn(small_truth(), &pool, &store);
    Counting counting(syn);
    RecordFirstEvaluator ev(pool, counting);
    const SplitSpec src{SplitId::src_dev(), "synthetic"};

    CHECK(ev.score(ModelRef::snapshot("c0-s0", 1), src) == -42.0);
    CHECK(counting.calls == 0);
    CHECK(ev.score(ModelRef::snapshot("c0-s0", 2), src) == 10.0);
    CHECK(ev.score(ModelRef::snapshot("c0-s0", 2), src) == 10.0);
    CHECK(counting.calls == 1);
}

TEST_CASE("external evaluator protocol")
{
    TempDir dir;
    const auto model = dir / "m.tpak";
    save_tensormap(vec({1, 2}), model);
    const std::chrono::seconds t10{10};

    SUBCASE("last stdout line is parsed")
    {
        const auto s = script(dir, "ok.sh", "echo loading\necho '{\"score\": 71.25}'\n");
        CHECK(score_external(model, "test:de", s.string() + " {model} {split}", t10) == 71.25);
        const auto q = script(dir, "str.sh", "echo '{\"score\": \"12.5\"}'\n");
        CHECK(score_external(model, "test:de", q.string() + " {model} {split}", t10) == 12.5);
    }
    SUBCASE("arguments are substituted")
    {
        const auto s = script(dir, "args.sh", "test -f \"$1\" || exit 9\n[ \"$2\" = trg-dev:fr ] || exit 8\n"
                                               "echo '{\"score\": 1}'\n");
        CHECK(score_external(model, "trg-dev:fr", s.string() + " {model} {split}", t10) == 1.0);
    }
    SUBCASE("non-zero exit is an external error")
    {
        const auto s = script(dir, "fail.sh", "echo broken >&2\nexit 2\n");
        try {
            score_external(model, "src-dev", s.string() + " {model} {split}", t10);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::External);
            CHECK(std::string(e.what()).find("broken") != std::string::npos);
        }
    }
    SUBCASE("malformed and non-finite output")
    {
        const auto a = script(dir, "nan.sh", "echo '{\"score\": NaN}'\n");
        CHECK(kind_of([&] { score_external(model, "src-dev", a.string() + " {model} {split}", t10); }) ==
              ErrorKind::External);
        const auto b = script(dir, "nan2.sh", "echo '{\"score\": \"NaN\"}'\n");
        CHECK(kind_of([&] { score_external(model, "src-dev", b.string() + " {model} {split}", t10); }) ==
              ErrorKind::External);
        const auto c = script(dir, "none.sh", "echo hello\n");
        CHECK(kind_of([&] { score_external(model, "src-dev", c.string() + " {model} {split}", t10); }) ==
              ErrorKind::External);
        const auto d = script(dir, "obj.sh", "echo '{\"score\": [1]}'\n");
        CHECK(kind_of([&] { score_external(model, "src-dev", d.string() + " {model} {split}", t10); }) ==
              ErrorKind::External);
    }
    SUBCASE("template must carry both placeholders")
    {
        CHECK(kind_of([&] { score_external(model, "src-dev", "echo {model}", t10); }) == ErrorKind::Usage);
        CHECK(kind_of([&] { score_external(model, "src-dev", "'x {model} {split}", t10); }) == ErrorKind::Usage);
    }
    SUBCASE("missing program")
    {
        CHECK(kind_of([&] { score_external(model, "src-dev", "/nonexistent/eval {model} {split}", t10); }) ==
              ErrorKind::External);
    }
}

TEST_CASE("external evaluator timeout from the environment")
{
    TempDir dir;
    const auto model = dir / "m.tpak";
    save_tensormap(vec({1}), model);
    const auto s = script(dir, "slow.sh", "sleep 5\necho '{\"score\": 1}'\n");
    ::setenv("SNAPSOUP_EVAL_TIMEOUT_SECS", "1", 1);
    const auto timeout = timeout_from_env(std::chrono::seconds(3600));
    CHECK(timeout.count() == 1);
    const auto start = std::chrono::steady_clock::now();
    CHECK(kind_of([&] { score_external(model, "src-dev", s.string() + " {model} {split}", timeout); }) ==
          ErrorKind::External);
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(4));
    ::setenv("SNAPSOUP_EVAL_TIMEOUT_SECS", "soon", 1);
    CHECK(kind_of([] { timeout_from_env(std::chrono::seconds(1)); }) == ErrorKind::Usage);
    ::unsetenv("SNAPSOUP_EVAL_TIMEOUT_SECS");
    CHECK(timeout_from_env(std::chrono::seconds(7)).count() == 7);
}

TEST_CASE("external evaluator memoizes and writes composites as TPAK")
{
    TempDir dir;
    auto pool = RunPool::from_runs(testing::make_runs(1, 1, 1), 1);
    const auto log = dir / "calls.log";
    const auto seen = dir / "seen.tpak";
    const auto s = script(dir, "eval.sh", "echo \"$1 $2\" >> " + log.string() + "\ncp \"$1\" " + seen.string() +
                                              "\necho '{\"score\": 3}'\n");
    ExternalConfig cfg;
    cfg.command_template = s.string() + " {model} {split}";
    cfg.scratch_dir = dir / "scratch";
    cfg.timeout = std::chrono::seconds(10);
    ExternalCommandEvaluator ev(cfg, pool);
    CHECK(ev.needs_weights());

    const auto w = std::make_shared<const TensorMap>(vec({4, 5, 6}));
    const auto m = ModelRef::composite("avg:ca:c0-s0", w);
    const SplitSpec de{SplitId::test("de"), "acc"};
    CHECK(ev.score(m, de) == 3.0);
    CHECK(ev.score(m, de) == 3.0);
    CHECK(line_count(log) == 1);
    CHECK(bit_equal(load_tensormap(seen).at("weight"), w->at("weight")));

    CHECK(ev.score(m, {SplitId::test("fr"), "acc"}) == 3.0);
    CHECK(line_count(log) == 2);

    CHECK(kind_of([&] { ev.score(ModelRef::composite("soup:x"), de); }) == ErrorKind::Data);
    CHECK(kind_of([&] { ExternalCommandEvaluator(ExternalConfig{"echo {model}"}, pool); }) == ErrorKind::Usage);
}
