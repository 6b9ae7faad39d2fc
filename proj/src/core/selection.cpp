// SPDX-License-Identifier: Apache-2.0

#include "core/selection.hpp"

#include "core/averaging.hpp"
#include "core/error.hpp"

namespace snapsoup {

std::string_view variant_name(Variant v)
{
    switch (v) {
    case Variant::Last:
        return "last";
    case Variant::SrcDev:
        return "src-dev";
    case Variant::Ca:
        return "ca";
    case Variant::TrgDev:
        return "trg-dev";
    }
    return "?";
}

Variant parse_variant(std::string_view text)
{
    if (text == "last" || text == "LAST")
        return Variant::Last;
    if (text == "src-dev" || text == "SRC_DEV" || text == "s-dev")
        return Variant::SrcDev;
    if (text == "ca" || text == "CA")
        return Variant::Ca;
    if (text == "trg-dev" || text == "TRG_DEV")
        return Variant::TrgDev;
    usage_error("unknown variant '" + std::string(text) + "' (expected last, src-dev, ca or trg-dev)");
}

ModelRef VariantModel::ref() const
{
    if (variant == Variant::TrgDev)
        usage_error("TRG_DEV variant of run '" + run_id + "' selects one snapshot per language; no single model");
    ModelRef m = checkpoint_average ? ModelRef::checkpoint_average(run_id) : ModelRef::snapshot(run_id, *snapshot_index);
    m.weights = weights;
    return m;
}

ModelRef VariantModel::ref_for_language(const std::string& language) const
{
    if (variant != Variant::TrgDev)
        return ref();
    auto it = language_snapshot.find(language);
    if (it == language_snapshot.end())
        data_error("TRG_DEV variant of run '" + run_id + "' has no pick for language '" + language + "'");
    return ModelRef::snapshot(run_id, it->second);
}

namespace {

// Highest score wins; on ties the later snapshot.
int argmax_snapshot(const Run& run, const Evaluator& scorer, const SplitSpec& split)
{
    int best = 0;
    double best_score = 0.0;
    for (const auto& s : run.snapshots) {
        const double v = scorer.score(ModelRef::snapshot(run.run_id, s.index), split);
        if (best == 0 || v >= best_score) {
            best = s.index;
            best_score = v;
        }
    }
    if (best == 0)
        data_error("run '" + run.run_id + "' has no snapshots");
    return best;
}

} // namespace

VariantModel build_variant(const RunPool& pool, const Run& run, Variant v, const std::string& metric,
                           const VariantOptions& opts)
{
    ScoreTableEvaluator table(pool);
    const Evaluator& scorer = opts.scorer ? *opts.scorer : table;

    VariantModel vm;
    vm.run_id = run.run_id;
    vm.variant = v;
    switch (v) {
    case Variant::Last:
        if (run.snapshots.empty())
            data_error("run '" + run.run_id + "' has no snapshots");
        vm.snapshot_index = run.final_index();
        break;
    case Variant::SrcDev:
        vm.snapshot_index = argmax_snapshot(run, scorer, {SplitId::src_dev(), metric});
        break;
    case Variant::Ca:
        vm.checkpoint_average = true;
        break;
    case Variant::TrgDev: {
        auto langs = opts.languages.empty() ? scorer.languages(SplitFamily::TrgDev, metric) : opts.languages;
        if (langs.empty())
            data_error("TRG_DEV for run '" + run.run_id + "' needs trg-dev scores, none found");
        for (const auto& lang : langs)
            vm.language_snapshot[lang] = argmax_snapshot(run, scorer, {SplitId::trg_dev(lang), metric});
        break;
    }
    }

    if (opts.weights && v != Variant::TrgDev) {
        if (vm.checkpoint_average)
            vm.weights = std::make_shared<const TensorMap>(ca_of_run(run, *opts.weights));
        else
            vm.weights = opts.weights->load(run, *vm.snapshot_index);
    }
    return vm;
}

void resolve_scores(VariantModel& vm, const Evaluator& ev, const std::string& metric, const LanguageSets& langs)
{
    if (vm.variant != Variant::TrgDev)
        vm.src_dev = ev.score(vm.ref(), {SplitId::src_dev(), metric});
    auto mean_of = [&](SplitFamily family, const std::vector<std::string>& ls) {
        double sum = 0.0;
        for (const auto& lang : ls)
            sum += ev.score(vm.ref_for_language(lang), {SplitId{family, lang}, metric});
        return sum / static_cast<double>(ls.size());
    };
    if (!langs.trg_dev.empty())
        vm.trg_dev_mean = mean_of(SplitFamily::TrgDev, langs.trg_dev);
    if (!langs.test.empty())
        vm.test_mean = mean_of(SplitFamily::Test, langs.test);
}

namespace {

template <class Get>
std::size_t argmax_models(std::span<const VariantModel> models, Get get, std::string_view what)
{
    if (models.empty())
        data_error(std::string("cannot select from an empty list of models (") + std::string(what) + ")");
    std::size_t best = 0;
    for (std::size_t i = 0; i < models.size(); ++i) {
        const auto& v = get(models[i]);
        if (!v)
            data_error("model of run '" + models[i].run_id + "' (" + std::string(variant_name(models[i].variant)) +
                       ") has no " + std::string(what) + " score");
        if (i == 0)
            continue;
        const double cur = *v;
        const double top = *get(models[best]);
        if (cur > top || (cur == top && models[i].run_id < models[best].run_id))
            best = i;
    }
    return best;
}

} // namespace

std::size_t max_src_dev_index(std::span<const VariantModel> models)
{
    return argmax_models(models, [](const VariantModel& m) -> const std::optional<double>& { return m.src_dev; },
                         "src-dev");
}

const VariantModel& max_src_dev(std::span<const VariantModel> models)
{
    return models[max_src_dev_index(models)];
}

std::size_t max_trg_dev_index(std::span<const VariantModel> models)
{
    return argmax_models(models, [](const VariantModel& m) -> const std::optional<double>& { return m.trg_dev_mean; },
                         "trg-dev");
}

const VariantModel& max_trg_dev(std::span<const VariantModel> models)
{
    return models[max_trg_dev_index(models)];
}

} // namespace snapsoup
