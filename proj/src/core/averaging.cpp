// SPDX-License-Identifier: Apache-2.0

#include "core/averaging.hpp"

#include <algorithm>
#include <thread>

#include "core/error.hpp"
#include "core/selection.hpp"

namespace snapsoup {

std::string constituent_id(const TensorMap& m, std::size_t position)
{
    const auto& meta = m.meta();
    if (auto it = meta.find("id"); it != meta.end())
        return it->second;
    auto run = meta.find("run_id");
    auto snap = meta.find("snapshot");
    if (run != meta.end() && snap != meta.end())
        return run->second + "@" + snap->second;
    return "#" + std::to_string(position);
}

namespace {

std::string join(const std::vector<std::string>& parts, char sep)
{
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i)
            out += sep;
        out += parts[i];
    }
    return out;
}

void stamp_meta(TensorMap& out, std::size_t count, const std::vector<std::string>& ids)
{
    out.meta()["count"] = std::to_string(count);
    out.meta()["constituents"] = join(ids, ',');
}

} // namespace

TensorMap average_checkpoints(std::span<const TensorMap* const> maps, unsigned jobs)
{
    if (maps.empty())
        data_error("cannot average an empty list of checkpoints");
    const TensorMap& first = *maps.front();
    if (maps.size() == 1)
        return first;
    for (std::size_t i = 1; i < maps.size(); ++i) {
        const auto report = check_compatibility(first, *maps[i]);
        if (!report.compatible())
            data_error("checkpoint " + std::to_string(i) + " is not averageable with checkpoint 0: " + report.summary());
    }

    std::vector<const std::string*> names;
    for (const auto& [name, _] : first)
        names.push_back(&name);
    std::vector<std::vector<float>> results(names.size());
    const double n = static_cast<double>(maps.size());

    auto reduce = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t t = lo; t < hi; ++t) {
            const auto& name = *names[t];
            const std::size_t len = first.at(name).data.size();
            std::vector<double> sum(len, 0.0);
            for (const TensorMap* m : maps) {
                const auto& src = m->at(name).data;
                for (std::size_t i = 0; i < len; ++i)
                    sum[i] += static_cast<double>(src[i]);
            }
            auto& out = results[t];
            out.resize(len);
            for (std::size_t i = 0; i < len; ++i)
                out[i] = static_cast<float>(sum[i] / n);
        }
    };

    const unsigned workers = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(names.size())));
    if (workers <= 1) {
        reduce(0, names.size());
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (names.size() + workers - 1) / workers;
        for (unsigned w = 0; w < workers; ++w) {
            const std::size_t lo = w * chunk;
            const std::size_t hi = std::min(names.size(), lo + chunk);
            if (lo < hi)
                pool.emplace_back(reduce, lo, hi);
        }
    }

    TensorMap out;
    for (std::size_t t = 0; t < names.size(); ++t)
        out.insert(*names[t], Tensor(first.at(*names[t]).shape, std::move(results[t])));
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < maps.size(); ++i)
        ids.push_back(constituent_id(*maps[i], i));
    stamp_meta(out, maps.size(), ids);
    return out;
}

TensorMap average_checkpoints(std::span<const TensorMap> maps, unsigned jobs)
{
    std::vector<const TensorMap*> ptrs;
    ptrs.reserve(maps.size());
    for (const auto& m : maps)
        ptrs.push_back(&m);
    return average_checkpoints(std::span<const TensorMap* const>(ptrs), jobs);
}

void RunningAverage::push(const TensorMap& m)
{
    if (count_ == 0) {
        template_.clear();
        mean_.clear();
        for (const auto& [name, t] : m) {
            template_.emplace_back(name, t.shape);
            mean_.emplace_back(t.data.begin(), t.data.end());
        }
        count_ = 1;
        constituents_.push_back(constituent_id(m, 0));
        return;
    }

    bool ok = m.size() == template_.size();
    if (ok) {
        std::size_t i = 0;
        for (const auto& [name, t] : m) {
            if (template_[i].first != name || template_[i].second != t.shape) {
                ok = false;
                break;
            }
            ++i;
        }
    }
    if (!ok) {
        TensorMap shape_only;
        for (const auto& [name, shape] : template_)
            shape_only.insert(name, Tensor(shape, std::vector<float>(shape_numel(shape))));
        data_error("map is not compatible with the running average: " +
                   check_compatibility(shape_only, m).summary());
    }

    ++count_;
    const double k = static_cast<double>(count_);
    std::size_t i = 0;
    for (const auto& [_, t] : m) {
        auto& acc = mean_[i++];
        for (std::size_t j = 0; j < acc.size(); ++j)
            acc[j] += (static_cast<double>(t.data[j]) - acc[j]) / k;
    }
    constituents_.push_back(constituent_id(m, count_ - 1));
}

TensorMap RunningAverage::finalize() const
{
    if (count_ == 0)
        data_error("running average is empty");
    TensorMap out;
    for (std::size_t i = 0; i < template_.size(); ++i) {
        std::vector<float> data(mean_[i].size());
        std::transform(mean_[i].begin(), mean_[i].end(), data.begin(), [](double x) { return static_cast<float>(x); });
        out.insert(template_[i].first, Tensor(template_[i].second, std::move(data)));
    }
    stamp_meta(out, count_, constituents_);
    return out;
}

TensorMap ca_of_run(const Run& run, const WeightStore& store)
{
    if (run.snapshots.empty())
        data_error("run '" + run.run_id + "' has no snapshots");
    std::vector<std::shared_ptr<const TensorMap>> held;
    std::vector<const TensorMap*> ptrs;
    for (const auto& s : run.snapshots) {
        held.push_back(store.load(run, s.index));
        ptrs.push_back(held.back().get());
    }
    TensorMap out = average_checkpoints(std::span<const TensorMap* const>(ptrs));
    out.meta()["id"] = run.run_id + "@ca";
    out.meta()["run_id"] = run.run_id;
    return out;
}

TensorMap accumulative_average(const RunPool& pool, std::span<const Run* const> runs, Variant variant,
                               const std::string& metric, const WeightStore& store)
{
    if (runs.empty())
        data_error("accumulative average needs at least one run");
    RunningAverage avg;
    VariantOptions opts;
    opts.weights = &store;
    for (const Run* run : runs) {
        const auto vm = build_variant(pool, *run, variant, metric, opts);
        if (!vm.weights)
            data_error("variant " + std::string(variant_name(variant)) + " of run '" + run->run_id +
                       "' has no single weight-space model");
        avg.push(*vm.weights);
    }
    return avg.finalize();
}

std::vector<SoupMember> soup_members(const RunPool& pool, std::size_t k, const std::string& metric,
                                     std::span<const Run* const> runs)
{
    if (k == 0)
        usage_error("soup size k must be >= 1");
    std::vector<const Run*> scope(runs.begin(), runs.end());
    if (scope.empty())
        for (const auto& r : pool.runs())
            scope.push_back(&r);

    std::vector<SoupMember> candidates;
    for (const Run* r : scope)
        for (const auto& s : r->snapshots)
            if (auto v = pool.score(r->run_id, s.index, "src-dev", metric))
                candidates.push_back({r->run_id, s.index, *v});
    if (candidates.size() < k)
        data_error("soup of " + std::to_string(k) + " needs at least that many src-dev scored snapshots, found " +
                   std::to_string(candidates.size()));
    std::sort(candidates.begin(), candidates.end(), [](const SoupMember& a, const SoupMember& b) {
        if (a.src_dev != b.src_dev)
            return a.src_dev > b.src_dev;
        if (a.run_id != b.run_id)
            return a.run_id < b.run_id;
        return a.snapshot_index < b.snapshot_index;
    });
    candidates.resize(k);
    return candidates;
}

std::string soup_key(std::span<const SoupMember> members)
{
    std::vector<std::string> parts;
    for (const auto& m : members)
        parts.push_back(m.run_id + "@" + std::to_string(m.snapshot_index));
    std::sort(parts.begin(), parts.end());
    return "soup:" + join(parts, '+');
}

TensorMap soup(const RunPool& pool, std::size_t k, const std::string& metric, const WeightStore& store,
               std::span<const Run* const> runs)
{
    const auto members = soup_members(pool, k, metric, runs);
    std::vector<std::shared_ptr<const TensorMap>> held;
    std::vector<const TensorMap*> ptrs;
    for (const auto& m : members) {
        held.push_back(store.load(pool.run(m.run_id), m.snapshot_index));
        ptrs.push_back(held.back().get());
    }
    TensorMap out = average_checkpoints(std::span<const TensorMap* const>(ptrs));
    out.meta()["id"] = soup_key(members);
    return out;
}

} // namespace snapsoup
