// SPDX-License-Identifier: Apache-2.0

#include "core/registry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "core/error.hpp"

namespace snapsoup {

namespace fs = std::filesystem;

std::string format_double(double v)
{
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string ConfigKey::to_string() const
{
    return "lr=" + format_double(learning_rate) + ",bs=" + std::to_string(batch_size);
}

const Snapshot& Run::snapshot(int index) const
{
    if (index < 1 || static_cast<std::size_t>(index) > snapshots.size())
        data_error("run '" + run_id + "' has no snapshot " + std::to_string(index));
    return snapshots[static_cast<std::size_t>(index - 1)];
}

std::string_view family_name(SplitFamily family)
{
    switch (family) {
    case SplitFamily::SrcDev:
        return "src-dev";
    case SplitFamily::TrgDev:
        return "trg-dev";
    case SplitFamily::Test:
        return "test";
    }
    return "?";
}

SplitFamily parse_family(std::string_view text)
{
    if (text == "src-dev")
        return SplitFamily::SrcDev;
    if (text == "trg-dev")
        return SplitFamily::TrgDev;
    if (text == "test")
        return SplitFamily::Test;
    usage_error("unknown split family '" + std::string(text) + "'");
}

std::string SplitId::to_string() const
{
    if (family == SplitFamily::SrcDev)
        return "src-dev";
    return std::string(family_name(family)) + ":" + language;
}

SplitId SplitId::parse(std::string_view text)
{
    if (text == "src-dev")
        return src_dev();
    const auto colon = text.find(':');
    if (colon != std::string_view::npos && colon + 1 < text.size()) {
        const auto head = text.substr(0, colon);
        std::string lang(text.substr(colon + 1));
        if (head == "trg-dev")
            return trg_dev(std::move(lang));
        if (head == "test")
            return test(std::move(lang));
    }
    data_error("malformed split id '" + std::string(text) + "' (expected src-dev, trg-dev:<lang> or test:<lang>)");
}

bool is_composite_id(std::string_view run_id)
{
    return run_id.starts_with("avg:") || run_id.starts_with("soup:");
}

RunPool RunPool::from_runs(std::vector<Run> runs, int snapshots_per_run)
{
    if (snapshots_per_run < 1)
        data_error("snapshots_per_run must be >= 1");
    RunPool pool;
    pool.snapshots_per_run_ = snapshots_per_run;
    for (auto& run : runs) {
        if (run.run_id.empty())
            data_error("empty run_id");
        if (is_composite_id(run.run_id))
            data_error("run_id '" + run.run_id + "' uses a reserved composite prefix");
        if (!(run.hparams.learning_rate > 0.0) || !std::isfinite(run.hparams.learning_rate))
            data_error("run '" + run.run_id + "': learning_rate must be > 0");
        if (run.hparams.batch_size <= 0)
            data_error("run '" + run.run_id + "': batch_size must be > 0");
        std::sort(run.snapshots.begin(), run.snapshots.end(),
                  [](const Snapshot& a, const Snapshot& b) { return a.index < b.index; });
        for (std::size_t i = 0; i < run.snapshots.size(); ++i) {
            const int idx = run.snapshots[i].index;
            if (i > 0 && idx == run.snapshots[i - 1].index)
                data_error("run '" + run.run_id + "': duplicate snapshot index " + std::to_string(idx));
            if (idx != static_cast<int>(i) + 1)
                data_error("run '" + run.run_id + "': gap in snapshot indices (expected " + std::to_string(i + 1) +
                           ", found " + std::to_string(idx) + ")");
        }
        if (static_cast<int>(run.snapshots.size()) != snapshots_per_run)
            data_error("run '" + run.run_id + "': expected " + std::to_string(snapshots_per_run) +
                       " snapshots, found " + std::to_string(run.snapshots.size()));
        if (!pool.index_.emplace(run.run_id, pool.runs_.size()).second)
            data_error("duplicate run_id '" + run.run_id + "'");
        pool.runs_.push_back(std::move(run));
    }

    const auto by_config = pool.runs_by_config();
    std::size_t min_seeds = SIZE_MAX;
    std::size_t max_seeds = 0;
    for (const auto& [_, rs] : by_config) {
        min_seeds = std::min(min_seeds, rs.size());
        max_seeds = std::max(max_seeds, rs.size());
    }
    if (!by_config.empty() && min_seeds != max_seeds) {
        for (const auto& [cfg, rs] : by_config)
            if (rs.size() != max_seeds)
                pool.warnings_.push_back("unequal seeds per config: " + cfg.to_string() + " has " +
                                         std::to_string(rs.size()) + " runs, others up to " +
                                         std::to_string(max_seeds));
    }
    return pool;
}

const Run* RunPool::find_run(std::string_view run_id) const
{
    auto it = index_.find(run_id);
    return it == index_.end() ? nullptr : &runs_[it->second];
}

const Run& RunPool::run(std::string_view run_id) const
{
    const Run* r = find_run(run_id);
    if (!r)
        data_error("unknown run_id '" + std::string(run_id) + "'");
    return *r;
}

std::size_t RunPool::snapshot_count() const
{
    std::size_t n = 0;
    for (const auto& r : runs_)
        n += r.snapshots.size();
    return n;
}

std::map<ConfigKey, std::vector<const Run*>> RunPool::runs_by_config() const
{
    std::map<ConfigKey, std::vector<const Run*>> out;
    for (const auto& r : runs_)
        out[r.config()].push_back(&r);
    for (auto& [_, rs] : out)
        std::sort(rs.begin(), rs.end(), [](const Run* a, const Run* b) { return a->run_id < b->run_id; });
    return out;
}

void RunPool::add_score(const ScoreRecord& record)
{
    const auto& key = record.key;
    if (is_composite_id(key.run_id)) {
        if (key.snapshot_index != kCaSnapshotIndex)
            data_error("composite score record '" + key.run_id + "' must use snapshot_index 0");
    } else {
        const Run* r = find_run(key.run_id);
        if (!r)
            data_error("unknown run_id '" + key.run_id + "' in score record");
        if (key.snapshot_index != kCaSnapshotIndex &&
            (key.snapshot_index < 1 || key.snapshot_index > r->final_index()))
            data_error("run '" + key.run_id + "' has no snapshot " + std::to_string(key.snapshot_index));
    }
    SplitId::parse(key.split);
    if (key.metric.empty())
        data_error("empty metric in score record");
    if (!std::isfinite(record.value))
        data_error("non-finite value in score record for '" + key.run_id + "'");
    if (!scores_.emplace(key, record.value).second)
        data_error("duplicate score record (" + key.run_id + ", " + std::to_string(key.snapshot_index) + ", " +
                   key.split + ", " + key.metric + ")");
}

std::optional<double> RunPool::score(std::string_view run_id, int snapshot_index, std::string_view split,
                                     std::string_view metric) const
{
    auto it = scores_.find(ScoreKey{std::string(run_id), snapshot_index, std::string(split), std::string(metric)});
    if (it == scores_.end())
        return std::nullopt;
    return it->second;
}

double RunPool::require_score(std::string_view run_id, int snapshot_index, std::string_view split,
                              std::string_view metric) const
{
    auto v = score(run_id, snapshot_index, split, metric);
    if (!v)
        data_error("missing score record (" + std::string(run_id) + ", " + std::to_string(snapshot_index) + ", " +
                   std::string(split) + ", " + std::string(metric) + ")");
    return *v;
}

std::set<std::string> RunPool::metrics() const
{
    std::set<std::string> out;
    for (const auto& [k, _] : scores_)
        out.insert(k.metric);
    return out;
}

std::string RunPool::default_metric() const
{
    const auto ms = metrics();
    if (ms.size() == 1)
        return *ms.begin();
    if (ms.empty())
        data_error("pool has no score records; cannot infer a metric");
    usage_error("pool has several metrics; pass one explicitly");
}

std::vector<std::string> RunPool::languages(SplitFamily family, std::string_view metric) const
{
    std::set<std::string> splits;
    for (const auto& [k, _] : scores_)
        if (k.metric == metric)
            splits.insert(k.split);
    std::vector<std::string> out;
    for (const auto& s : splits) {
        const auto id = SplitId::parse(s);
        if (id.family == family && family != SplitFamily::SrcDev)
            out.push_back(id.language);
    }
    return out;
}

RunPool pool_from_manifest_json(const nlohmann::json& manifest, const fs::path& base_dir)
{
    if (!manifest.is_object())
        data_error("manifest must be a JSON object");
    int spr = kDefaultSnapshotsPerRun;
    std::vector<Run> runs;
    try {
        if (manifest.contains("snapshots_per_run"))
            spr = manifest.at("snapshots_per_run").get<int>();
        if (manifest.contains("runs")) {
            for (const auto& jr : manifest.at("runs")) {
                Run run;
                run.run_id = jr.at("run_id").get<std::string>();
                run.hparams.learning_rate = jr.at("lr").get<double>();
                run.hparams.batch_size = jr.at("batch_size").get<std::int64_t>();
                run.hparams.seed = jr.value("seed", std::int64_t{0});
                for (const auto& js : jr.at("snapshots")) {
                    Snapshot s;
                    s.index = js.at("index").get<int>();
                    if (js.contains("path") && !js.at("path").is_null()) {
                        fs::path p = js.at("path").get<std::string>();
                        if (p.is_relative() && !base_dir.empty())
                            p = base_dir / p;
                        if (!fs::exists(p))
                            data_error("run '" + run.run_id + "': missing weight file '" + p.string() + "'");
                        s.weights_path = p;
                    }
                    run.snapshots.push_back(std::move(s));
                }
                runs.push_back(std::move(run));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        data_error(std::string("malformed manifest: ") + e.what());
    }
    return RunPool::from_runs(std::move(runs), spr);
}

namespace {

nlohmann::json read_json_file(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        data_error(path.string() + ": invalid JSON: " + e.what());
    }
}

} // namespace

RunPool load_manifest(const fs::path& path)
{
    try {
        return pool_from_manifest_json(read_json_file(path), path.parent_path());
    } catch (const Error& e) {
        throw Error(e.kind(), path.string() + ": " + e.what());
    }
}

RunPool load_manifests(std::span<const fs::path> paths)
{
    if (paths.size() == 1)
        return load_manifest(paths.front());
    std::vector<Run> runs;
    std::optional<int> spr;
    for (const auto& p : paths) {
        RunPool part = load_manifest(p);
        if (spr && *spr != part.snapshots_per_run())
            data_error("manifest fragments disagree on snapshots_per_run");
        spr = part.snapshots_per_run();
        runs.insert(runs.end(), part.runs().begin(), part.runs().end());
    }
    return RunPool::from_runs(std::move(runs), spr.value_or(kDefaultSnapshotsPerRun));
}

nlohmann::json manifest_to_json(const RunPool& pool)
{
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : pool.runs()) {
        nlohmann::json snaps = nlohmann::json::array();
        for (const auto& s : r.snapshots) {
            nlohmann::json js{{"index", s.index}};
            if (s.weights_path)
                js["path"] = s.weights_path->string();
            snaps.push_back(std::move(js));
        }
        runs.push_back({{"run_id", r.run_id},
                        {"lr", r.hparams.learning_rate},
                        {"batch_size", r.hparams.batch_size},
                        {"seed", r.hparams.seed},
                        {"snapshots", std::move(snaps)}});
    }
    return {{"snapshots_per_run", pool.snapshots_per_run()}, {"runs", std::move(runs)}};
}

namespace {

std::string_view trim(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
        s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
        s.remove_suffix(1);
    return s;
}

std::vector<std::string> split_csv_line(std::string_view line)
{
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.emplace_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.emplace_back(trim(cur));
    return out;
}

double parse_value(std::string_view text, const std::string& where)
{
    double v = 0.0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size())
        data_error(where + ": cannot parse value '" + std::string(text) + "'");
    return v;
}

int parse_index(std::string_view text, const std::string& where)
{
    int v = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size())
        data_error(where + ": cannot parse snapshot_index '" + std::string(text) + "'");
    return v;
}

} // namespace

std::vector<ScoreRecord> read_score_file(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::vector<ScoreRecord> out;
    std::string line;
    std::size_t lineno = 0;
    const bool jsonl = path.extension() == ".jsonl" || path.extension() == ".json";
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        const auto t = trim(line);
        if (t.empty())
            continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (jsonl) {
            try {
                const auto j = nlohmann::json::parse(t);
                ScoreRecord r;
                r.key.run_id = j.at("run_id").get<std::string>();
                r.key.snapshot_index = j.at("snapshot_index").get<int>();
                r.key.split = j.at("split").get<std::string>();
                r.key.metric = j.at("metric").get<std::string>();
                const auto& v = j.at("value");
                r.value = v.is_string() ? parse_value(v.get<std::string>(), where) : v.get<double>();
                out.push_back(std::move(r));
            } catch (const nlohmann::json::exception& e) {
                data_error(where + ": malformed score record: " + e.what());
            }
            continue;
        }
        auto fields = split_csv_line(t);
        if (!header_seen) {
            if (fields != std::vector<std::string>{"run_id", "snapshot_index", "split", "metric", "value"})
                data_error(where + ": expected header run_id,snapshot_index,split,metric,value");
            header_seen = true;
            continue;
        }
        if (fields.size() != 5)
            data_error(where + ": expected 5 fields, found " + std::to_string(fields.size()));
        ScoreRecord r;
        r.key.run_id = fields[0];
        r.key.snapshot_index = parse_index(fields[1], where);
        r.key.split = fields[2];
        r.key.metric = fields[3];
        r.value = parse_value(fields[4], where);
        out.push_back(std::move(r));
    }
    if (!jsonl && !header_seen)
        data_error(path.string() + ": empty score file (missing header)");
    return out;
}

RunPool ingest_scores(RunPool pool, std::span<const ScoreRecord> records)
{
    for (const auto& r : records)
        pool.add_score(r);
    return pool;
}

RunPool ingest_scores(RunPool pool, const fs::path& path)
{
    const auto records = read_score_file(path);
    try {
        return ingest_scores(std::move(pool), records);
    } catch (const Error& e) {
        throw Error(e.kind(), path.string() + ": " + e.what());
    }
}

double mean_over_languages(const RunPool& pool, std::string_view run_id, int snapshot_index, SplitFamily family,
                           std::string_view metric)
{
    if (family == SplitFamily::SrcDev)
        usage_error("mean_over_languages needs a per-language family (trg-dev or test)");
    const std::string prefix = std::string(family_name(family)) + ":";
    const ScoreKey lo{std::string(run_id), snapshot_index, prefix, {}};
    double sum = 0.0;
    std::size_t n = 0;
    for (auto it = pool.scores().lower_bound(lo); it != pool.scores().end(); ++it) {
        const auto& k = it->first;
        if (k.run_id != run_id || k.snapshot_index != snapshot_index || !k.split.starts_with(prefix))
            break;
        if (k.metric == metric) {
            sum += it->second;
            ++n;
        }
    }
    if (n == 0)
        data_error("no " + prefix.substr(0, prefix.size() - 1) + " records for (" + std::string(run_id) + ", " +
                   std::to_string(snapshot_index) + ", " + std::string(metric) + ")");
    return sum / static_cast<double>(n);
}

} // namespace snapsoup
