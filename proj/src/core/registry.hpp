// SPDX-License-Identifier: Apache-2.0
//
// Experiment pool: runs (hyperparameters + seed), their ordered snapshots and
// the score records attached to them.

#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace snapsoup {

/// Snapshot index used in score records for a run's checkpoint average (CA).
inline constexpr int kCaSnapshotIndex = 0;
inline constexpr int kDefaultSnapshotsPerRun = 10;

struct HyperParams {
    double learning_rate = 0.0;
    std::int64_t batch_size = 0;
    std::int64_t seed = 0;
};

/// (learning rate, batch size); runs sharing a ConfigKey differ only by seed.
struct ConfigKey {
    double learning_rate = 0.0;
    std::int64_t batch_size = 0;

    auto operator<=>(const ConfigKey&) const = default;
    std::string to_string() const;
};

struct Snapshot {
    int index = 0;
    std::optional<std::filesystem::path> weights_path;
};

struct Run {
    std::string run_id;
    HyperParams hparams;
    std::vector<Snapshot> snapshots; // ordered by index, exactly 1..S

    ConfigKey config() const { return {hparams.learning_rate, hparams.batch_size}; }
    int final_index() const { return snapshots.empty() ? 0 : snapshots.back().index; }
    const Snapshot& snapshot(int index) const;
};

enum class SplitFamily { SrcDev, TrgDev, Test };

struct SplitId {
    SplitFamily family = SplitFamily::SrcDev;
    std::string language; // empty for src-dev

    std::string to_string() const;
    static SplitId parse(std::string_view text);
    static SplitId src_dev() { return {SplitFamily::SrcDev, {}}; }
    static SplitId trg_dev(std::string lang) { return {SplitFamily::TrgDev, std::move(lang)}; }
    static SplitId test(std::string lang) { return {SplitFamily::Test, std::move(lang)}; }
};

std::string_view family_name(SplitFamily family);
SplitFamily parse_family(std::string_view text);

struct ScoreKey {
    std::string run_id; // a pool run id, or a composite key ("avg:..." / "soup:...")
    int snapshot_index = 0;
    std::string split;
    std::string metric;

    auto operator<=>(const ScoreKey&) const = default;
};

struct ScoreRecord {
    ScoreKey key;
    double value = 0.0;
};

bool is_composite_id(std::string_view run_id);

class RunPool {
public:
    RunPool() = default;

    /// Validates run invariants; unequal seeds per config are recorded as warnings.
    static RunPool from_runs(std::vector<Run> runs, int snapshots_per_run = kDefaultSnapshotsPerRun);

    const std::vector<Run>& runs() const { return runs_; }
    const Run& run(std::string_view run_id) const;
    const Run* find_run(std::string_view run_id) const;
    int snapshots_per_run() const { return snapshots_per_run_; }
    std::size_t snapshot_count() const;

    std::map<ConfigKey, std::vector<const Run*>> runs_by_config() const;
    const std::vector<std::string>& warnings() const { return warnings_; }

    /// Throws on unknown run/snapshot, duplicate key or non-finite value.
    void add_score(const ScoreRecord& record);
    std::optional<double> score(std::string_view run_id, int snapshot_index, std::string_view split,
                                std::string_view metric) const;
    double require_score(std::string_view run_id, int snapshot_index, std::string_view split,
                         std::string_view metric) const;
    const std::map<ScoreKey, double>& scores() const { return scores_; }

    std::set<std::string> metrics() const;
    /// The metric to use when none is given: the single metric present.
    std::string default_metric() const;
    /// Sorted languages that have at least one record in the family.
    std::vector<std::string> languages(SplitFamily family, std::string_view metric) const;

private:
    std::vector<Run> runs_;
    std::map<std::string, std::size_t, std::less<>> index_;
    int snapshots_per_run_ = kDefaultSnapshotsPerRun;
    std::vector<std::string> warnings_;
    std::map<ScoreKey, double> scores_;
};

RunPool pool_from_manifest_json(const nlohmann::json& manifest, const std::filesystem::path& base_dir = {});
RunPool load_manifest(const std::filesystem::path& path);
/// Merges manifest fragments into one pool; run ids must stay unique.
RunPool load_manifests(std::span<const std::filesystem::path> paths);
nlohmann::json manifest_to_json(const RunPool& pool);

/// CSV (header run_id,snapshot_index,split,metric,value) or JSONL with the same keys.
std::vector<ScoreRecord> read_score_file(const std::filesystem::path& path);
RunPool ingest_scores(RunPool pool, const std::filesystem::path& path);
RunPool ingest_scores(RunPool pool, std::span<const ScoreRecord> records);

/// Unweighted mean over every language recorded for the family.
double mean_over_languages(const RunPool& pool, std::string_view run_id, int snapshot_index, SplitFamily family,
                           std::string_view metric);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

} // namespace snapsoup
