// SPDX-License-Identifier: Apache-2.0
//
// Run-by-run evaluation protocol: sample r runs per repetition, apply each
// selection/averaging strategy to every variant and aggregate the target
// scores over repetitions.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "core/evaluator.hpp"
#include "core/registry.hpp"
#include "core/rng.hpp"
#include "core/selection.hpp"
#include "core/weight_store.hpp"

namespace snapsoup {

enum class Strategy { MaxSrcDev, MaxTrgDev, AccumulativeAvg, Soup };

std::string_view strategy_name(Strategy s);
Strategy parse_strategy(std::string_view text);
/// Human-readable column label ("Max-SRC-DEV", "Acc. avg", ...).
std::string_view strategy_label(Strategy s);

enum class HighlightBaseline { Row, Global, Variant };

std::string_view baseline_name(HighlightBaseline b);
HighlightBaseline parse_baseline(std::string_view text);

/// Accumulative-averaging cells (r >= 2) are compared against the best
/// Max-SRC-DEV mean: of the same row (Row), of the whole table (Global) or of
/// the same variant in the same row (Variant).
struct HighlightRule {
    double strong_threshold = 0.2;
    double weak_band = 0.1;
    HighlightBaseline baseline = HighlightBaseline::Row;
};

struct ProtocolConfig {
    int r_max = 10;
    int repetitions = 10;
    std::vector<Variant> variants{Variant::Last, Variant::SrcDev, Variant::Ca};
    std::vector<Strategy> strategies{Strategy::MaxSrcDev, Strategy::AccumulativeAvg};
    std::uint64_t rng_seed = 0;
    std::string metric;                        // pool default when empty
    std::vector<std::string> target_languages; // evaluator's test languages when empty
    std::size_t soup_k = 5;
    bool fresh_per_r = false;     // independent sample for every r instead of nested prefixes
    bool sample_all_runs = false; // uniform over runs instead of distinct configs
    HighlightRule highlight;
    unsigned jobs = 1;
};

struct CellResult {
    int r = 0;
    std::optional<Variant> variant; // empty for SOUP
    Strategy strategy = Strategy::MaxSrcDev;
    double mean = 0.0;
    double std = 0.0; // population std over repetitions
    int n_reps = 0;
    std::vector<double> values; // per repetition, may be empty for imported tables

    bool oracle() const;
};

enum class HighlightLevel { Strong, Weak };

std::string_view level_name(HighlightLevel l);

struct Highlight {
    std::size_t cell = 0; // index into ProtocolTable::cells
    HighlightLevel level = HighlightLevel::Strong;
    double diff = 0.0;     // cell mean minus baseline
    double baseline = 0.0; // best Max-SRC-DEV mean under the rule
};

struct ProtocolTable {
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::vector<CellResult> cells;
    std::vector<Highlight> highlights;

    const CellResult* find(int r, std::optional<Variant> v, Strategy s) const;
};

/// strong: diff >= strong_threshold; weak: |diff| <= weak_band. Both with a
/// 1e-9 slack so decimal inputs classify as written.
std::vector<Highlight> compute_highlights(std::span<const CellResult> cells, const HighlightRule& rule);

/// Mean and population std (Welford). Throws on empty or non-finite input.
CellResult aggregate(std::span<const double> values);

/// r runs with pairwise-distinct (lr, bs): configs uniformly without
/// replacement, each followed by a uniform seed of that config. The result
/// for r is a prefix of the result for any larger r under the same rng state.
std::vector<const Run*> sample_runs(const RunPool& pool, int r, CounterRng& rng, bool all_runs = false);

/// Stream id of repetition `rep` (and of r under fresh sampling).
std::uint64_t repetition_stream(int rep, int r = 0);

/// `weights` materializes composites and is required when ev.needs_weights().
ProtocolTable run_protocol(const RunPool& pool, const Evaluator& ev, const ProtocolConfig& cfg,
                           const WeightStore* weights = nullptr);

/// Canonical composite key of an accumulative average.
std::string average_key(Variant v, std::vector<std::string> run_ids);

/// One decimal, std as `_{..}` suffix: "48.4_{0.5}".
std::string display_cell(double mean, double std);

nlohmann::ordered_json table_to_json(const ProtocolTable& table);
/// Accepts tables written by table_to_json and hand-written fixtures
/// (values/display/highlights optional). Highlights are recomputed.
ProtocolTable table_from_json(const nlohmann::ordered_json& j, const HighlightRule& rule = {});

} // namespace snapsoup
