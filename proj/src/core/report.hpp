// SPDX-License-Identifier: Apache-2.0
//
// Text renderings of protocol tables and hyperparameter grids.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "core/evaluator.hpp"
#include "core/protocol.hpp"
#include "core/registry.hpp"
#include "core/selection.hpp"
#include "core/weight_store.hpp"

namespace snapsoup {

enum class Format { Markdown, Csv, Json };

Format parse_format(std::string_view text);

/// Markdown: one row per r, one column per (strategy, variant); per-column
/// best in bold, `^` strong and `~` weak highlight. CSV columns:
/// r,variant,strategy,mean,std,highlight. JSON: table_to_json.
std::string render(const ProtocolTable& table, Format fmt);

struct GridCell {
    double mean = 0.0;
    double std = 0.0;
    std::optional<double> validation;
};

struct GridColumn {
    std::string name;
    std::map<ConfigKey, GridCell> cells;
    /// Explicit max-validation config; argmax of cell validation otherwise.
    std::optional<ConfigKey> max_validation;
};

struct Grid {
    std::vector<GridColumn> columns;

    std::vector<ConfigKey> rows() const;
};

struct GridDelta {
    ConfigKey best;
    ConfigKey at_max_validation;
    double best_mean = 0.0;
    double max_validation_mean = 0.0;
    double delta = 0.0; // best_mean - max_validation_mean
};

/// Ties keep the first config in (lr, bs) order. Throws when the column has
/// no cells, or neither a marker nor validation scores.
GridDelta grid_delta(const GridColumn& column);

/// Per config and variant: mean/std over seeds of the target-language mean;
/// validation is the src-dev score (trg-dev mean for TRG_DEV).
Grid build_grid(const RunPool& pool, const Evaluator& ev, const std::vector<Variant>& variants,
                const std::string& metric = {}, const WeightStore* weights = nullptr);

nlohmann::ordered_json grid_to_json(const Grid& grid);
Grid grid_from_json(const nlohmann::json& j);

/// Markdown: rows (lr, bs), per-column best in bold, max-validation cell
/// marked `*`, then a Δ row. CSV: lr,bs,column,mean,std,best,max_validation
/// with a trailing delta row per column.
std::string render_grid(const Grid& grid, Format fmt);

/// Renders either JSON document kind ("protocol_table" or "grid"). Without an
/// explicit baseline a table uses the one recorded in its config (row when
/// absent).
std::string render_document(const nlohmann::ordered_json& doc, Format fmt,
                            std::optional<HighlightBaseline> baseline = std::nullopt);

} // namespace snapsoup
