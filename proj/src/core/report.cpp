// SPDX-License-Identifier: Apache-2.0

#include "core/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "core/error.hpp"

namespace snapsoup {

Format parse_format(std::string_view text)
{
    if (text == "markdown" || text == "md")
        return Format::Markdown;
    if (text == "csv")
        return Format::Csv;
    if (text == "json")
        return Format::Json;
    usage_error("unknown format '" + std::string(text) + "' (expected markdown, csv or json)");
}

namespace {

std::string one_decimal(double x)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", x);
    std::string s(buf);
    return s == "-0.0" ? "0.0" : s;
}

std::string csv_field(std::string_view s)
{
    if (s.find_first_of(",\"\n") == std::string_view::npos)
        return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"')
            out += '"';
        out += c;
    }
    return out + "\"";
}

std::string column_label(const CellResult& c)
{
    std::string label(strategy_label(c.strategy));
    if (c.variant)
        label += " " + std::string(variant_name(*c.variant));
    if (c.oracle())
        label += " (oracle)";
    return label;
}

} // namespace

// --- protocol tables ---------------------------------------------------------

std::string render(const ProtocolTable& table, Format fmt)
{
    if (fmt == Format::Json)
        return table_to_json(table).dump(2) + "\n";

    std::vector<const Highlight*> by_cell(table.cells.size(), nullptr);
    for (const auto& h : table.highlights)
        by_cell.at(h.cell) = &h;

    if (fmt == Format::Csv) {
        std::string out = "r,variant,strategy,mean,std,highlight\n";
        for (std::size_t i = 0; i < table.cells.size(); ++i) {
            const auto& c = table.cells[i];
            out += std::to_string(c.r) + "," + (c.variant ? std::string(variant_name(*c.variant)) : "") + "," +
                   std::string(strategy_name(c.strategy)) + "," + format_double(c.mean) + "," + format_double(c.std) +
                   "," + (by_cell[i] ? std::string(level_name(by_cell[i]->level)) : "") + "\n";
        }
        return out;
    }

    // Columns in first-appearance order of (strategy, variant).
    std::vector<std::pair<Strategy, std::optional<Variant>>> columns;
    std::vector<int> rows;
    for (const auto& c : table.cells) {
        const auto col = std::make_pair(c.strategy, c.variant);
        if (std::find(columns.begin(), columns.end(), col) == columns.end())
            columns.push_back(col);
        if (std::find(rows.begin(), rows.end(), c.r) == rows.end())
            rows.push_back(c.r);
    }
    std::sort(rows.begin(), rows.end());

    auto cell_index = [&](int r, const std::pair<Strategy, std::optional<Variant>>& col) -> std::optional<std::size_t> {
        for (std::size_t i = 0; i < table.cells.size(); ++i) {
            const auto& c = table.cells[i];
            if (c.r == r && c.strategy == col.first && c.variant == col.second)
                return i;
        }
        return std::nullopt;
    };

    std::string out = "| r |";
    std::string rule = "|---|";
    std::vector<double> best(columns.size(), -INFINITY);
    for (std::size_t k = 0; k < columns.size(); ++k) {
        for (const auto& c : table.cells)
            if (c.strategy == columns[k].first && c.variant == columns[k].second)
                best[k] = std::max(best[k], c.mean);
        CellResult probe;
        probe.strategy = columns[k].first;
        probe.variant = columns[k].second;
        out += " " + column_label(probe) + " |";
        rule += "---|";
    }
    out += "\n" + rule + "\n";
    for (int r : rows) {
        out += "| " + std::to_string(r) + " |";
        for (std::size_t k = 0; k < columns.size(); ++k) {
            const auto idx = cell_index(r, columns[k]);
            if (!idx) {
                out += " - |";
                continue;
            }
            const auto& c = table.cells[*idx];
            std::string text = display_cell(c.mean, c.std);
            if (c.mean == best[k])
                text = "**" + text + "**";
            if (by_cell[*idx])
                text += by_cell[*idx]->level == HighlightLevel::Strong ? " ^" : " ~";
            out += " " + text + " |";
        }
        out += "\n";
    }
    return out;
}

// --- grids -------------------------------------------------------------------

std::vector<ConfigKey> Grid::rows() const
{
    std::set<ConfigKey> keys;
    for (const auto& col : columns)
        for (const auto& [k, _] : col.cells)
            keys.insert(k);
    return {keys.begin(), keys.end()};
}

GridDelta grid_delta(const GridColumn& column)
{
    if (column.cells.empty())
        data_error("grid column '" + column.name + "' has no cells");
    GridDelta d;
    bool first = true;
    for (const auto& [key, cell] : column.cells)
        if (first || cell.mean > d.best_mean) {
            d.best = key;
            d.best_mean = cell.mean;
            first = false;
        }

    if (column.max_validation) {
        auto it = column.cells.find(*column.max_validation);
        if (it == column.cells.end())
            data_error("grid column '" + column.name + "': max-validation config " + column.max_validation->to_string() +
                       " has no cell");
        d.at_max_validation = it->first;
    } else {
        std::optional<double> top;
        for (const auto& [key, cell] : column.cells) {
            if (!cell.validation)
                data_error("grid column '" + column.name + "' needs validation scores or a max_validation marker (" +
                           key.to_string() + " has none)");
            if (!top || *cell.validation > *top) {
                top = cell.validation;
                d.at_max_validation = key;
            }
        }
    }
    d.max_validation_mean = column.cells.at(d.at_max_validation).mean;
    d.delta = d.best_mean - d.max_validation_mean;
    return d;
}

Grid build_grid(const RunPool& pool, const Evaluator& ev, const std::vector<Variant>& variants,
                const std::string& metric_in, const WeightStore* weights)
{
    if (variants.empty())
        usage_error("grid needs at least one variant");
    const std::string metric = metric_in.empty() ? pool.default_metric() : metric_in;
    LanguageSets langs;
    langs.test = ev.languages(SplitFamily::Test, metric);
    if (langs.test.empty())
        data_error("no test languages for metric '" + metric + "'");
    if (std::find(variants.begin(), variants.end(), Variant::TrgDev) != variants.end()) {
        langs.trg_dev = ev.languages(SplitFamily::TrgDev, metric);
        if (langs.trg_dev.empty())
            data_error("trg-dev variant needs target dev languages");
    }
    VariantOptions opts;
    opts.scorer = &ev;
    opts.weights = ev.needs_weights() ? weights : nullptr;
    opts.languages = langs.trg_dev;

    Grid grid;
    for (Variant v : variants) {
        GridColumn col;
        col.name = std::string(variant_name(v));
        for (const auto& [key, runs] : pool.runs_by_config()) {
            std::vector<double> test;
            std::vector<double> val;
            for (const Run* run : runs) {
                auto vm = build_variant(pool, *run, v, metric, opts);
                resolve_scores(vm, ev, metric, langs);
                test.push_back(*vm.test_mean);
                val.push_back(v == Variant::TrgDev ? *vm.trg_dev_mean : *vm.src_dev);
            }
            const auto t = aggregate(test);
            const auto s = aggregate(val);
            col.cells[key] = {t.mean, t.std, s.mean};
        }
        grid.columns.push_back(std::move(col));
    }
    return grid;
}

nlohmann::ordered_json grid_to_json(const Grid& grid)
{
    nlohmann::ordered_json cols = nlohmann::ordered_json::array();
    for (const auto& col : grid.columns) {
        nlohmann::ordered_json cells = nlohmann::ordered_json::array();
        for (const auto& [key, cell] : col.cells) {
            nlohmann::ordered_json jc;
            jc["lr"] = key.learning_rate;
            jc["bs"] = key.batch_size;
            jc["mean"] = cell.mean;
            jc["std"] = cell.std;
            if (cell.validation)
                jc["validation"] = *cell.validation;
            cells.push_back(std::move(jc));
        }
        nlohmann::ordered_json jcol;
        jcol["name"] = col.name;
        jcol["cells"] = std::move(cells);
        if (col.max_validation)
            jcol["max_validation"] = {{"lr", col.max_validation->learning_rate}, {"bs", col.max_validation->batch_size}};
        cols.push_back(std::move(jcol));
    }
    nlohmann::ordered_json j;
    j["kind"] = "grid";
    j["columns"] = std::move(cols);
    return j;
}

Grid grid_from_json(const nlohmann::json& j)
{
    Grid grid;
    try {
        if (j.contains("kind") && j.at("kind") != "grid")
            data_error("expected a grid, got kind " + j.at("kind").dump());
        for (const auto& jcol : j.at("columns")) {
            GridColumn col;
            col.name = jcol.at("name").get<std::string>();
            for (const auto& jc : jcol.at("cells")) {
                const ConfigKey key{jc.at("lr").get<double>(), jc.at("bs").get<std::int64_t>()};
                GridCell cell;
                cell.mean = jc.at("mean").get<double>();
                cell.std = jc.contains("std") ? jc.at("std").get<double>() : 0.0;
                if (jc.contains("validation") && !jc.at("validation").is_null())
                    cell.validation = jc.at("validation").get<double>();
                if (!col.cells.emplace(key, cell).second)
                    data_error("grid column '" + col.name + "' repeats config " + key.to_string());
            }
            if (jcol.contains("max_validation") && !jcol.at("max_validation").is_null()) {
                const auto& m = jcol.at("max_validation");
                col.max_validation = ConfigKey{m.at("lr").get<double>(), m.at("bs").get<std::int64_t>()};
            }
            grid.columns.push_back(std::move(col));
        }
    } catch (const nlohmann::json::exception& e) {
        data_error(std::string("malformed grid: ") + e.what());
    }
    return grid;
}

std::string render_grid(const Grid& grid, Format fmt)
{
    if (fmt == Format::Json) {
        auto j = grid_to_json(grid);
        nlohmann::ordered_json deltas = nlohmann::ordered_json::array();
        for (const auto& col : grid.columns) {
            const auto d = grid_delta(col);
            deltas.push_back({{"column", col.name},
                              {"best", {{"lr", d.best.learning_rate}, {"bs", d.best.batch_size}}},
                              {"max_validation",
                               {{"lr", d.at_max_validation.learning_rate}, {"bs", d.at_max_validation.batch_size}}},
                              {"delta", d.delta},
                              {"display", one_decimal(d.delta)}});
        }
        j["deltas"] = std::move(deltas);
        return j.dump(2) + "\n";
    }

    std::vector<GridDelta> deltas;
    for (const auto& col : grid.columns)
        deltas.push_back(grid_delta(col));
    const auto rows = grid.rows();

    if (fmt == Format::Csv) {
        std::string out = "lr,bs,column,mean,std,best,max_validation\n";
        for (const auto& key : rows)
            for (std::size_t k = 0; k < grid.columns.size(); ++k) {
                const auto& col = grid.columns[k];
                auto it = col.cells.find(key);
                if (it == col.cells.end())
                    continue;
                out += format_double(key.learning_rate) + "," + std::to_string(key.batch_size) + "," +
                       csv_field(col.name) + "," + format_double(it->second.mean) + "," +
                       format_double(it->second.std) + "," + (it->second.mean == deltas[k].best_mean ? "1" : "0") +
                       "," + (key == deltas[k].at_max_validation ? "1" : "0") + "\n";
            }
        for (std::size_t k = 0; k < grid.columns.size(); ++k)
            out += "delta,," + csv_field(grid.columns[k].name) + "," + format_double(deltas[k].delta) + ",,,\n";
        return out;
    }

    std::string out = "| lr | bs |";
    std::string rule = "|---|---|";
    for (const auto& col : grid.columns) {
        out += " " + col.name + " |";
        rule += "---|";
    }
    out += "\n" + rule + "\n";
    for (const auto& key : rows) {
        out += "| " + format_double(key.learning_rate) + " | " + std::to_string(key.batch_size) + " |";
        for (std::size_t k = 0; k < grid.columns.size(); ++k) {
            const auto& col = grid.columns[k];
            auto it = col.cells.find(key);
            if (it == col.cells.end()) {
                out += " - |";
                continue;
            }
            std::string text = display_cell(it->second.mean, it->second.std);
            if (it->second.mean == deltas[k].best_mean)
                text = "**" + text + "**";
            if (key == deltas[k].at_max_validation)
                text += " *";
            out += " " + text + " |";
        }
        out += "\n";
    }
    out += "| Δ | |";
    for (const auto& d : deltas)
        out += " " + one_decimal(d.delta) + " |";
    return out + "\n";
}

std::string render_document(const nlohmann::ordered_json& doc, Format fmt, std::optional<HighlightBaseline> baseline)
{
    const std::string kind = doc.contains("kind") && doc.at("kind").is_string() ? doc.at("kind").get<std::string>()
                                                                                : "protocol_table";
    if (kind == "grid")
        return render_grid(grid_from_json(doc), fmt);
    if (kind != "protocol_table")
        data_error("unknown document kind '" + kind + "' (expected protocol_table or grid)");
    HighlightRule rule;
    if (baseline) {
        rule.baseline = *baseline;
    } else if (doc.contains("config") && doc.at("config").contains("highlight_baseline")) {
        try {
            rule.baseline = parse_baseline(doc.at("config").at("highlight_baseline").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            data_error(std::string("malformed protocol table config: ") + e.what());
        }
    }
    return render(table_from_json(doc, rule), fmt);
}

} // namespace snapsoup
