// SPDX-License-Identifier: Apache-2.0
//
// Scoring backends. A model is identified by a ModelRef: either a pool entry
// (run snapshot, or the run's checkpoint average via snapshot index 0) or a
// composite (accumulative average, soup) carrying a canonical key and,
// when materialized, its weights.

#pragma once

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/registry.hpp"
#include "core/tensor_store.hpp"
#include "core/weight_store.hpp"

namespace snapsoup {

struct ModelRef {
    std::string key;
    std::string run_id;
    int snapshot_index = -1; // >= 1 snapshot, 0 checkpoint average, -1 composite
    std::shared_ptr<const TensorMap> weights;

    bool is_pool_entry() const { return snapshot_index >= 0; }

    static ModelRef snapshot(const std::string& run_id, int index);
    static ModelRef checkpoint_average(const std::string& run_id);
    static ModelRef composite(std::string key, std::shared_ptr<const TensorMap> weights = nullptr);
};

struct SplitSpec {
    SplitId split;
    std::string metric;
};

enum class Backend { ScoreTable, ExternalCommand, SyntheticQuadratic };

std::string_view backend_name(Backend b);

class Evaluator {
public:
    virtual ~Evaluator() = default;

    virtual Backend backend() const = 0;
    /// True when scoring composites requires materialized weights.
    virtual bool needs_weights() const = 0;
    virtual double score(const ModelRef& model, const SplitSpec& split) const = 0;
    /// Languages this backend can score for a per-language family.
    virtual std::vector<std::string> languages(SplitFamily family, const std::string& metric) const = 0;
};

/// Looks scores up in the pool's ingested records.
class ScoreTableEvaluator final : public Evaluator {
public:
    explicit ScoreTableEvaluator(const RunPool& pool) : pool_(pool) {}

    Backend backend() const override { return Backend::ScoreTable; }
    bool needs_weights() const override { return false; }
    double score(const ModelRef& model, const SplitSpec& split) const override;
    std::vector<std::string> languages(SplitFamily family, const std::string& metric) const override;

private:
    const RunPool& pool_;
};

/// Ground truth of a synthetic pool: score(w, split) = s0 - curvature * |w - w*_split|^2.
struct SyntheticTruth {
    double s0 = 100.0;
    double curvature = 1.0;
    TensorMap target_optimum;                        // w*_trg
    TensorMap source_optimum;                        // w*_src
    std::map<std::string, TensorMap> language_optima; // per target language

    const TensorMap& optimum_for(const SplitId& split) const;
    std::vector<std::string> languages() const;
};

nlohmann::json truth_to_json(const SyntheticTruth& truth);
SyntheticTruth truth_from_json(const nlohmann::json& j);
SyntheticTruth load_truth(const std::filesystem::path& path);

/// s0 - curvature * squared distance, accumulated in double.
double quadratic_score(const TensorMap& weights, const TensorMap& optimum, double s0, double curvature);

class SyntheticQuadraticEvaluator final : public Evaluator {
public:
    /// `pool` and `store` resolve pool entries that arrive without weights.
    SyntheticQuadraticEvaluator(SyntheticTruth truth, const RunPool* pool = nullptr,
                                const WeightStore* store = nullptr)
        : truth_(std::move(truth)), pool_(pool), store_(store)
    {
    }

    Backend backend() const override { return Backend::SyntheticQuadratic; }
    bool needs_weights() const override { return true; }
    double score(const ModelRef& model, const SplitSpec& split) const override;
    std::vector<std::string> languages(SplitFamily family, const std::string& metric) const override;

    const SyntheticTruth& truth() const { return truth_; }

private:
    SyntheticTruth truth_;
    const RunPool* pool_;
    const WeightStore* store_;
};

/// Answers pool entries from ingested records when present and memoizes the
/// wrapped backend for everything else (keyed by ModelRef::key and split).
class RecordFirstEvaluator final : public Evaluator {
public:
    RecordFirstEvaluator(const RunPool& pool, const Evaluator& inner) : pool_(pool), inner_(inner) {}

    Backend backend() const override { return inner_.backend(); }
    bool needs_weights() const override { return inner_.needs_weights(); }
    double score(const ModelRef& model, const SplitSpec& split) const override;
    std::vector<std::string> languages(SplitFamily family, const std::string& metric) const override
    {
        return inner_.languages(family, metric);
    }

private:
    const RunPool& pool_;
    const Evaluator& inner_;
    mutable std::mutex mu_;
    mutable std::map<std::pair<std::string, std::string>, double> memo_;
};

struct ExternalConfig {
    std::string command_template; // must contain {model} and {split}
    std::chrono::seconds timeout{3600};
    std::filesystem::path scratch_dir; // composites are written here as TPAK
    unsigned max_parallel = 1;
};

/// Timeout from SNAPSOUP_EVAL_TIMEOUT_SECS when set, else `fallback`.
std::chrono::seconds timeout_from_env(std::chrono::seconds fallback);

/// Runs the argv-substituted template and parses {"score": <float>} from the
/// last non-empty stdout line. Failures raise ErrorKind::External.
double score_external(const std::filesystem::path& model_path, const std::string& split,
                      const std::string& command_template, std::chrono::seconds timeout);

class ExternalCommandEvaluator final : public Evaluator {
public:
    ExternalCommandEvaluator(ExternalConfig cfg, const RunPool& pool, const WeightStore* store = nullptr);
    ~ExternalCommandEvaluator() override;

    Backend backend() const override { return Backend::ExternalCommand; }
    bool needs_weights() const override { return true; }
    double score(const ModelRef& model, const SplitSpec& split) const override;
    std::vector<std::string> languages(SplitFamily family, const std::string& metric) const override;

private:
    std::filesystem::path model_path(const ModelRef& model) const;

    ExternalConfig cfg_;
    const RunPool& pool_;
    const WeightStore* store_;
    bool owns_scratch_ = false;
    mutable std::mutex mu_;
    mutable std::map<std::pair<std::string, std::string>, double> memo_;
    mutable std::map<std::string, std::filesystem::path> written_;
    mutable std::size_t written_count_ = 0;
    mutable unsigned running_ = 0;
    mutable std::condition_variable_any slot_;
};

} // namespace snapsoup
