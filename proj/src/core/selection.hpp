// SPDX-License-Identifier: Apache-2.0
//
// Per-run model variants and cross-run selection.

#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "core/evaluator.hpp"
#include "core/registry.hpp"
#include "core/tensor_store.hpp"
#include "core/weight_store.hpp"

namespace snapsoup {

enum class Variant { Last, SrcDev, Ca, TrgDev };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view text);

/// TRG_DEV selects on target-language validation data and is not a true
/// zero-shot result.
inline bool is_oracle(Variant v) { return v == Variant::TrgDev; }

struct VariantModel {
    std::string run_id;
    Variant variant = Variant::Last;
    std::optional<int> snapshot_index;           // LAST, SRC_DEV
    std::map<std::string, int> language_snapshot; // TRG_DEV
    bool checkpoint_average = false;             // CA

    std::shared_ptr<const TensorMap> weights; // materialized on request, never for TRG_DEV

    std::optional<double> src_dev;
    std::optional<double> trg_dev_mean;
    std::optional<double> test_mean;

    /// The single model this variant denotes. Throws for TRG_DEV.
    ModelRef ref() const;
    /// The model used to evaluate `language` (TRG_DEV: that language's pick).
    ModelRef ref_for_language(const std::string& language) const;
};

struct VariantOptions {
    /// Scores snapshots for SRC_DEV/TRG_DEV picks; the pool's records when null.
    const Evaluator* scorer = nullptr;
    /// Materializes weights (CA delegates to ca_of_run) when set.
    const WeightStore* weights = nullptr;
    /// TRG_DEV languages; the pool's trg-dev languages when empty.
    std::vector<std::string> languages;
};

/// LAST -> final snapshot; SRC_DEV -> argmax src-dev (ties: later snapshot);
/// CA -> checkpoint average; TRG_DEV -> per-language argmax of trg-dev
/// (ties: later snapshot).
VariantModel build_variant(const RunPool& pool, const Run& run, Variant v, const std::string& metric,
                           const VariantOptions& opts = {});

struct LanguageSets {
    std::vector<std::string> trg_dev;
    std::vector<std::string> test;
};

/// Fills src_dev (not for TRG_DEV), trg_dev_mean and test_mean via `ev`.
/// Empty language sets skip the corresponding mean.
void resolve_scores(VariantModel& vm, const Evaluator& ev, const std::string& metric, const LanguageSets& langs);

/// Index of the model with the highest src-dev score; ties go to the
/// lexicographically smallest run_id.
std::size_t max_src_dev_index(std::span<const VariantModel> models);
const VariantModel& max_src_dev(std::span<const VariantModel> models);

/// Same rule on the unweighted mean of target-language dev scores (oracle).
std::size_t max_trg_dev_index(std::span<const VariantModel> models);
const VariantModel& max_trg_dev(std::span<const VariantModel> models);

} // namespace snapsoup
