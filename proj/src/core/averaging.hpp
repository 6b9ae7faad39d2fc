// SPDX-License-Identifier: Apache-2.0
//
// Uniform weight-space averaging. All reductions accumulate in double and cast
// to float once at the end.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "core/registry.hpp"
#include "core/tensor_store.hpp"
#include "core/weight_store.hpp"

namespace snapsoup {

enum class Variant;

/// Element-wise uniform mean. Every map must be compatible with the first one.
/// `jobs` > 1 splits the reduction across tensor names. A single map is
/// returned unchanged, metadata included.
TensorMap average_checkpoints(std::span<const TensorMap* const> maps, unsigned jobs = 1);
TensorMap average_checkpoints(std::span<const TensorMap> maps, unsigned jobs = 1);

/// Streaming mean: mean += (x - mean) / count, per element, in double.
class RunningAverage {
public:
    /// The first push fixes the name/shape template.
    void push(const TensorMap& m);

    std::size_t count() const { return count_; }
    bool empty() const { return count_ == 0; }

    /// Throws when nothing was pushed.
    TensorMap finalize() const;

private:
    std::size_t count_ = 0;
    std::vector<std::pair<std::string, Shape>> template_;
    std::vector<std::vector<double>> mean_;
    std::vector<std::string> constituents_;
};

/// Checkpoint average (CA): uniform mean of all snapshots of the run.
TensorMap ca_of_run(const Run& run, const WeightStore& store);

/// Mean over the per-run variant models of `runs`. SRC_DEV picks snapshots by
/// the pool's src-dev records for `metric`.
TensorMap accumulative_average(const RunPool& pool, std::span<const Run* const> runs, Variant variant,
                               const std::string& metric, const WeightStore& store);

struct SoupMember {
    std::string run_id;
    int snapshot_index = 0;
    double src_dev = 0.0;

    bool operator==(const SoupMember&) const = default;
};

/// Top-k snapshots by src-dev score across `runs` (all pool runs when empty).
/// Ties: lower run_id, then lower snapshot index.
std::vector<SoupMember> soup_members(const RunPool& pool, std::size_t k, const std::string& metric,
                                     std::span<const Run* const> runs = {});

/// Canonical identity of a soup, used as a composite score key.
std::string soup_key(std::span<const SoupMember> members);

TensorMap soup(const RunPool& pool, std::size_t k, const std::string& metric, const WeightStore& store,
               std::span<const Run* const> runs = {});

/// Identifier for a map inside averaged-model provenance metadata.
std::string constituent_id(const TensorMap& m, std::size_t position);

} // namespace snapsoup
