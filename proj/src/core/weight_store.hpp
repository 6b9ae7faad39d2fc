// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>

#include "core/registry.hpp"
#include "core/tensor_store.hpp"

namespace snapsoup {

/// Source of snapshot weights. Implementations must be safe to call from
/// several threads.
class WeightStore {
public:
    virtual ~WeightStore() = default;
    virtual std::shared_ptr<const TensorMap> load(const Run& run, int index) const = 0;
};

/// Loads TPAK files referenced by the manifest, keeping a bounded FIFO cache.
class FileWeightStore final : public WeightStore {
public:
    explicit FileWeightStore(TpakOptions opts = {}, std::size_t cache_entries = 64)
        : opts_(opts), capacity_(cache_entries)
    {
    }

    std::shared_ptr<const TensorMap> load(const Run& run, int index) const override;

private:
    using Key = std::pair<std::string, int>;
    TpakOptions opts_;
    std::size_t capacity_;
    mutable std::mutex mu_;
    mutable std::map<Key, std::shared_ptr<const TensorMap>> cache_;
    mutable std::deque<Key> order_;
};

class MemoryWeightStore final : public WeightStore {
public:
    void put(const std::string& run_id, int index, TensorMap weights);
    std::shared_ptr<const TensorMap> load(const Run& run, int index) const override;

private:
    std::map<std::pair<std::string, int>, std::shared_ptr<const TensorMap>> maps_;
};

} // namespace snapsoup
