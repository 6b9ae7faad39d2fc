// SPDX-License-Identifier: Apache-2.0

#include "core/weight_store.hpp"

#include "core/error.hpp"

namespace snapsoup {

std::shared_ptr<const TensorMap> FileWeightStore::load(const Run& run, int index) const
{
    const auto& snap = run.snapshot(index);
    if (!snap.weights_path)
        data_error("snapshot " + std::to_string(index) + " of run '" + run.run_id +
                   "' has no weight file (score-only snapshot)");
    Key key{run.run_id, index};
    {
        std::lock_guard lock(mu_);
        if (auto it = cache_.find(key); it != cache_.end())
            return it->second;
    }
    auto tm = std::make_shared<const TensorMap>(load_tensormap(*snap.weights_path, opts_));
    std::lock_guard lock(mu_);
    if (capacity_ == 0)
        return tm;
    if (cache_.emplace(key, tm).second) {
        order_.push_back(key);
        while (order_.size() > capacity_) {
            cache_.erase(order_.front());
            order_.pop_front();
        }
    }
    return tm;
}

void MemoryWeightStore::put(const std::string& run_id, int index, TensorMap weights)
{
    maps_[{run_id, index}] = std::make_shared<const TensorMap>(std::move(weights));
}

std::shared_ptr<const TensorMap> MemoryWeightStore::load(const Run& run, int index) const
{
    auto it = maps_.find({run.run_id, index});
    if (it == maps_.end())
        data_error("snapshot " + std::to_string(index) + " of run '" + run.run_id + "' has no weights in memory");
    return it->second;
}

} // namespace snapsoup
