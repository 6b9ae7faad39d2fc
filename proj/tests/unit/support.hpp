// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the unit tests.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "core/registry.hpp"
#include "core/tensor_store.hpp"

namespace testing {

namespace fs = std::filesystem;

class TempDir {
public:
    TempDir()
    {
        std::string tmpl = (fs::temp_directory_path() / "snapsoup-test-XXXXXX").string();
        if (!::mkdtemp(tmpl.data()))
            throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir()
    {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline void write_file(const fs::path& p, const std::string& text)
{
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f << text;
}

inline std::string read_file(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

/// Random map with `tensors` tensors of random rank 0..3.
inline snapsoup::TensorMap random_map(std::mt19937_64& g, int tensors, std::uint64_t max_dim = 6)
{
    std::uniform_int_distribution<int> rank(0, 3);
    std::uniform_int_distribution<std::uint64_t> dim(1, max_dim);
    std::normal_distribution<float> val(0.0f, 3.0f);
    snapsoup::TensorMap tm;
    for (int t = 0; t < tensors; ++t) {
        snapsoup::Shape shape;
        for (int k = rank(g); k > 0; --k)
            shape.push_back(dim(g));
        std::vector<float> data(snapsoup::shape_numel(shape));
        for (auto& x : data)
            x = val(g);
        tm.insert("layer" + std::to_string(t) + ".w", snapsoup::Tensor(shape, std::move(data)));
    }
    return tm;
}

/// Same names and shapes as `like`, fresh values.
inline snapsoup::TensorMap random_like(std::mt19937_64& g, const snapsoup::TensorMap& like, float scale = 3.0f)
{
    std::normal_distribution<float> val(0.0f, scale);
    snapsoup::TensorMap tm;
    for (const auto& [name, t] : like) {
        std::vector<float> data(t.data.size());
        for (auto& x : data)
            x = val(g);
        tm.insert(name, snapsoup::Tensor(t.shape, std::move(data)));
    }
    return tm;
}

/// Score-only runs: `configs` x `seeds`, `snaps` snapshots each, ids "c<k>-s<j>".
inline std::vector<snapsoup::Run> make_runs(int configs, int seeds, int snaps)
{
    std::vector<snapsoup::Run> runs;
    for (int c = 0; c < configs; ++c)
        for (int s = 0; s < seeds; ++s) {
            snapsoup::Run r;
            r.run_id = "c" + std::to_string(c) + "-s" + std::to_string(s);
            r.hparams = {1e-5 * (c + 1), 32, s};
            for (int t = 1; t <= snaps; ++t)
                r.snapshots.push_back({t, std::nullopt});
            runs.push_back(std::move(r));
        }
    return runs;
}

} // namespace testing
