// SPDX-License-Identifier: Apache-2.0
//
// In-memory model snapshots (named f32 tensor maps) and the TPAK container.
//
// TPAK layout, all integers little-endian:
//   [0,4)    magic "TPAK"
//   [4,8)    u32 version (= 1)
//   [8,16)   u64 header length H
//   [16,16+H) UTF-8 JSON header:
//            {"tensors":{"<name>":{"dtype":"f32","shape":[..],"offset":o,"nbytes":n},..},
//             "meta":{..}}
//            tensors in lexicographic name order, offsets relative to the
//            payload start, packed with no padding.
//   payload  concatenated raw f32 data.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace snapsoup {

using Shape = std::vector<std::uint64_t>;

std::uint64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

struct Tensor {
    Shape shape;
    std::vector<float> data;

    Tensor() = default;
    /// Throws a data error when data.size() != product(shape).
    Tensor(Shape shape, std::vector<float> data);

    std::uint64_t numel() const { return data.size(); }
};

/// Bitwise equality (distinguishes -0.0 from 0.0 and compares NaN payloads).
bool bit_equal(const Tensor& a, const Tensor& b);

using Meta = std::map<std::string, std::string>;

/// Named tensors in canonical (byte-lexicographic) order plus free-form
/// provenance metadata.
class TensorMap {
public:
    using Entries = std::map<std::string, Tensor>;

    /// Rejects empty names and duplicates.
    void insert(std::string name, Tensor tensor);

    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return entries_.contains(name); }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    std::uint64_t total_elements() const;

    const Entries& entries() const { return entries_; }
    Entries::const_iterator begin() const { return entries_.begin(); }
    Entries::const_iterator end() const { return entries_.end(); }

    Meta& meta() { return meta_; }
    const Meta& meta() const { return meta_; }

    /// Mutable access to tensor values; the shape is fixed.
    std::vector<float>& values(const std::string& name);

    /// True when any element is NaN or +-Inf.
    bool has_nonfinite() const;

private:
    Entries entries_;
    Meta meta_;
};

bool bit_equal(const TensorMap& a, const TensorMap& b);

struct TpakOptions {
    bool allow_nonfinite = false;
};

std::vector<std::byte> encode_tpak(const TensorMap& tm, const TpakOptions& opts = {});
TensorMap decode_tpak(std::span<const std::byte> bytes, const TpakOptions& opts = {});

void save_tensormap(const TensorMap& tm, const std::filesystem::path& path, const TpakOptions& opts = {});
TensorMap load_tensormap(const std::filesystem::path& path, const TpakOptions& opts = {});

struct ShapeMismatch {
    std::string name;
    Shape shape_a;
    Shape shape_b;

    bool operator==(const ShapeMismatch&) const = default;
};

struct CompatibilityReport {
    std::vector<std::string> missing_in_a;
    std::vector<std::string> missing_in_b;
    std::vector<ShapeMismatch> shape_mismatches;

    bool compatible() const
    {
        return missing_in_a.empty() && missing_in_b.empty() && shape_mismatches.empty();
    }
    std::string summary() const;
};

CompatibilityReport check_compatibility(const TensorMap& a, const TensorMap& b);

} // namespace snapsoup
