// SPDX-License-Identifier: Apache-2.0

#include "core/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "core/error.hpp"

namespace snapsoup {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kPreambleBytes = 16;
constexpr std::byte kMagic[4] = {std::byte{'T'}, std::byte{'P'}, std::byte{'A'}, std::byte{'K'}};

void put_u32(std::vector<std::byte>& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFFu));
}

void put_u64(std::vector<std::byte>& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::span<const std::byte> b)
{
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
        v = (v << 8) | std::to_integer<std::uint32_t>(b[static_cast<std::size_t>(i)]);
    return v;
}

std::uint64_t get_u64(std::span<const std::byte> b)
{
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
        v = (v << 8) | std::to_integer<std::uint64_t>(b[static_cast<std::size_t>(i)]);
    return v;
}

void check_finite(const std::string& name, const Tensor& t)
{
    for (float x : t.data)
        if (!std::isfinite(x))
            data_error("non-finite value in tensor '" + name + "'");
}

} // namespace

std::uint64_t shape_numel(const Shape& shape)
{
    std::uint64_t n = 1;
    for (auto d : shape) {
        if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d)
            data_error("tensor shape overflows element count: " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

std::string shape_to_string(const Shape& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape_, std::vector<float> data_) : shape(std::move(shape_)), data(std::move(data_))
{
    if (shape_numel(shape) != data.size())
        data_error("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                   shape_to_string(shape));
}

bool bit_equal(const Tensor& a, const Tensor& b)
{
    return a.shape == b.shape && a.data.size() == b.data.size() &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

void TensorMap::insert(std::string name, Tensor tensor)
{
    if (name.empty())
        data_error("tensor name must be non-empty");
    if (shape_numel(tensor.shape) != tensor.data.size())
        data_error("tensor '" + name + "' data length does not match shape " + shape_to_string(tensor.shape));
    auto [it, inserted] = entries_.emplace(std::move(name), std::move(tensor));
    if (!inserted)
        data_error("duplicate tensor name '" + it->first + "'");
}

const Tensor& TensorMap::at(const std::string& name) const
{
    auto it = entries_.find(name);
    if (it == entries_.end())
        data_error("no tensor named '" + name + "'");
    return it->second;
}

std::vector<float>& TensorMap::values(const std::string& name)
{
    auto it = entries_.find(name);
    if (it == entries_.end())
        data_error("no tensor named '" + name + "'");
    return it->second.data;
}

std::uint64_t TensorMap::total_elements() const
{
    std::uint64_t n = 0;
    for (const auto& [_, t] : entries_)
        n += t.numel();
    return n;
}

bool TensorMap::has_nonfinite() const
{
    for (const auto& [_, t] : entries_)
        for (float x : t.data)
            if (!std::isfinite(x))
                return true;
    return false;
}

bool bit_equal(const TensorMap& a, const TensorMap& b)
{
    if (a.size() != b.size() || a.meta() != b.meta())
        return false;
    auto ia = a.begin();
    for (auto ib = b.begin(); ib != b.end(); ++ia, ++ib)
        if (ia->first != ib->first || !bit_equal(ia->second, ib->second))
            return false;
    return true;
}

std::vector<std::byte> encode_tpak(const TensorMap& tm, const TpakOptions& opts)
{
    nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tm) {
        if (!opts.allow_nonfinite)
            check_finite(name, t);
        const std::uint64_t nbytes = t.numel() * sizeof(float);
        nlohmann::ordered_json entry;
        entry["dtype"] = "f32";
        entry["shape"] = t.shape;
        entry["offset"] = offset;
        entry["nbytes"] = nbytes;
        tensors[name] = std::move(entry);
        offset += nbytes;
    }
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : tm.meta())
        meta[k] = v;
    nlohmann::ordered_json header;
    header["tensors"] = std::move(tensors);
    header["meta"] = std::move(meta);
    const std::string text = header.dump();

    std::vector<std::byte> out;
    out.reserve(kPreambleBytes + text.size() + offset);
    for (std::byte b : kMagic)
        out.push_back(b);
    put_u32(out, kVersion);
    put_u64(out, text.size());
    for (char c : text)
        out.push_back(static_cast<std::byte>(c));
    for (const auto& [_, t] : tm)
        for (float x : t.data)
            put_u32(out, std::bit_cast<std::uint32_t>(x));
    return out;
}

TensorMap decode_tpak(std::span<const std::byte> bytes, const TpakOptions& opts)
{
    if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
        data_error("bad magic: not a TPAK file");
    if (bytes.size() < kPreambleBytes)
        data_error("header length mismatch: file shorter than preamble");
    const std::uint32_t version = get_u32(bytes.subspan(4, 4));
    if (version != kVersion)
        data_error("unsupported TPAK version " + std::to_string(version));
    const std::uint64_t header_len = get_u64(bytes.subspan(8, 8));
    if (header_len > bytes.size() - kPreambleBytes)
        data_error("header length mismatch: header claims " + std::to_string(header_len) + " bytes");

    const auto header_bytes = bytes.subspan(kPreambleBytes, header_len);
    const auto payload = bytes.subspan(kPreambleBytes + header_len);

    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(reinterpret_cast<const char*>(header_bytes.data()),
                                               reinterpret_cast<const char*>(header_bytes.data() + header_bytes.size()));
    } catch (const nlohmann::json::exception& e) {
        data_error(std::string("malformed TPAK header: ") + e.what());
    }
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_object())
        data_error("malformed TPAK header: missing tensor index");

    TensorMap tm;
    std::uint64_t expected_offset = 0;
    const std::string* prev = nullptr;
    try {
        for (const auto& [name, entry] : header["tensors"].items()) {
            if (prev && !(*prev < name))
                data_error("tensor index not in canonical order at '" + name + "'");
            prev = &name;
            const auto dtype = entry.at("dtype").get<std::string>();
            if (dtype != "f32")
                data_error("unsupported dtype '" + dtype + "' for tensor '" + name + "'");
            Shape shape = entry.at("shape").get<Shape>();
            const auto offset = entry.at("offset").get<std::uint64_t>();
            const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
            const std::uint64_t numel = shape_numel(shape);
            if (numel > std::numeric_limits<std::uint64_t>::max() / sizeof(float) || nbytes != numel * sizeof(float))
                data_error("nbytes does not match shape for tensor '" + name + "'");
            if (offset != expected_offset)
                data_error("non-contiguous offset for tensor '" + name + "'");
            if (offset + nbytes > payload.size())
                data_error("payload length mismatch: tensor '" + name + "' extends past end of file");
            std::vector<float> data(numel);
            const auto src = payload.subspan(offset, nbytes);
            for (std::uint64_t i = 0; i < numel; ++i)
                data[i] = std::bit_cast<float>(get_u32(src.subspan(i * 4, 4)));
            Tensor t(std::move(shape), std::move(data));
            if (!opts.allow_nonfinite)
                check_finite(name, t);
            tm.insert(name, std::move(t));
            expected_offset += nbytes;
        }
        if (expected_offset != payload.size())
            data_error("payload length mismatch: index covers " + std::to_string(expected_offset) +
                       " bytes, payload has " + std::to_string(payload.size()));
        if (header.contains("meta")) {
            if (!header["meta"].is_object())
                data_error("malformed TPAK header: meta must be an object");
            for (const auto& [k, v] : header["meta"].items())
                tm.meta()[k] = v.get<std::string>();
        }
    } catch (const nlohmann::json::exception& e) {
        data_error(std::string("malformed TPAK header: ") + e.what());
    }
    return tm;
}

void save_tensormap(const TensorMap& tm, const std::filesystem::path& path, const TpakOptions& opts)
{
    const auto bytes = encode_tpak(tm, opts);
    auto tmp = path;
    tmp += ".partial";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            fail(ErrorKind::Io, "cannot open '" + tmp.string() + "' for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            fail(ErrorKind::Io, "write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        fail(ErrorKind::Io, "cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

TensorMap load_tensormap(const std::filesystem::path& path, const TpakOptions& opts)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_tpak(std::as_bytes(std::span(raw)), opts);
    } catch (const Error& e) {
        throw Error(e.kind(), path.string() + ": " + e.what());
    }
}

std::string CompatibilityReport::summary() const
{
    if (compatible())
        return "compatible";
    std::ostringstream os;
    os << "incompatible tensor maps:";
    for (const auto& n : missing_in_a)
        os << " missing_in_a=" << n;
    for (const auto& n : missing_in_b)
        os << " missing_in_b=" << n;
    for (const auto& m : shape_mismatches)
        os << " shape(" << m.name << ")=" << shape_to_string(m.shape_a) << "/" << shape_to_string(m.shape_b);
    return os.str();
}

CompatibilityReport check_compatibility(const TensorMap& a, const TensorMap& b)
{
    CompatibilityReport report;
    auto ia = a.begin();
    auto ib = b.begin();
    while (ia != a.end() || ib != b.end()) {
        if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
            report.missing_in_b.push_back(ia->first);
            ++ia;
        } else if (ia == a.end() || ib->first < ia->first) {
            report.missing_in_a.push_back(ib->first);
            ++ib;
        } else {
            if (ia->second.shape != ib->second.shape)
                report.shape_mismatches.push_back({ia->first, ia->second.shape, ib->second.shape});
            ++ia;
            ++ib;
        }
    }
    return report;
}

} // namespace snapsoup
