#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomsl/error.hpp"

namespace protomsl {

/// Dense tensor with row-major data; dtype only matters on disk.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    int64_t numel() const {
        int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
};

/// Binary container shared by checkpoints and imported backbone weights.
///
/// Layout (little-endian):
///   8 bytes  magic "PMSLARCH"
///   u32      container version (kContainerVersion)
///   u64      header length in bytes
///   header   UTF-8 JSON: {"meta": {...}, "tensors": [{"name","dtype","shape","offset"}]}
///   blob     tensor payloads, f32 or f64, at the listed offsets relative to blob start
struct TensorArchive {
    static constexpr char kMagic[8] = {'P', 'M', 'S', 'L', 'A', 'R', 'C', 'H'};
    static constexpr uint32_t kContainerVersion = 1;

    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;

    bool has(const std::string& name) const { return tensors.count(name) > 0; }

    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ArchiveError("archive has no tensor '" + name + "'");
        return it->second;
    }

    std::vector<uint8_t> serialize(bool as_float32 = false) const {
        nlohmann::json header;
        header["meta"] = meta;
        header["tensors"] = nlohmann::json::array();
        uint64_t offset = 0;
        const size_t elem = as_float32 ? 4 : 8;
        for (const auto& [name, t] : tensors) {
            if (static_cast<int64_t>(t.data.size()) != t.numel())
                throw ArchiveError("tensor '" + name + "' data does not match its shape");
            header["tensors"].push_back(
                {{"name", name}, {"dtype", as_float32 ? "f32" : "f64"}, {"shape", t.shape}, {"offset", offset}});
            offset += t.data.size() * elem;
        }
        std::string h = header.dump();
        std::vector<uint8_t> out;
        out.reserve(8 + 4 + 8 + h.size() + offset);
        append(out, kMagic, 8);
        append_pod(out, kContainerVersion);
        append_pod(out, static_cast<uint64_t>(h.size()));
        append(out, h.data(), h.size());
        for (const auto& [name, t] : tensors) {
            if (as_float32) {
                for (double v : t.data) append_pod(out, static_cast<float>(v));
            } else {
                append(out, t.data.data(), t.data.size() * sizeof(double));
            }
        }
        return out;
    }

    static TensorArchive deserialize(const std::vector<uint8_t>& bytes) {
        size_t pos = 0;
        auto need = [&](size_t n) {
            if (pos + n > bytes.size()) throw ArchiveError("archive truncated");
        };
        need(8);
        if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw ArchiveError("not a protomsl archive (bad magic)");
        pos = 8;
        uint32_t version = read_pod<uint32_t>(bytes, pos, need);
        if (version != kContainerVersion)
            throw CheckpointVersionError("archive container version " + std::to_string(version) +
                                         " is not supported (expected " + std::to_string(kContainerVersion) + ")");
        uint64_t hlen = read_pod<uint64_t>(bytes, pos, need);
        need(hlen);
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(bytes.begin() + pos, bytes.begin() + pos + hlen);
        } catch (const nlohmann::json::exception& e) {
            throw ArchiveError(std::string("corrupt archive header: ") + e.what());
        }
        pos += hlen;
        const size_t blob = pos;
        TensorArchive a;
        a.meta = header.value("meta", nlohmann::json::object());
        for (const auto& t : header.at("tensors")) {
            Tensor tensor;
            tensor.shape = t.at("shape").get<std::vector<int64_t>>();
            std::string dtype = t.at("dtype").get<std::string>();
            uint64_t off = t.at("offset").get<uint64_t>();
            auto n = static_cast<size_t>(tensor.numel());
            tensor.data.resize(n);
            if (dtype == "f64") {
                if (blob + off + n * 8 > bytes.size()) throw ArchiveError("archive truncated");
                std::memcpy(tensor.data.data(), bytes.data() + blob + off, n * 8);
            } else if (dtype == "f32") {
                if (blob + off + n * 4 > bytes.size()) throw ArchiveError("archive truncated");
                for (size_t i = 0; i < n; ++i) {
                    float f;
                    std::memcpy(&f, bytes.data() + blob + off + i * 4, 4);
                    tensor.data[i] = f;
                }
            } else {
                throw ArchiveError("unsupported dtype '" + dtype + "'");
            }
            a.tensors.emplace(t.at("name").get<std::string>(), std::move(tensor));
        }
        return a;
    }

    void save(const std::filesystem::path& path, bool as_float32 = false) const {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        auto bytes = serialize(as_float32);
        auto tmp = path;
        tmp += ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw ArchiveError("cannot write " + tmp.string());
            out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
            if (!out) throw ArchiveError("write failed: " + tmp.string());
        }
        std::filesystem::rename(tmp, path);
    }

    static TensorArchive load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

    static std::vector<uint8_t> read_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ArchiveError("cannot open " + path.string());
        return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    }

private:
    static void append(std::vector<uint8_t>& out, const void* p, size_t n) {
        auto b = static_cast<const uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    template <typename T>
    static void append_pod(std::vector<uint8_t>& out, T v) { append(out, &v, sizeof(T)); }
    template <typename T, typename Need>
    static T read_pod(const std::vector<uint8_t>& bytes, size_t& pos, Need&& need) {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
};

/// 64-bit FNV-1a, used for model version identifiers.
inline uint64_t fnv1a64(const uint8_t* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xF];
    return s;
}

}  // namespace protomsl
