#pragma once

// Checkpoint container: magic "MPXCKPT1", a JSON manifest (name, dtype,
// shape, byte offset), then little-endian raw tensor data. Round-trips are
// bitwise exact.

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapix/tensor.hpp"

namespace metapix::ckpt {

inline constexpr char kMagic[8] = {'M', 'P', 'X', 'C', 'K', 'P', 'T', '1'};

class Writer {
  public:
    void add_f32(const std::string& name, const Shape& shape, const float* data) {
        add(name, "f32", shape, data, numel(shape) * sizeof(float));
    }
    void add_f64(const std::string& name, const Shape& shape, const double* data) {
        add(name, "f64", shape, data, numel(shape) * sizeof(double));
    }
    void add_i64(const std::string& name, const std::vector<std::int64_t>& v) {
        add(name, "i64", Shape{int(v.size())}, v.data(), v.size() * sizeof(std::int64_t));
    }
    void add_bytes(const std::string& name, const std::string& bytes) {
        add(name, "u8", Shape{int(bytes.size())}, bytes.data(), bytes.size());
    }

    template <class Real>
    void add_tensor(const std::string& name, const Tensor<Real>& t) {
        if constexpr (std::is_same_v<Real, float>)
            add_f32(name, t.shape, t.data());
        else
            add_f64(name, t.shape, t.data());
    }

    void save(const std::string& path) const {
        nlohmann::json manifest = nlohmann::json::array();
        for (const auto& e : entries_)
            manifest.push_back({{"name", e.name},
                                {"dtype", e.dtype},
                                {"shape", e.shape},
                                {"offset", e.offset},
                                {"nbytes", e.nbytes}});
        const std::string mstr = manifest.dump();

        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        require(f.good(), "checkpoint: cannot open " + path + " for writing");
        f.write(kMagic, 8);
        const std::uint64_t mlen = mstr.size();
        f.write(reinterpret_cast<const char*>(&mlen), 8);
        f.write(mstr.data(), std::streamsize(mstr.size()));
        f.write(reinterpret_cast<const char*>(blob_.data()), std::streamsize(blob_.size()));
        require(f.good(), "checkpoint: short write to " + path);
    }

  private:
    struct Entry {
        std::string name, dtype;
        Shape shape;
        std::uint64_t offset, nbytes;
    };

    void add(const std::string& name, const char* dtype, const Shape& shape, const void* data,
             size_t nbytes) {
        entries_.push_back({name, dtype, shape, blob_.size(), nbytes});
        const auto* p = static_cast<const std::uint8_t*>(data);
        blob_.insert(blob_.end(), p, p + nbytes);
    }

    std::vector<Entry> entries_;
    std::vector<std::uint8_t> blob_;
};

class Reader {
  public:
    explicit Reader(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        require(f.good(), "checkpoint: cannot open " + path);
        char magic[8];
        f.read(magic, 8);
        require(f.good() && std::memcmp(magic, kMagic, 8) == 0,
                "checkpoint: bad magic in " + path);
        std::uint64_t mlen = 0;
        f.read(reinterpret_cast<char*>(&mlen), 8);
        std::string mstr(mlen, '\0');
        f.read(mstr.data(), std::streamsize(mlen));
        require(f.good(), "checkpoint: truncated manifest in " + path);
        blob_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());

        for (const auto& j : nlohmann::json::parse(mstr)) {
            Entry e;
            e.dtype = j.at("dtype").get<std::string>();
            e.shape = j.at("shape").get<Shape>();
            e.offset = j.at("offset").get<std::uint64_t>();
            e.nbytes = j.at("nbytes").get<std::uint64_t>();
            require(e.offset + e.nbytes <= blob_.size(), "checkpoint: truncated data in " + path);
            entries_.emplace(j.at("name").get<std::string>(), e);
        }
    }

    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    Shape shape(const std::string& name) const { return entry(name).shape; }
    std::string dtype(const std::string& name) const { return entry(name).dtype; }

    template <class Real>
    Tensor<Real> read_tensor(const std::string& name) const {
        const auto& e = entry(name);
        const char* want = std::is_same_v<Real, float> ? "f32" : "f64";
        require(e.dtype == want, "checkpoint: " + name + " has dtype " + e.dtype + ", expected " + want);
        auto t = Tensor<Real>::zeros(e.shape);
        std::memcpy(t.data(), blob_.data() + e.offset, e.nbytes);
        return t;
    }

    std::vector<std::int64_t> read_i64(const std::string& name) const {
        const auto& e = entry(name);
        require(e.dtype == "i64", "checkpoint: " + name + " is not i64");
        std::vector<std::int64_t> v(e.nbytes / sizeof(std::int64_t));
        std::memcpy(v.data(), blob_.data() + e.offset, e.nbytes);
        return v;
    }

    std::string read_bytes(const std::string& name) const {
        const auto& e = entry(name);
        return std::string(reinterpret_cast<const char*>(blob_.data()) + e.offset, e.nbytes);
    }

  private:
    struct Entry {
        std::string dtype;
        Shape shape;
        std::uint64_t offset, nbytes;
    };

    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        require(it != entries_.end(), "checkpoint: missing entry " + name);
        return it->second;
    }

    std::map<std::string, Entry> entries_;
    std::vector<std::uint8_t> blob_;
};

}  // namespace metapix::ckpt
