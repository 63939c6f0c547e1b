#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "simple/tensor.hpp"

namespace simple {

// ---------------------------------------------------------------------------
// Self-describing binary container: a flat, ordered list of named arrays
// (name, shape, dtype, raw little-endian bytes) with a trailing FNV-1a
// checksum. Round-trips byte-exactly.
// ---------------------------------------------------------------------------

enum class Dtype : uint8_t { f32 = 0, f64 = 1, i32 = 2, i64 = 3, u8 = 4 };

struct ArrayEntry {
    std::string name;
    Dtype dtype = Dtype::u8;
    std::vector<int64_t> dims;
    std::vector<uint8_t> bytes;

    int64_t count() const {
        int64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

namespace detail {

inline uint64_t fnv1a(const uint8_t* p, size_t n, uint64_t h = 1469598103934665603ULL) {
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename T>
void put(std::vector<uint8_t>& out, T v) {
    uint8_t b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out.insert(out.end(), b, b + sizeof(T));
}

template <typename T>
T take(const std::vector<uint8_t>& in, size_t& off) {
    if (off + sizeof(T) > in.size()) throw std::runtime_error("array container truncated");
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace detail

class ArrayFile {
public:
    static constexpr uint32_t kMagic = 0x53504c42;  // "SPLB"
    static constexpr uint32_t kVersion = 1;

    std::vector<ArrayEntry>& entries() { return entries_; }
    const std::vector<ArrayEntry>& entries() const { return entries_; }

    void add(ArrayEntry e) { entries_.push_back(std::move(e)); }

    template <typename T>
    void add_tensor(const std::string& name, const Tensor<T>& t) {
        ArrayEntry e;
        e.name = name;
        e.dtype = dtype_of<T>();
        e.dims.assign(t.shape.begin(), t.shape.end());
        e.bytes.resize(t.v.size() * sizeof(T));
        std::memcpy(e.bytes.data(), t.v.data(), e.bytes.size());
        entries_.push_back(std::move(e));
    }

    void add_blob(const std::string& name, const std::string& data) {
        ArrayEntry e;
        e.name = name;
        e.dtype = Dtype::u8;
        e.dims = {static_cast<int64_t>(data.size())};
        e.bytes.assign(data.begin(), data.end());
        entries_.push_back(std::move(e));
    }

    void add_scalar_i64(const std::string& name, int64_t v) {
        ArrayEntry e;
        e.name = name;
        e.dtype = Dtype::i64;
        e.dims = {1};
        e.bytes.resize(8);
        std::memcpy(e.bytes.data(), &v, 8);
        entries_.push_back(std::move(e));
    }

    const ArrayEntry* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    const ArrayEntry& require(const std::string& name) const {
        const ArrayEntry* e = find(name);
        if (!e) throw std::runtime_error("array container is missing entry '" + name + "'");
        return *e;
    }

    template <typename T>
    Tensor<T> tensor(const std::string& name) const {
        const ArrayEntry& e = require(name);
        if (e.dtype != dtype_of<T>()) throw std::runtime_error("dtype mismatch for entry '" + name + "'");
        std::vector<int> shape;
        for (auto d : e.dims) shape.push_back(static_cast<int>(d));
        Tensor<T> t(shape);
        if (e.bytes.size() != t.v.size() * sizeof(T))
            throw std::runtime_error("payload size mismatch for entry '" + name + "'");
        std::memcpy(t.v.data(), e.bytes.data(), e.bytes.size());
        return t;
    }

    std::string blob(const std::string& name) const {
        const ArrayEntry& e = require(name);
        return std::string(e.bytes.begin(), e.bytes.end());
    }

    int64_t scalar_i64(const std::string& name) const {
        const ArrayEntry& e = require(name);
        if (e.dtype != Dtype::i64 || e.bytes.size() != 8)
            throw std::runtime_error("entry '" + name + "' is not an i64 scalar");
        int64_t v;
        std::memcpy(&v, e.bytes.data(), 8);
        return v;
    }

    std::vector<uint8_t> serialize() const {
        std::vector<uint8_t> out;
        detail::put<uint32_t>(out, kMagic);
        detail::put<uint32_t>(out, kVersion);
        detail::put<uint64_t>(out, entries_.size());
        for (const auto& e : entries_) {
            detail::put<uint32_t>(out, static_cast<uint32_t>(e.name.size()));
            out.insert(out.end(), e.name.begin(), e.name.end());
            detail::put<uint8_t>(out, static_cast<uint8_t>(e.dtype));
            detail::put<uint32_t>(out, static_cast<uint32_t>(e.dims.size()));
            for (auto d : e.dims) detail::put<int64_t>(out, d);
            detail::put<uint64_t>(out, e.bytes.size());
            out.insert(out.end(), e.bytes.begin(), e.bytes.end());
        }
        detail::put<uint64_t>(out, detail::fnv1a(out.data(), out.size()));
        return out;
    }

    static ArrayFile deserialize(const std::vector<uint8_t>& in) {
        if (in.size() < 8 + 8) throw std::runtime_error("array container truncated");
        const size_t body = in.size() - 8;
        uint64_t want;
        std::memcpy(&want, in.data() + body, 8);
        if (detail::fnv1a(in.data(), body) != want)
            throw std::runtime_error("array container checksum mismatch (corrupt file)");
        size_t off = 0;
        if (detail::take<uint32_t>(in, off) != kMagic) throw std::runtime_error("bad array container magic");
        if (detail::take<uint32_t>(in, off) != kVersion)
            throw std::runtime_error("unsupported array container version");
        const uint64_t n = detail::take<uint64_t>(in, off);
        ArrayFile f;
        for (uint64_t i = 0; i < n; ++i) {
            ArrayEntry e;
            const uint32_t len = detail::take<uint32_t>(in, off);
            if (off + len > body) throw std::runtime_error("array container truncated");
            e.name.assign(in.begin() + static_cast<long>(off), in.begin() + static_cast<long>(off + len));
            off += len;
            e.dtype = static_cast<Dtype>(detail::take<uint8_t>(in, off));
            const uint32_t nd = detail::take<uint32_t>(in, off);
            for (uint32_t d = 0; d < nd; ++d) e.dims.push_back(detail::take<int64_t>(in, off));
            const uint64_t nb = detail::take<uint64_t>(in, off);
            if (off + nb > body) throw std::runtime_error("array container truncated");
            e.bytes.assign(in.begin() + static_cast<long>(off), in.begin() + static_cast<long>(off + nb));
            off += nb;
            f.entries_.push_back(std::move(e));
        }
        return f;
    }

    void save(const std::string& path) const {
        auto bytes = serialize();
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
        os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw std::runtime_error("write failed for '" + path + "'");
    }

    static ArrayFile load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("cannot open '" + path + "'");
        std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        return deserialize(bytes);
    }

    template <typename T>
    static Dtype dtype_of() {
        if constexpr (std::is_same_v<T, float>) return Dtype::f32;
        else if constexpr (std::is_same_v<T, double>) return Dtype::f64;
        else if constexpr (std::is_same_v<T, int32_t>) return Dtype::i32;
        else if constexpr (std::is_same_v<T, int64_t>) return Dtype::i64;
        else return Dtype::u8;
    }

private:
    std::vector<ArrayEntry> entries_;
};

// ---------------------------------------------------------------------------
// Named, ordered parameter set. Order is the serialization order.
// ---------------------------------------------------------------------------

template <typename T>
class ParamStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> init) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter '" + name + "'");
        index_[name] = names_.size();
        names_.push_back(name);
        tensors_.push_back(std::move(init));
        return tensors_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) { return tensors_[find(name)]; }
    const Tensor<T>& at(const std::string& name) const { return tensors_[find(name)]; }

    size_t count() const { return names_.size(); }
    const std::string& name(size_t i) const { return names_[i]; }
    Tensor<T>& tensor(size_t i) { return tensors_[i]; }
    const Tensor<T>& tensor(size_t i) const { return tensors_[i]; }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& t : tensors_) n += t.numel();
        return n;
    }

    void to_arrays(ArrayFile& f, const std::string& prefix = "") const {
        for (size_t i = 0; i < names_.size(); ++i) f.add_tensor(prefix + names_[i], tensors_[i]);
    }

    /// Overwrite values from a container; every parameter must be present
    /// with a matching shape.
    void from_arrays(const ArrayFile& f, const std::string& prefix = "") {
        for (size_t i = 0; i < names_.size(); ++i) {
            Tensor<T> t = f.template tensor<T>(prefix + names_[i]);
            if (t.shape != tensors_[i].shape)
                throw std::runtime_error("parameter '" + names_[i] + "' shape mismatch on load");
            tensors_[i] = std::move(t);
        }
    }

private:
    size_t find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::logic_error("unknown parameter '" + name + "'");
        return it->second;
    }

    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace simple
