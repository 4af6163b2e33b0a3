#pragma once

// Named-tensor binary container used by checkpoints.
//
// Byte layout (all integers little-endian; file rejects big-endian hosts):
//   magic   : 8 bytes, "CGTENS01"
//   count   : uint64, number of entries
//   entry x count, in insertion order:
//     name_len : uint32
//     name     : name_len bytes, UTF-8, unique within the file
//     rank     : uint32
//     dims     : rank x int32
//     data     : prod(dims) x float64 (IEEE 754)
//
// Values are always stored as float64 regardless of the in-memory scalar
// type; loading into a narrower type truncates precision.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cellgan/params.hpp"
#include "cellgan/tensor.hpp"

namespace cellgan {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace detail {

template <typename U>
inline void write_pod(std::ostream& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.write(buf, sizeof(U));
}

template <typename U>
inline U read_pod(std::istream& in, const std::string& what) {
    char buf[sizeof(U)];
    in.read(buf, sizeof(U));
    if (!in) throw state_error("tensor container: truncated while reading " + what);
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
}

}  // namespace detail

/// In-memory set of named tensors with stable insertion order.
template <typename T>
class TensorFile {
public:
    void put(const std::string& name, const Tensor<T>& t) {
        if (index_.count(name))
            throw config_error("tensor container: duplicate entry " + name);
        index_[name] = names_.size();
        names_.push_back(name);
        tensors_.push_back(t.clone());
    }

    void put_vector(const std::string& name, const std::vector<T>& v) {
        Tensor<T> t({static_cast<int>(v.size())});
        for (size_t i = 0; i < v.size(); ++i) t[i] = v[i];
        put(name, t);
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    size_t size() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }

    const Tensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw state_error("tensor container: missing entry " + name);
        return tensors_[it->second];
    }

    std::vector<T> get_vector(const std::string& name) const {
        const Tensor<T>& t = get(name);
        if (t.rank() != 1) throw state_error("tensor container: " + name + " is not rank-1");
        std::vector<T> v(t.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = t[i];
        return v;
    }

    /// Add every parameter of a store under `prefix` + name.
    void put_store(const std::string& prefix, const ParamStore<T>& store) {
        for (int i = 0; i < static_cast<int>(store.count()); ++i)
            put(prefix + store.at(i).name, store.at(i).value);
    }

    /// Copy values back into an existing store; every parameter must be
    /// present with a matching shape (strict, so silent drift is impossible).
    void load_store(const std::string& prefix, ParamStore<T>& store) const {
        for (int i = 0; i < static_cast<int>(store.count()); ++i) {
            auto& p = store.at(i);
            const Tensor<T>& src = get(prefix + p.name);
            if (!src.same_shape(p.value))
                throw state_error("tensor container: shape mismatch for " + prefix + p.name +
                                  " (" + shape_str(src.shape()) + " vs " +
                                  shape_str(p.value.shape()) + ")");
            p.value = src.clone();
        }
    }

    void write(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw state_error("tensor container: cannot open " + path + " for writing");
        out.write("CGTENS01", 8);
        detail::write_pod<uint64_t>(out, names_.size());
        for (size_t i = 0; i < names_.size(); ++i) {
            const std::string& name = names_[i];
            const Tensor<T>& t = tensors_[i];
            detail::write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_pod<uint32_t>(out, static_cast<uint32_t>(t.rank()));
            for (int d = 0; d < t.rank(); ++d)
                detail::write_pod<int32_t>(out, static_cast<int32_t>(t.dim(d)));
            for (size_t k = 0; k < t.size(); ++k)
                detail::write_pod<double>(out, static_cast<double>(t[k]));
        }
        if (!out) throw state_error("tensor container: write failed for " + path);
    }

    static TensorFile read(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw state_error("tensor container: cannot open " + path);
        char magic[8];
        in.read(magic, 8);
        if (!in || std::memcmp(magic, "CGTENS01", 8) != 0)
            throw state_error("tensor container: bad magic in " + path);
        TensorFile f;
        const uint64_t count = detail::read_pod<uint64_t>(in, "entry count");
        for (uint64_t i = 0; i < count; ++i) {
            const uint32_t name_len = detail::read_pod<uint32_t>(in, "name length");
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            if (!in) throw state_error("tensor container: truncated name in " + path);
            const uint32_t rank = detail::read_pod<uint32_t>(in, "rank");
            std::vector<int> dims;
            size_t numel = 1;
            for (uint32_t d = 0; d < rank; ++d) {
                const int32_t dim = detail::read_pod<int32_t>(in, "dimension");
                if (dim < 0) throw state_error("tensor container: negative dim in " + path);
                dims.push_back(dim);
                numel *= static_cast<size_t>(dim);
            }
            Tensor<T> t(dims);
            for (size_t k = 0; k < numel; ++k)
                t[k] = static_cast<T>(detail::read_pod<double>(in, "value"));
            f.put(name, t);
        }
        return f;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace cellgan
