// Binary tensor container used by every trainable model. Layout:
//   magic "LLMD" | version u32 LE = 1 | tensor count u32
//   per tensor: name len u16 | UTF-8 name | dtype u8 (0=f32, 1=f64)
//               | rank u8 | dims u32 each | raw little-endian values
// Entries keep file order, so load followed by save is byte-identical.
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmdiff/tensor.hpp"

namespace lmdiff {

struct CheckpointEntry {
    std::string name;
    uint8_t dtype = 0;  // 0 = f32, 1 = f64
    std::vector<uint32_t> dims;
    std::vector<double> values;  // held widest; narrowed on write for f32

    std::size_t numel() const {
        std::size_t n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }
};

class CheckpointFile {
public:
    void add(CheckpointEntry entry);

    template <class T>
    void add_tensor(const std::string& name, const nn::Tensor<T>& t) {
        CheckpointEntry e;
        e.name = name;
        e.dtype = sizeof(T) == 4 ? 0 : 1;
        for (int d : t.shape) e.dims.push_back(static_cast<uint32_t>(d));
        e.values.assign(t.data->begin(), t.data->end());
        add(std::move(e));
    }

    void add_scalar(const std::string& name, double v) {
        CheckpointEntry e;
        e.name = name;
        e.dtype = 1;
        e.dims = {1};
        e.values = {v};
        add(std::move(e));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    const CheckpointEntry& get(const std::string& name) const;
    double get_scalar(const std::string& name) const;

    template <class T>
    nn::Tensor<T> get_tensor(const std::string& name, bool requires_grad = false) const {
        const CheckpointEntry& e = get(name);
        nn::Shape s;
        for (uint32_t d : e.dims) s.push_back(static_cast<int>(d));
        std::vector<T> vals(e.values.begin(), e.values.end());
        return nn::Tensor<T>::from_data(s, std::move(vals), requires_grad);
    }

    const std::vector<CheckpointEntry>& entries() const { return entries_; }

    void save(const std::string& path) const;
    static CheckpointFile load(const std::string& path);

private:
    std::vector<CheckpointEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace lmdiff
