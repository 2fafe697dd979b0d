#include "lmdiff/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lmdiff {

namespace {

// serialize scalars explicitly little-endian regardless of host order
template <class U>
void write_le(std::string& buf, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U read_le(const std::string& buf, std::size_t& pos) {
    if (pos + sizeof(U) > buf.size()) throw std::runtime_error("checkpoint truncated");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += sizeof(U);
    return v;
}

}  // namespace

void CheckpointFile::add(CheckpointEntry entry) {
    if (index_.count(entry.name)) throw std::runtime_error("duplicate checkpoint entry: " + entry.name);
    if (entry.numel() != entry.values.size()) throw std::runtime_error("checkpoint entry size mismatch: " + entry.name);
    index_[entry.name] = entries_.size();
    entries_.push_back(std::move(entry));
}

const CheckpointEntry& CheckpointFile::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("checkpoint entry not found: " + name);
    return entries_[it->second];
}

double CheckpointFile::get_scalar(const std::string& name) const {
    const CheckpointEntry& e = get(name);
    if (e.values.size() != 1) throw std::runtime_error("checkpoint entry is not a scalar: " + name);
    return e.values[0];
}

void CheckpointFile::save(const std::string& path) const {
    std::string buf;
    buf += "LLMD";
    write_le<uint32_t>(buf, 1);
    write_le<uint32_t>(buf, static_cast<uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
        write_le<uint16_t>(buf, static_cast<uint16_t>(e.name.size()));
        buf += e.name;
        buf.push_back(static_cast<char>(e.dtype));
        buf.push_back(static_cast<char>(e.dims.size()));
        for (uint32_t d : e.dims) write_le<uint32_t>(buf, d);
        if (e.dtype == 0) {
            for (double v : e.values) {
                const float f = static_cast<float>(v);
                uint32_t bits;
                std::memcpy(&bits, &f, 4);
                write_le<uint32_t>(buf, bits);
            }
        } else {
            for (double v : e.values) {
                uint64_t bits;
                std::memcpy(&bits, &v, 8);
                write_le<uint64_t>(buf, bits);
            }
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

CheckpointFile CheckpointFile::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    if (buf.size() < 4 || buf.compare(0, 4, "LLMD") != 0) throw std::runtime_error("bad checkpoint magic: " + path);
    pos = 4;
    const uint32_t version = read_le<uint32_t>(buf, pos);
    if (version != 1) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const uint32_t count = read_le<uint32_t>(buf, pos);
    CheckpointFile ckpt;
    for (uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const uint16_t name_len = read_le<uint16_t>(buf, pos);
        if (pos + name_len > buf.size()) throw std::runtime_error("checkpoint truncated");
        e.name = buf.substr(pos, name_len);
        pos += name_len;
        e.dtype = read_le<uint8_t>(buf, pos);
        if (e.dtype > 1) throw std::runtime_error("bad dtype in checkpoint entry: " + e.name);
        const uint8_t rank = read_le<uint8_t>(buf, pos);
        for (uint8_t r = 0; r < rank; ++r) e.dims.push_back(read_le<uint32_t>(buf, pos));
        const std::size_t n = e.numel();
        e.values.resize(n);
        if (e.dtype == 0) {
            for (std::size_t j = 0; j < n; ++j) {
                const uint32_t bits = read_le<uint32_t>(buf, pos);
                float v;
                std::memcpy(&v, &bits, 4);
                e.values[j] = v;
            }
        } else {
            for (std::size_t j = 0; j < n; ++j) {
                const uint64_t bits = read_le<uint64_t>(buf, pos);
                double v;
                std::memcpy(&v, &bits, 8);
                e.values[j] = v;
            }
        }
        ckpt.add(std::move(e));
    }
    if (pos != buf.size()) throw std::runtime_error("trailing bytes in checkpoint: " + path);
    return ckpt;
}

}  // namespace lmdiff
