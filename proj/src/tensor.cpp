#include "hgen/tensor.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

namespace hgen {

Tensor::Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel()), 0.0f);
}

Tensor::Tensor(std::vector<int64_t> s, std::vector<float> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel())
        throw DimensionError("Tensor: data length does not match shape product");
}

int64_t Tensor::numel() const {
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e <= 0) throw DimensionError("Tensor: non-positive extent");
        n *= e;
    }
    return n;
}

void Tensor::check_finite(const std::string& ctx) const {
    for (float v : data)
        if (!std::isfinite(v)) throw NumericError("non-finite value in " + ctx);
}

void TensorStore::put(const std::string& name, Tensor t) {
    tensors_[name] = std::move(t);
}

const Tensor& TensorStore::get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw SchemaError("missing tensor: " + name);
    return it->second;
}

const Tensor* TensorStore::find(const std::string& name) const {
    auto it = tensors_.find(name);
    return it == tensors_.end() ? nullptr : &it->second;
}

void TensorStore::put_scalar(const std::string& name, double v) {
    put(name, Tensor({1}, {static_cast<float>(v)}));
}

double TensorStore::get_scalar(const std::string& name) const {
    const Tensor& t = get(name);
    if (t.data.size() != 1) throw SchemaError("tensor is not a scalar: " + name);
    return t.data[0];
}

namespace {

constexpr char kMagic[4] = {'H', 'G', 'T', 'C'};

// CRC-64-ECMA, table driven; dataset payloads run to hundreds of MB.
uint64_t crc64(uint64_t crc, const void* buf, size_t len) {
    static const auto table = [] {
        std::array<uint64_t, 256> t{};
        for (uint64_t i = 0; i < 256; ++i) {
            uint64_t c = i << 56;
            for (int b = 0; b < 8; ++b)
                c = (c & 0x8000000000000000ULL) ? (c << 1) ^ 0x42F0E1EBA9EA3693ULL
                                                : (c << 1);
            t[i] = c;
        }
        return t;
    }();
    const auto* p = static_cast<const uint8_t*>(buf);
    for (size_t i = 0; i < len; ++i)
        crc = (crc << 8) ^ table[(crc >> 56) ^ p[i]];
    return crc;
}

template <typename T>
void write_raw(std::string& out, const T& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    out.append(p, sizeof(T));
}

template <typename T>
T read_raw(const std::string& buf, size_t& off) {
    if (off + sizeof(T) > buf.size()) throw SchemaError("container truncated");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void TensorStore::save(const std::string& path) const {
    std::string body;
    write_raw<uint32_t>(body, static_cast<uint32_t>(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
        write_raw<uint32_t>(body, static_cast<uint32_t>(name.size()));
        body.append(name);
        write_raw<uint32_t>(body, static_cast<uint32_t>(t.shape.size()));
        for (int64_t e : t.shape) write_raw<int64_t>(body, e);
        body.append(reinterpret_cast<const char*>(t.data.data()),
                    t.data.size() * sizeof(float));
    }
    uint64_t crc = crc64(0, body.data(), body.size());

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw SchemaError("cannot open for write: " + path);
    f.write(kMagic, 4);
    uint32_t ver = kFormatVersion;
    f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    f.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!f) throw SchemaError("write failed: " + path);
}

TensorStore TensorStore::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw SchemaError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    size_t off = 0;
    if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw SchemaError("bad magic in " + path);
    off = 4;
    uint32_t ver = read_raw<uint32_t>(buf, off);
    if (ver != kFormatVersion)
        throw SchemaError("unsupported container version " + std::to_string(ver));
    uint64_t stored_crc = read_raw<uint64_t>(buf, off);
    uint64_t actual_crc = crc64(0, buf.data() + off, buf.size() - off);
    if (stored_crc != actual_crc) throw SchemaError("checksum mismatch in " + path);

    TensorStore store;
    uint32_t count = read_raw<uint32_t>(buf, off);
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = read_raw<uint32_t>(buf, off);
        if (off + name_len > buf.size()) throw SchemaError("container truncated");
        std::string name(buf.data() + off, name_len);
        off += name_len;
        uint32_t rank = read_raw<uint32_t>(buf, off);
        std::vector<int64_t> shape(rank);
        for (uint32_t r = 0; r < rank; ++r) shape[r] = read_raw<int64_t>(buf, off);
        Tensor t(shape);
        size_t bytes = t.data.size() * sizeof(float);
        if (off + bytes > buf.size()) throw SchemaError("container truncated");
        std::memcpy(t.data.data(), buf.data() + off, bytes);
        off += bytes;
        store.put(name, std::move(t));
    }
    return store;
}

}  // namespace hgen
