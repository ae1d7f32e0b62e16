#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace hgen {

// Interchange/storage tensor: row-major float32, matches the on-disk
// container payload exactly.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s);
    Tensor(std::vector<int64_t> s, std::vector<float> d);

    int64_t numel() const;
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    void check_finite(const std::string& ctx) const;
};

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Versioned binary container of named tensors. Used for checkpoints, rig
// archives and dataset payloads. Byte-exact round trip.
//
// Layout (little endian):
//   magic "HGTC" | u32 version | u64 payload_crc | u32 count
//   per tensor: u32 name_len | name bytes | u32 rank | i64 extents[rank]
//               | f32 payload[numel]
class TensorStore {
  public:
    static constexpr uint32_t kFormatVersion = 1;

    void put(const std::string& name, Tensor t);
    const Tensor& get(const std::string& name) const;
    const Tensor* find(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
    size_t size() const { return tensors_.size(); }
    const std::map<std::string, Tensor>& all() const { return tensors_; }

    void save(const std::string& path) const;
    static TensorStore load(const std::string& path);

    // Scalar metadata rides along as 1-element tensors.
    void put_scalar(const std::string& name, double v);
    double get_scalar(const std::string& name) const;

  private:
    std::map<std::string, Tensor> tensors_;
};

}  // namespace hgen
