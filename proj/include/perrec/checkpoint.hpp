#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "perrec/tensor.hpp"

namespace perrec {

// Flat binary named-tensor container:
//   magic "PRC1", u32 version,
//   then per tensor: u32 name_len, name bytes, u32 rank, u64 dims...,
//   raw little-endian float64 payload.
// Round-trips are bit-exact. Run metadata (config echo, epoch, validation
// Hit@30) rides in a JSON sidecar at <path>.meta.json so the tensor container
// stays exactly this layout.
class Checkpoint {
public:
    struct Entry {
        Shape shape;
        std::vector<double> data;
    };

    std::map<std::string, Entry> tensors;
    std::string meta_json;  // "{}" when absent

    void put(const std::string& name, const Tensor& t);
    void put_all(const std::vector<std::pair<std::string, Tensor>>& named);
    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    const Entry& get(const std::string& name) const;

    // Copies stored values into an existing tensor; shapes must agree.
    void copy_into(const std::string& name, const Tensor& t) const;
    void copy_all_into(const std::vector<std::pair<std::string, Tensor>>& named) const;

    int64_t total_params() const;
    int64_t prefix_params(const std::string& prefix) const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

}  // namespace perrec
