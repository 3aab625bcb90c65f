#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace perrec {

// Error taxonomy. The CLI maps these to exit codes:
// ConfigError -> 2, DataError -> 3, NumericError -> 4, anything else -> 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated preconditions / API misuse (shape mismatch, non-scalar loss, ...).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Non-finite loss or other numeric divergence during training.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// FNV-1a over raw bytes; used for parameter checksums and seed derivation.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 1469598103934665603ull) {
    return fnv1a(s.data(), s.size(), h);
}

}  // namespace perrec
