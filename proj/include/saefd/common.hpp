#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace saefd {

// Row-major everywhere: rows are samples or tokens, columns are dimensions.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

// Error taxonomy. The CLI maps config/format errors to exit code 2
// (validation) and everything else to 3 (runtime).
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check_shape(bool ok, const std::string& what) {
    if (!ok) throw shape_error(what);
}

// FNV-1a 64-bit. Used for file manifests and frozen-parameter digests.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

template <typename T>
std::uint64_t mat_digest(const Mat<T>& m, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(m.data(), sizeof(T) * static_cast<std::size_t>(m.size()), h);
}

}  // namespace saefd
