#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace metaformer {

#if defined(METAFORMER_F32)
using scalar = float;
#else
using scalar = double;
#endif

using Shape = std::vector<std::int64_t>;

// All tensor storage is 64-byte aligned. Vectorized kernels (and Eigen's
// assignment paths) treat aligned and unaligned heads differently; pinning
// the alignment keeps results independent of where the allocator placed a
// buffer, which the determinism guarantees rely on.
template <typename T, std::size_t Align>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(
        ::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t) {
    ::operator delete(p, std::align_val_t(Align));
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U, Align>&) const { return true; }
  template <typename U>
  bool operator!=(const AlignedAllocator<U, Align>&) const { return false; }
};

using Buffer = std::vector<scalar, AlignedAllocator<scalar, 64>>;

// Shape mismatches between tensors or against an op's contract.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration value (hyperparameter, preset, schema).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: a precondition on how calls are sequenced or typed.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user-supplied data (out-of-range meta fields, unknown keys).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finiteness is required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File format / IO failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace detail

}  // namespace metaformer
