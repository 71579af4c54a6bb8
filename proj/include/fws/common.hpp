// Shared basics: error types, index helpers.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace fws {

using i64 = std::int64_t;
using u64 = std::uint64_t;
using u8 = std::uint8_t;

// Raised when a caller violates an operation contract (shape mismatch,
// batch-size mismatch, bad precondition).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Raised for invalid configuration files / CLI arguments.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline i64 ceil_div(i64 a, i64 b) { return (a + b - 1) / b; }

// ceil(p * n) for p in (0,1]; density > 0 always selects at least one item.
inline i64 ceil_frac(double p, i64 n) {
  if (n <= 0) return 0;
  i64 k = static_cast<i64>(std::ceil(p * static_cast<double>(n) - 1e-9));
  if (k < 1) k = 1;
  if (k > n) k = n;
  return k;
}

}  // namespace fws
