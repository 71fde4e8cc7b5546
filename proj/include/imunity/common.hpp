#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace imunity {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch in tensor / image operations.
struct ShapeError : Error {
  using Error::Error;
};

// On-disk format violations. Kind lets callers distinguish a bad header
// from a short read without parsing the message.
struct FormatError : Error {
  enum class Kind { BadMagic, BadVersion, Truncated, Overflow, Other };
  Kind kind;
  FormatError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

// Invalid run configuration (unknown key, out-of-range field, ...).
struct ConfigError : Error {
  using Error::Error;
};

// NaN/Inf detected where a finite value is required.
struct NumericError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

template <typename S>
inline void check_finite(const S* data, std::size_t n, const char* what) {
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(data[i])))
      throw NumericError(std::string("non-finite value in ") + what);
  }
}

// Index-space parallel loop. With threads <= 1 runs inline, so results are
// byte-identical to the sequential path; workers write disjoint slots only.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (std::size_t t = 0; t < nt; ++t) {
    pool.emplace_back([&, t]() {
      for (std::size_t i = t; i < n; i += nt) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace imunity
