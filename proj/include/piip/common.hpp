#pragma once

#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace piip {

// Validation failures (shapes, config rules, file formats).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension mismatches in numeric ops.
class DimError : public std::runtime_error {
 public:
  explicit DimError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or other numeric breakdowns.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::int64_t numel_of(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// Worker cap for parallel sections, settable via PIIP_THREADS.
inline int worker_count() {
  if (const char* env = std::getenv("PIIP_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 4;
}

}  // namespace piip
