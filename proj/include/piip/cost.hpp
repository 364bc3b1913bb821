#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "piip/common.hpp"

namespace piip {
namespace cost {

// Executed-MAC counter. Only matmul-like ops and bilinear sampling register;
// element-wise ops, norms and softmax do not (documented convention).
struct Counter {
  bool enabled = false;
  std::map<std::string, std::uint64_t> rows;
  std::vector<std::string> scope_stack;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto& kv : rows) t += kv.second;
    return t;
  }
};

inline Counter& counter() {
  static thread_local Counter c;
  return c;
}

inline void add_macs(std::uint64_t macs) {
  Counter& c = counter();
  if (!c.enabled || macs == 0) return;
  const std::string& row =
      c.scope_stack.empty() ? std::string("unscoped") : c.scope_stack.back();
  c.rows[row] += macs;
}

// Routes executed MACs into a named report row while alive.
class Scope {
 public:
  explicit Scope(std::string name) { counter().scope_stack.push_back(std::move(name)); }
  ~Scope() { counter().scope_stack.pop_back(); }
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;
};

class Enable {
 public:
  Enable() {
    Counter& c = counter();
    prev_ = c.enabled;
    c.enabled = true;
    c.rows.clear();
  }
  ~Enable() { counter().enabled = prev_; }

 private:
  bool prev_;
};

}  // namespace cost

struct CostRow {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct CostReport {
  std::vector<CostRow> rows;

  std::uint64_t total_params() const {
    std::uint64_t t = 0;
    for (auto& r : rows) t += r.params;
    return t;
  }
  std::uint64_t total_macs() const {
    std::uint64_t t = 0;
    for (auto& r : rows) t += r.macs;
    return t;
  }
  const CostRow* find(const std::string& name) const {
    for (auto& r : rows) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }
  CostRow& row(const std::string& name) {
    for (auto& r : rows) {
      if (r.name == name) return r;
    }
    rows.push_back({name, 0, 0});
    return rows.back();
  }
};

}  // namespace piip
