#pragma once

// Small helpers for OpenMP regions: exception capture and worker counts.

#include <exception>
#include <mutex>

namespace ra {

// Exceptions must not escape an OpenMP structured block. Workers run their
// body through run(); the coordinator calls rethrow() after the region.
class ParallelErrors {
 public:
  template <class F>
  void run(F&& f) noexcept {
    try {
      f();
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu_);
      if (!first_) first_ = std::current_exception();
    }
  }
  void rethrow() {
    if (first_) std::rethrow_exception(first_);
  }

 private:
  std::mutex mu_;
  std::exception_ptr first_;
};

// Sets the OpenMP thread count (no-op without OpenMP). 0 leaves the default.
void set_workers(int n);
int max_workers();

}  // namespace ra
