#include "moeedit/parallel.hpp"

#include <atomic>
#include <cstdlib>

namespace moeedit {

namespace {

int env_threads() {
  const char* s = std::getenv("MOEEDIT_THREADS");
  if (!s) return 0;
  const long v = std::strtol(s, nullptr, 10);
  return v > 0 ? static_cast<int>(v) : 0;
}

std::atomic<int> g_override{-1};  // -1: unset, 0: auto, >0: cap

}  // namespace

int max_threads() {
  int cap = g_override.load(std::memory_order_relaxed);
  if (cap < 0) cap = env_threads();
#ifdef _OPENMP
  const int hw = omp_get_max_threads();
#else
  const int hw = 1;
#endif
  return cap > 0 ? std::min(cap, hw) : hw;
}

void set_max_threads(int n) { g_override.store(n < 0 ? 0 : n); }

}  // namespace moeedit
