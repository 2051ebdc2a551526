#pragma once

#include <cstdint>
#include <vector>

#include "moeedit/linalg.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace moeedit {

// Worker cap: explicit set_max_threads() wins, then MOEEDIT_THREADS, then
// the OpenMP default. 0 means auto.
int max_threads();
void set_max_threads(int n);

// Fixed chunk length for deterministic reductions. Partial results are
// accumulated serially inside each chunk and combined in chunk order, so
// sums are bit-identical for every thread count.
inline constexpr Index kReduceChunk = 64;

inline Index num_chunks(Index n, Index chunk = kReduceChunk) {
  return n == 0 ? 0 : (n + chunk - 1) / chunk;
}

template <class F>
void parallel_for(Index n, F&& body) {
#ifdef _OPENMP
  const int nt = max_threads();
  if (nt != 1 && n > 1) {
#pragma omp parallel for schedule(static) num_threads(nt)
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }
#endif
  for (Index i = 0; i < n; ++i) body(i);
}

// In-order chunked reduction over [0, n). chunk_fn(acc, lo, hi) accumulates
// one chunk serially; join(total, part) combines partials in chunk order.
template <class Acc, class Init, class ChunkFn, class Join>
Acc reduce_in_order(Index n, Init init, ChunkFn chunk_fn, Join join,
                    Index chunk = kReduceChunk) {
  const Index c = num_chunks(n, chunk);
  std::vector<Acc> parts(static_cast<size_t>(c), init());
  parallel_for(c, [&](Index ci) {
    const Index lo = ci * chunk;
    const Index hi = std::min(n, lo + chunk);
    chunk_fn(parts[static_cast<size_t>(ci)], lo, hi);
  });
  Acc total = init();
  for (auto& p : parts) join(total, p);
  return total;
}

}  // namespace moeedit
