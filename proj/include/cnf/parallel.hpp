#ifndef CNF_PARALLEL_HPP
#define CNF_PARALLEL_HPP

#include <algorithm>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace cnf {

// Worker count: CNF_THREADS env var if set, else hardware concurrency.
int worker_count();

// Runs fn(i) for i in [0, n). Static chunking over worker threads; results
// that must be combined deterministically should be written to per-index
// slots and reduced by the caller in index order.
void parallel_for(int n, const std::function<void(int)>& fn);

// Chunked map-reduce with a deterministic merge order: each worker owns one
// contiguous chunk and its own State; merge(state) runs sequentially in
// chunk order after all workers join, so floating-point reductions do not
// depend on scheduling (they do depend on the worker count).
template <class State, class Make, class Fn, class Merge>
void parallel_chunks(int n, Make make, Fn fn, Merge merge) {
  if (n <= 0) return;
  const int workers = std::min(worker_count(), n);
  const int chunk = (n + workers - 1) / workers;
  if (workers == 1) {
    State state = make();
    for (int i = 0; i < n; ++i) fn(state, i);
    merge(state);
    return;
  }
  std::vector<State> states;
  states.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) states.push_back(make());
  std::vector<std::thread> threads;
  std::exception_ptr error;
  std::mutex guard;
  for (int w = 0; w < workers; ++w) {
    const int lo = w * chunk;
    const int hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&, w, lo, hi] {
      try {
        for (int i = lo; i < hi; ++i) fn(states[static_cast<size_t>(w)], i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(guard);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
  for (auto& s : states) merge(s);
}

}  // namespace cnf

#endif
