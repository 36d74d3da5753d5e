#include "prtg/parallel.hpp"

#include <cstdlib>
#include <string>

#include <omp.h>

namespace prtg {

void set_thread_count(int threads) {
  omp_set_num_threads(threads < 1 ? omp_get_num_procs() : threads);
}

int thread_count() { return omp_get_max_threads(); }

std::optional<int> threads_from_env() {
  const char* value = std::getenv("PRTG_THREADS");
  if (value == nullptr) return std::nullopt;
  try {
    const int n = std::stoi(value);
    if (n > 0) return n;
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

}  // namespace prtg
