#pragma once

#include <optional>

namespace prtg {

/// Sets the OpenMP worker count; values < 1 mean "all hardware threads".
void set_thread_count(int threads);
int thread_count();

/// Thread count requested through PRTG_THREADS, if set to a positive integer.
std::optional<int> threads_from_env();

}  // namespace prtg
