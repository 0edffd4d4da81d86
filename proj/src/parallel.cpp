// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nsmae::par {

#ifdef _OPENMP

int max_threads() { return omp_get_max_threads(); }

void set_threads(int n) {
  if (n < 1) n = omp_get_num_procs();
  omp_set_num_threads(n);
}

#else

int max_threads() { return 1; }
void set_threads(int) {}

#endif

}  // namespace nsmae::par
