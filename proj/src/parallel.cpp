#include "ra/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ra {

void set_workers(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int max_workers() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace ra
