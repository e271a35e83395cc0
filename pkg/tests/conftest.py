"""Pin BLAS to one thread before numpy loads.

Keeps every run bitwise-reproducible and makes the timing-sensitive tests
honest about their single-worker claims.
"""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
