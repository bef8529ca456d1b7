"""Learn clean stochastic object models directly from noisy measurements.

The pipeline: synthetic lumpy phantoms -> noisy measurements -> diffusion
training with a measurement-aware loss -> deterministic reverse sampling ->
task-based image-quality evaluation.
"""

import os

# AMID_THREADS caps worker parallelism. The only internal parallelism is
# BLAS threading, which numpy fixes at import time, so this must run before
# numpy is first imported in the process.
_threads = os.environ.get("AMID_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del _threads

__version__ = "0.1.0"
