"""Attention-gated residual adversarial dose prediction at desk scale."""

import os

# ARANET_THREADS caps BLAS worker threads; must be set before numpy loads.
_threads = os.environ.get("ARANET_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
