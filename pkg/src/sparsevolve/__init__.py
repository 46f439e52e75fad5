"""Sparse-delta fine-tuning of pruned language models.

Post-training pruning (magnitude or activation-aware scoring), a learnable
sparse delta whose support evolves by drop/grow, sensitivity-driven sparsity
adaptation that holds the merged model at an exact sparsity budget, and
LoRA-family baselines, all at desk scale on a minimal autodiff engine.
"""

import os as _os

# Single-threaded BLAS: reductions keep one fixed order (reproducible runs)
# and the thread pool cannot oversubscribe small containers.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

try:  # if numpy was imported first the env vars are too late; fix up at runtime
    import threadpoolctl as _threadpoolctl

    _threadpoolctl.threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover
    pass

__version__ = "0.1.0"
