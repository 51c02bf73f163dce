"""Backend selection for the hot per-correspondence kernel.

The compiled extension is preferred when importable; set RADARBA_BACKEND to
"numpy" or "cython" to force a choice (e.g. for benchmarking or debugging).
"""

import os

import numpy as np

from . import numpy_backend

_requested = os.environ.get("RADARBA_BACKEND", "auto").lower()
_compiled = None
if _requested in ("auto", "cython"):
    try:
        from . import _geom as _compiled  # type: ignore[no-redef]
    except ImportError:
        _compiled = None
        if _requested == "cython":
            raise ImportError(
                "RADARBA_BACKEND=cython but the compiled kernel is not available; "
                "reinstall with the extension built or use RADARBA_BACKEND=numpy"
            )

BACKEND = "cython" if _compiled is not None else "numpy"


def backend_name() -> str:
    return BACKEND


def geometric_blocks(body_j, body_k, var_j, var_k, idx_j, idx_k, R, t, R_cov,
                     with_jacobians=True, huber_delta=0.0):
    if _compiled is not None:
        return _compiled.geometric_blocks(
            np.ascontiguousarray(body_j, dtype=np.float64),
            np.ascontiguousarray(body_k, dtype=np.float64),
            np.ascontiguousarray(var_j, dtype=np.float64),
            np.ascontiguousarray(var_k, dtype=np.float64),
            np.ascontiguousarray(idx_j, dtype=np.int64),
            np.ascontiguousarray(idx_k, dtype=np.int64),
            np.ascontiguousarray(R, dtype=np.float64),
            np.ascontiguousarray(t, dtype=np.float64),
            np.ascontiguousarray(R_cov, dtype=np.float64),
            with_jacobians,
            huber_delta,
        )
    return numpy_backend.geometric_blocks(
        body_j, body_k, var_j, var_k, idx_j, idx_k, R, t, R_cov,
        with_jacobians=with_jacobians, huber_delta=huber_delta,
    )
