"""Optional numba kernels; everything falls back to plain numpy."""

from __future__ import annotations

import numpy as np

try:
    import numba

    # workqueue avoids the TBB-version probe and is deterministic
    numba.config.THREADING_LAYER = "workqueue"
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAS_NUMBA = False


if HAS_NUMBA:

    @numba.njit(parallel=True, cache=True)
    def _sincos_kernel(z, s, c):
        for i in numba.prange(z.shape[0]):
            for j in range(z.shape[1]):
                s[i, j] = np.sin(z[i, j])
                c[i, j] = np.cos(z[i, j])

    def sincos(z):
        """Fused sin/cos of a 2-D float64 array."""
        z = np.ascontiguousarray(z)
        s = np.empty_like(z)
        c = np.empty_like(z)
        _sincos_kernel(z, s, c)
        return s, c

else:  # pragma: no cover

    def sincos(z):
        return np.sin(z), np.cos(z)
