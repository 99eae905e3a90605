"""Hot numerical kernels.

numba-compiled versions are used when numba imports and the environment
variable ``JETREDUCE_DISABLE_NUMBA`` is unset (or ``0``); otherwise the numpy
fallbacks run. ``JETREDUCE_THREADS`` caps numba's thread pool.
"""

from __future__ import annotations

import logging
import os

from . import _numpy

log = logging.getLogger(__name__)

halfwidth = _numpy.halfwidth


def _want_numba() -> bool:
    return os.environ.get("JETREDUCE_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


BACKEND = "numpy"
if _want_numba():
    # the system TBB is too old for numba and only produces a warning
    os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")
    try:
        from . import _numba as _impl

        BACKEND = "numba"
        threads = os.environ.get("JETREDUCE_THREADS")
        if threads:
            import numba

            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
    except ImportError as exc:  # pragma: no cover - numba is a declared dependency
        log.warning("numba unavailable (%s), using numpy kernels", exc)
        _impl = _numpy
else:
    _impl = _numpy

central_jets = _impl.central_jets
monomials = _impl.monomials
poly_eval = _impl.poly_eval

__all__ = ["BACKEND", "central_jets", "halfwidth", "monomials", "poly_eval"]
