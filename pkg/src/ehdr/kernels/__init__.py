"""Hot kernels with a compiled core and a numpy fallback.

The compiled module is used when it was built at install time. Set
``EHDR_BACKEND=python`` to force the fallback (useful for benchmarking and
for cross-checking the two implementations).
"""

import logging
import os

import numpy as np

from . import _fallback

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("EHDR_BACKEND", "").lower() not in ("python", "numpy", "fallback"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # not built
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"
_impl = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active backend (``"compiled"`` or ``"python"``)."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {sorted(BACKENDS)}")
    BACKEND = name
    _impl = BACKENDS[name]


def deform_sample(x, offsets, kh, kw, stride, pad, out_h, out_w):
    x = np.ascontiguousarray(x)
    offsets = np.ascontiguousarray(offsets, dtype=x.dtype)
    return _impl.deform_sample(x, offsets, kh, kw, stride, pad, out_h, out_w)


def deform_sample_backward(x, offsets, dvals, kh, kw, stride, pad, out_h, out_w):
    x = np.ascontiguousarray(x)
    offsets = np.ascontiguousarray(offsets, dtype=x.dtype)
    dvals = np.ascontiguousarray(dvals, dtype=x.dtype)
    return _impl.deform_sample_backward(x, offsets, dvals, kh, kw, stride, pad, out_h, out_w)


def simulate_pixels(logs, times, threshold, tol=1e-9):
    logs = np.ascontiguousarray(logs, dtype=np.float64)
    times = np.ascontiguousarray(times, dtype=np.float64)
    return _impl.simulate_pixels(logs, times, float(threshold), float(tol))
