"""Backend selection for the attack kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback. Set ``RFI_BACKEND=python`` to force the fallback. ``RFI_THREADS``
caps the thread count of the compiled kernel.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels


def _select():
    wanted = os.environ.get("RFI_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in BACKENDS:
            raise ImportError(f"RFI_BACKEND={wanted!r} is not available (have {sorted(BACKENDS)})")
        return BACKENDS[wanted]
    return _ckernels if _ckernels is not None else _pykernels


_active = _select()
BACKEND = _active.BACKEND


def get_backend(name=None):
    return _active if name is None else BACKENDS[name]


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("RFI_THREADS", "1")))
    except ValueError:
        return 1
