"""Kernel backend selection.

The hot numeric loops (seeded Gaussian fill, row softmax, masked attention)
exist twice: a numba-jitted version and a pure-numpy fallback. The env var
``TFTI2I_KERNELS`` picks one:

    TFTI2I_KERNELS=numba   force the jitted kernels (error if numba missing)
    TFTI2I_KERNELS=numpy   force the pure-numpy fallback
    unset / auto           numba when importable, else numpy

Selection happens once at import. Both backends implement identical
algorithms; within one backend results are bit-reproducible.
``benchmarks/bench_kernels.py`` times the two side by side.
"""

import os

_choice = os.environ.get("TFTI2I_KERNELS", "auto").strip().lower()

if _choice in ("auto", ""):
    try:
        from . import _numba as _impl
    except ImportError:
        from . import _numpy as _impl
elif _choice == "numba":
    from . import _numba as _impl
elif _choice == "numpy":
    from . import _numpy as _impl
else:
    raise ValueError(
        f"TFTI2I_KERNELS must be 'numba', 'numpy' or 'auto', got {_choice!r}"
    )

BACKEND_NAME = _impl.BACKEND_NAME
splitmix64_fill = _impl.splitmix64_fill
gaussian_fill = _impl.gaussian_fill
row_softmax = _impl.row_softmax
attention_weights = _impl.attention_weights
attention = _impl.attention


def backend_name() -> str:
    return BACKEND_NAME
