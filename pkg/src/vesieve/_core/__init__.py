"""Backend selection for the hot accumulation kernels.

The compiled extension is preferred when importable; set
``VESIEVE_BACKEND=python`` (or ``c``) to force a choice. Everything above
this module is backend-agnostic.
"""

import os

from . import kernels_py

_choice = os.environ.get("VESIEVE_BACKEND", "auto").lower()

if _choice in ("auto", "c"):
    try:
        from . import ckernels as _impl

        BACKEND = "c"
    except ImportError:
        if _choice == "c":
            raise
        _impl = kernels_py
        BACKEND = "python"
elif _choice == "python":
    _impl = kernels_py
    BACKEND = "python"
else:
    raise ValueError(f"unknown VESIEVE_BACKEND {_choice!r}")

score_curvature = _impl.score_curvature
risk_means = _impl.risk_means
