"""Kernel backend selection.

The compiled Cython extension is used when available; otherwise the numpy
fallback. ``NARFLOW_BACKEND=py`` forces the fallback, ``NARFLOW_BACKEND=ext``
demands the extension (import error if missing). Both backends expose the
same functions, so everything above this module is backend-agnostic.
"""

import os

from . import kernels_py

_choice = os.environ.get("NARFLOW_BACKEND", "auto").lower()

if _choice == "py":
    kernels = kernels_py
elif _choice == "ext":
    from . import _kernels as kernels  # type: ignore[no-redef]
else:
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]
    except ImportError:
        kernels = kernels_py


def backend_name() -> str:
    return "compiled" if kernels.IS_COMPILED else "numpy"
