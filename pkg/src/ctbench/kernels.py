"""Backend selection for the hot loops.

The compiled extension is used when it was built; set ``CTBENCH_PURE_PYTHON=1``
to force the numpy implementation.
"""

import os

from . import _kernels_py

if os.environ.get("CTBENCH_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

project = _impl.project
backproject = _impl.backproject
disk_coverage = _impl.disk_coverage

__all__ = ["BACKEND", "project", "backproject", "disk_coverage"]
