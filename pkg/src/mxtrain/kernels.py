"""Select the compiled block kernels when available, else the numpy twins.

Set ``MXTRAIN_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("MXTRAIN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "numpy"

RULE_TRUNCATION_FREE = _kernels_py.RULE_TRUNCATION_FREE
RULE_MICROSCALING = _kernels_py.RULE_MICROSCALING

scale_exponents = _impl.scale_exponents
quantize_groups = _impl.quantize_groups
quantize_groups_ema = _impl.quantize_groups_ema
dequantize_groups = _impl.dequantize_groups
