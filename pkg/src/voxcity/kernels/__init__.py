"""Hot-kernel backend selection.

The compiled Cython backend is used when importable; the numpy reference
backend is the fallback. ``VOXCITY_KERNELS=ref|fast`` forces a choice
(``fast`` raises if the extension is missing). Both backends implement the
same functions with identical float64 semantics; ``tests/test_kernels.py``
asserts bit-level agreement and ``benchmarks/bench_kernels.py`` compares
throughput.
"""

import os

from . import _ref

_choice = os.environ.get("VOXCITY_KERNELS", "auto").lower()

if _choice == "ref":
    _impl = _ref
elif _choice == "fast":
    from . import _fast as _impl  # noqa: F401  (ImportError is the contract)
else:
    try:
        from . import _fast as _impl
    except ImportError:
        _impl = _ref

BACKEND_NAME = _impl.BACKEND_NAME
CORNER_OFFSETS = _ref.CORNER_OFFSETS

bin_points = _impl.bin_points
fractional_coords = _impl.fractional_coords
corner_weights = _impl.corner_weights
sample_gather = _impl.sample_gather
splat_scatter = _impl.splat_scatter
