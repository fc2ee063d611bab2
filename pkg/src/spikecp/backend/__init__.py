"""Simulation kernel selection: compiled extension if available, numpy otherwise.

Set ``SPIKECP_BACKEND=python`` in the environment to force the pure-numpy
kernel (used by the benchmark and the backend-equivalence tests).
"""

from __future__ import annotations

import os

from spikecp.backend import _forward_py

BACKEND = "python"
_impl = _forward_py

if os.environ.get("SPIKECP_BACKEND", "").lower() not in ("python", "py"):
    try:
        from spikecp.backend import _forward_cy as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        _impl = _compiled

simulate_counts = _impl.simulate_counts


def available_kernels() -> dict:
    """All importable kernel implementations, keyed by name."""
    kernels = {"python": _forward_py.simulate_counts}
    try:
        from spikecp.backend import _forward_cy as _compiled
    except ImportError:
        pass
    else:
        kernels["cython"] = _compiled.simulate_counts
    return kernels
