"""Counter-based random numbers: values are pure functions of integer keys.

Attention rows and tie-break ranks must be reproducible from (seed, step,
position) alone, whichever policy or batch layout asked for them.
"""

from __future__ import annotations

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / float(1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def hash_u64(*keys) -> np.ndarray:
    """splitmix64 chained over the keys; broadcasts like numpy."""
    with np.errstate(over="ignore"):
        z = np.zeros((), dtype=np.uint64)
        for k in keys:
            k = np.asarray(k).astype(np.uint64)
            z = _mix(z + _GOLD + k * _GOLD)
    return z


def uniform(*keys) -> np.ndarray:
    """Open-interval uniforms in (0, 1)."""
    return ((hash_u64(*keys) >> _S11).astype(np.float64) + 0.5) * _INV53
