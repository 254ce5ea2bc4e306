"""Walsh-Hadamard transform and the randomized Hadamard rotation.

The rotation is ``x_rot = H diag(s) v_hat / sqrt(d)`` with ``H`` the
unnormalized Sylvester-ordered Hadamard matrix and ``s`` a Rademacher
vector.  ``H / sqrt(d)`` is orthonormal and symmetric, so the inverse is
``diag(s) H x_rot / sqrt(d)``.

All functions accept a single vector or a 2-D array of row vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import hadamard

__all__ = [
    "is_power_of_two",
    "fwht_inplace",
    "fwht",
    "fresh_signs",
    "RotatedVector",
    "rotate",
    "invert",
]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_length(n: int) -> None:
    if not is_power_of_two(n):
        raise ValueError(f"Hadamard length must be a power of two, got {n}")


# below this length a cached dense matrix product beats the butterfly loop
_DENSE_MAX = 512


@lru_cache(maxsize=8)
def _dense_hadamard(d: int) -> np.ndarray:
    h = hadamard(d).astype(np.float64)
    h.setflags(write=False)
    return h


def fwht_inplace(x: np.ndarray) -> np.ndarray:
    """Unnormalized fast Walsh-Hadamard transform along the last axis.

    Overwrites ``x`` (which must be a C-contiguous float array) and returns
    it.  ``fwht_inplace(fwht_inplace(x))`` equals ``d * x``.
    """
    d = x.shape[-1]
    _check_length(d)
    if not x.flags.c_contiguous:
        raise ValueError("fwht_inplace needs a C-contiguous buffer")
    rows = x.reshape(-1, d)
    if d <= _DENSE_MAX:
        # H is symmetric, so rows @ H is the row-wise transform
        rows[...] = rows @ _dense_hadamard(d)
        return x
    return _butterfly(rows, d) and x


def _butterfly(rows: np.ndarray, d: int) -> bool:
    h = 1
    while h < d:
        v = rows.reshape(rows.shape[0], d // (2 * h), 2, h)
        top = v[:, :, 0, :].copy()
        v[:, :, 0, :] += v[:, :, 1, :]
        np.subtract(top, v[:, :, 1, :], out=v[:, :, 1, :])
        h *= 2
    return True


def fwht(x) -> np.ndarray:
    """Out-of-place version of :func:`fwht_inplace`."""
    out = np.array(x, dtype=np.float64, order="C", copy=True)
    return fwht_inplace(out)


def fresh_signs(d: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """I.i.d. uniform +/-1 entries (int8) drawn from ``rng``."""
    if d < 1:
        raise ValueError("sign vector length must be >= 1")
    shape = (d,) if size is None else (size, d)
    return (2 * rng.integers(0, 2, size=shape, dtype=np.int8) - 1).astype(np.int8)


@dataclass
class RotatedVector:
    """Rotated unit direction(s) plus the stored original norm(s)."""

    x_rot: np.ndarray
    norm: np.ndarray  # one entry per row; float64 so the round trip is exact


def rotate(v, s: np.ndarray) -> RotatedVector:
    """Normalize ``v`` and apply ``H diag(s) / sqrt(d)``.

    Zero vectors are rejected.  Narrowing the norm to float32 for storage
    is the caller's business (see :mod:`kvquant.schemes`).
    """
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    _check_length(d)
    if s.shape[-1] != d:
        raise ValueError(f"sign vector length {s.shape[-1]} does not match dimension {d}")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("cannot rotate a zero vector")
    x = np.ascontiguousarray(v / norm * s)
    fwht_inplace(x)
    x /= np.sqrt(d)
    return RotatedVector(x_rot=x, norm=norm[..., 0])


def invert(x: RotatedVector, s: np.ndarray) -> np.ndarray:
    """Undo :func:`rotate`: ``norm * diag(s) H x_rot / sqrt(d)``."""
    xr = np.array(x.x_rot, dtype=np.float64, order="C", copy=True)
    d = xr.shape[-1]
    if s.shape[-1] != d:
        raise ValueError(f"sign vector length {s.shape[-1]} does not match dimension {d}")
    fwht_inplace(xr)
    xr *= s
    xr /= np.sqrt(d)
    return xr * np.asarray(x.norm, dtype=np.float64)[..., None]
