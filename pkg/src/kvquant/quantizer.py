"""Scalar Lloyd-Max codebooks and the 1-bit QJL residual sketch.

Codebooks are designed either for the analytic sphere-coordinate law of
:mod:`kvquant.geometry` or for an empirical sample.  Quantization is
coordinate-wise nearest-level lookup; values beyond the outer thresholds
saturate to the extreme levels.

The QJL sketch stores ``q = sign(H (s' * r))`` and ``||r||`` and decodes
``r_hat = sqrt(pi/2) ||r|| / d * s' * (H q)``, an unbiased estimator of
the residual over the draw of the fresh sign vector ``s'``.
"""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import geometry
from .transform import fwht, fwht_inplace, is_power_of_two

__all__ = [
    "SATURATION_LIMIT",
    "BetaDensity",
    "Codebook",
    "design_lloyd_max",
    "beta_codebook",
    "cell_mse",
    "quantize",
    "dequantize",
    "QjlSketch",
    "qjl_encode",
    "qjl_decode",
    "variance_ratio_analytic",
    "is_saturated",
]

log = logging.getLogger(__name__)

QJL_SCALE = math.sqrt(math.pi / 2.0)

# relative reconstruction error above which a token counts as saturated
SATURATION_LIMIT = 1.0


@dataclass(frozen=True)
class BetaDensity:
    """Analytic design density: one coordinate of a uniform point on S^{d-1}."""

    d: int

    @property
    def label(self) -> str:
        return f"beta-analytic({self.d})"

    def second_moment(self) -> float:
        return 1.0 / self.d


@dataclass(frozen=True)
class Codebook:
    """Sorted reconstruction levels and decision thresholds.

    ``expected_rel_mse`` is the per-token relative MSE (epsilon_B) predicted
    for data drawn from the design density.
    """

    bits: int
    levels: np.ndarray
    thresholds: np.ndarray
    source: str
    expected_rel_mse: float
    converged: bool = True
    iterations: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def size(self) -> int:
        return 1 << self.bits

    def to_dict(self) -> dict[str, Any]:
        return {
            "bits": int(self.bits),
            "levels": [float(v) for v in self.levels],
            "thresholds": [float(v) for v in self.thresholds],
            "source": self.source,
            "expected_rel_mse": float(self.expected_rel_mse),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "Codebook":
        bits = int(obj["bits"])
        levels = np.asarray(obj["levels"], dtype=np.float64)
        thresholds = np.asarray(obj["thresholds"], dtype=np.float64)
        if levels.shape != (1 << bits,) or thresholds.shape != ((1 << bits) - 1,):
            raise ValueError("codebook arrays do not match the declared bit depth")
        if np.any(np.diff(levels) <= 0):
            raise ValueError("codebook levels must be strictly increasing")
        return cls(
            bits=bits,
            levels=levels,
            thresholds=thresholds,
            source=str(obj["source"]),
            expected_rel_mse=float(obj["expected_rel_mse"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Codebook":
        return cls.from_dict(json.loads(text))


def _midpoints(levels: np.ndarray) -> np.ndarray:
    return 0.5 * (levels[1:] + levels[:-1])


def _beta_cells(thresholds: np.ndarray, d: int):
    edges = np.concatenate(([-1.0], thresholds, [1.0]))
    lo, hi = edges[:-1], edges[1:]
    m0 = geometry.beta_moment_partial(lo, hi, d, 0)
    m1 = geometry.beta_moment_partial(lo, hi, d, 1)
    return m0, m1


def cell_mse(levels: np.ndarray, thresholds: np.ndarray, density: BetaDensity) -> float:
    """Mean squared error of a (levels, thresholds) pair under ``density``."""
    d = density.d
    edges = np.concatenate(([-1.0], thresholds, [1.0]))
    lo, hi = edges[:-1], edges[1:]
    m0 = geometry.beta_moment_partial(lo, hi, d, 0)
    m1 = geometry.beta_moment_partial(lo, hi, d, 1)
    m2 = geometry.beta_moment_partial(lo, hi, d, 2)
    return float(np.sum(m2 - 2.0 * levels * m1 + levels * levels * m0))


def _beta_centroid_map(levels: np.ndarray, d: int):
    """Lloyd update for the analytic law and its tridiagonal Jacobian."""
    thresholds = _midpoints(levels)
    m0, m1 = _beta_cells(thresholds, d)
    safe = np.where(m0 > 0, m0, 1.0)
    cent = np.where(m0 > 0, m1 / safe, levels)
    f_t = geometry.beta_pdf(thresholds, d)
    # d c_i / d t_i and d c_i / d t_{i-1}; each threshold is a midpoint
    up = f_t * (thresholds - cent[:-1]) / safe[:-1]
    down = -f_t * (thresholds - cent[1:]) / safe[1:]
    diag = np.zeros_like(levels)
    diag[:-1] += 0.5 * up
    diag[1:] += 0.5 * down
    return cent, diag, 0.5 * up, 0.5 * down


def _lloyd_beta(density: BetaDensity, bits: int, tol: float, max_iter: int):
    from scipy import linalg, special

    d = density.d
    k = 1 << bits
    # start from the high-resolution optimum: point density proportional to
    # f**(1/3), which for this law is again a symmetric Beta with shape (d+3)/6
    a3 = (d + 3) / 6.0
    thresholds = 2.0 * special.betaincinv(a3, a3, np.arange(1, k) / k) - 1.0
    m0, m1 = _beta_cells(thresholds, d)
    levels = m1 / m0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        cent, diag, upper, lower = _beta_centroid_map(levels, d)
        resid = levels - cent
        new = cent
        if k > 2:
            # Newton on levels - centroid(levels) = 0; banded (I - J)
            ab = np.zeros((3, k))
            ab[0, 1:] = -upper
            ab[1, :] = 1.0 - diag
            ab[2, :-1] = -lower
            try:
                step = linalg.solve_banded((1, 1), ab, -resid)
                trial = levels + step
                if np.all(np.diff(trial) > 0) and trial[0] > -1.0 and trial[-1] < 1.0:
                    t_cent = _beta_centroid_map(trial, d)[0]
                    if np.max(np.abs(trial - t_cent)) < np.max(np.abs(resid)):
                        new = trial
            except (linalg.LinAlgError, ValueError):
                pass
        move = float(np.max(np.abs(new - levels)))
        levels = new
        if move < tol:
            converged = True
            break
    return levels, converged, it


def _lloyd_samples(samples: np.ndarray, bits: int, tol: float, max_iter: int):
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    k = 1 << bits
    if x.size < k:
        raise ValueError(f"need at least {k} samples for a {bits}-bit codebook")
    csum = np.concatenate(([0.0], np.cumsum(x)))

    def centroids(thr, prev):
        idx = np.concatenate(([0], np.searchsorted(x, thr, side="right"), [x.size]))
        counts = np.diff(idx)
        sums = csum[idx[1:]] - csum[idx[:-1]]
        return np.where(counts > 0, sums / np.maximum(counts, 1), prev)

    qs = np.quantile(x, np.arange(1, k) / k)
    levels = centroids(qs, np.quantile(x, (np.arange(k) + 0.5) / k))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = centroids(_midpoints(levels), levels)
        move = float(np.max(np.abs(new - levels)))
        levels = new
        if move < tol:
            converged = True
            break
    # guard against duplicate levels from empty cells
    levels = np.maximum.accumulate(levels)
    for i in range(1, k):
        if levels[i] <= levels[i - 1]:
            levels[i] = np.nextafter(levels[i - 1], np.inf)
    return levels, converged, it


def _is_symmetric_sample(x: np.ndarray) -> bool:
    # symmetric when the mean is within 3 standard errors of zero
    x = x.ravel()
    return abs(x.mean()) < 3.0 * x.std() / math.sqrt(x.size) + 1e-15


def design_lloyd_max(
    density,
    bits: int,
    tol: float = 1e-9,
    max_iter: int = 500,
    *,
    holdout: np.ndarray | None = None,
    symmetric: bool | None = None,
    label: str | None = None,
) -> Codebook:
    """Design a Lloyd-Max scalar codebook.

    Parameters
    ----------
    density : BetaDensity or array_like
        Either the analytic sphere-coordinate law or a sample.  A 2-D sample
        is treated as row vectors; its coordinates are pooled for training.
    bits : int
        Bit depth B in [1, 8].
    tol, max_iter : float, int
        Stop once the largest level movement drops below ``tol``.  Hitting
        ``max_iter`` logs a warning and returns the last iterate with
        ``converged=False``.
    holdout : array_like, optional
        Held-out sample for the empirical ``expected_rel_mse``.  Defaults to
        the odd-indexed half of an empirical sample (training uses the even
        half).
    symmetric : bool, optional
        Force or skip the final symmetrization.  By default the analytic law
        is symmetrized and samples are symmetrized when their mean is
        statistically indistinguishable from zero.
    """
    if not 1 <= int(bits) <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    bits = int(bits)

    if isinstance(density, BetaDensity):
        levels, converged, it = _lloyd_beta(density, bits, tol, max_iter)
        sym = True if symmetric is None else symmetric
        if sym:
            levels = 0.5 * (levels - levels[::-1])
        thresholds = _midpoints(levels)
        rel = cell_mse(levels, thresholds, density) / density.second_moment()
        source = label or density.label
    else:
        data = np.asarray(density, dtype=np.float64)
        if holdout is None:
            train, held = data[0::2], data[1::2]
        else:
            train, held = data, np.asarray(holdout, dtype=np.float64)
        levels, converged, it = _lloyd_samples(train, bits, tol, max_iter)
        sym = _is_symmetric_sample(train) if symmetric is None else symmetric
        if sym:
            levels = 0.5 * (levels - levels[::-1])
        thresholds = _midpoints(levels)
        recon = levels[np.searchsorted(thresholds, held)]
        if held.ndim == 2:
            rel = float(np.mean(np.sum((held - recon) ** 2, axis=1) / np.sum(held**2, axis=1)))
        else:
            rel = float(np.mean((held - recon) ** 2) / np.mean(held**2))
        source = label or "empirical"

    if not converged:
        log.warning("Lloyd-Max (%s, B=%d) stopped after %d iterations without converging", source, bits, it)
    return Codebook(
        bits=bits,
        levels=levels,
        thresholds=thresholds,
        source=source,
        expected_rel_mse=float(rel),
        converged=converged,
        iterations=it,
    )


@functools.lru_cache(maxsize=None)
def beta_codebook(d: int, bits: int) -> Codebook:
    """Cached analytic codebook for rotated unit vectors in dimension ``d``."""
    return design_lloyd_max(BetaDensity(int(d)), int(bits))


def quantize(x, cb: Codebook) -> np.ndarray:
    """Nearest-level code for every coordinate (uint8).

    Ties at a threshold go to the lower level; values past the outer
    thresholds saturate to the extreme codes.
    """
    return np.searchsorted(cb.thresholds, np.asarray(x, dtype=np.float64), side="left").astype(np.uint8)


def dequantize(codes, cb: Codebook, norm=None) -> np.ndarray:
    """Map codes to levels, scaled by ``norm`` (scalar or one per row) if given."""
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= cb.size):
        raise ValueError(f"code out of range for a {cb.bits}-bit codebook")
    out = cb.levels[codes]
    if norm is not None:
        out = out * np.asarray(norm, dtype=np.float64)[..., None]
    return out


def is_saturated(rel_mse) -> np.ndarray | bool:
    """True where the relative reconstruction error exceeds the signal energy."""
    return np.asarray(rel_mse) > SATURATION_LIMIT


@dataclass
class QjlSketch:
    """Sign sketch of a residual: signs ``q`` and ``||r||`` at float32 precision."""

    q: np.ndarray
    residual_norm: np.ndarray
    sketch_seed: Any = None


def qjl_encode(r, s_prime: np.ndarray, sketch_seed: Any = None) -> QjlSketch:
    """Sketch ``r`` (one vector or rows) as ``sign(H (s' * r))`` with sign(0) = +1."""
    r = np.asarray(r, dtype=np.float64)
    d = r.shape[-1]
    if not is_power_of_two(d):
        raise ValueError(f"QJL dimension must be a power of two, got {d}")
    if s_prime.shape[-1] != d:
        raise ValueError("sign vector length does not match residual dimension")
    z = np.ascontiguousarray(r * s_prime)
    fwht_inplace(z)
    q = np.where(z >= 0.0, 1, -1).astype(np.int8)
    return QjlSketch(q=q, residual_norm=np.linalg.norm(r, axis=-1).astype(np.float32), sketch_seed=sketch_seed)


def qjl_decode(sk: QjlSketch, s_prime: np.ndarray) -> np.ndarray:
    """Unbiased residual estimate ``sqrt(pi/2) ||r|| / d * s' * (H q)``."""
    d = sk.q.shape[-1]
    if s_prime.shape[-1] != d:
        raise ValueError("sign vector length does not match sketch dimension")
    hq = fwht(sk.q)
    scale = QJL_SCALE * np.asarray(sk.residual_norm, dtype=np.float64) / d
    return np.asarray(scale)[..., None] * s_prime * hq


def variance_ratio_analytic(eps_b: float) -> float:
    """Inner-product variance of a 1-bit sketch over that of a B-bit scalar code.

    ``(pi/2) / eps_b`` for a scalar code with relative MSE ``eps_b`` in (0, 1].
    """
    if not 0.0 < eps_b <= 1.0:
        raise ValueError(f"eps_b must lie in (0, 1], got {eps_b}")
    return (math.pi / 2.0) / eps_b
