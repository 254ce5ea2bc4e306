"""Two-sample instruments and the quorum rule.

Three instruments compare per-trial outcomes of two schemes A and B:

* ``MW``      Mann-Whitney U with the rank-biserial effect size,
* ``KS``      two-sample Kolmogorov-Smirnov,
* ``ENERGY``  energy distance between multivariate samples with a
              permutation p-value.

Sign contract: every instrument reports ``direction="A_better"`` when A's
values are stochastically smaller, since all compared quantities are
errors.  For MW this is ``r < 0``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special, stats
from scipy.spatial import distance

from .metrics import SHANNON, CoordinateSystem

__all__ = [
    "MIN_SAMPLES",
    "DEFAULT_N_PERM",
    "InstrumentResult",
    "QuorumVerdict",
    "mann_whitney",
    "ks_two_sample",
    "energy_distance",
    "permutation_test",
    "energy_test",
    "quorum",
]

MIN_SAMPLES = 8
DEFAULT_N_PERM = 999
ALPHA = 0.05


@dataclass(frozen=True)
class InstrumentResult:
    instrument: str  # "MW", "KS" or "ENERGY"
    statistic: float
    effect: float
    p_value: float
    direction: str  # "A_better", "B_better" or "none"

    def significant(self, alpha: float = ALPHA) -> bool:
        return self.p_value < alpha and self.direction != "none"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class QuorumVerdict:
    winner: str  # "A", "B" or "tie"
    agreeing_instruments: int


def _as_sample(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < MIN_SAMPLES:
        raise ValueError(f"{name} needs at least {MIN_SAMPLES} values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def _direction(sign: float) -> str:
    if sign < 0:
        return "A_better"
    if sign > 0:
        return "B_better"
    return "none"


def _median_direction(xs, ys) -> str:
    return _direction(float(np.median(xs) - np.median(ys)))


def mann_whitney(xs, ys) -> InstrumentResult:
    """Mann-Whitney U with midranks and a tie-corrected normal approximation.

    ``statistic`` is ``U_A``, the number of pairs with ``x > y`` (ties count
    one half); ``effect`` is the rank-biserial ``r = 2 U_A / (n_x n_y) - 1``.
    """
    x = _as_sample(xs, "xs")
    y = _as_sample(ys, "ys")
    nx, ny = x.size, y.size
    ranks = stats.rankdata(np.concatenate([x, y]))
    u_a = float(ranks[:nx].sum() - nx * (nx + 1) / 2.0)
    r = 2.0 * u_a / (nx * ny) - 1.0

    n = nx + ny
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(counts**3 - counts))
    var = nx * ny / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    mean = nx * ny / 2.0
    if var <= 0.0:
        p = 1.0
    else:
        # continuity-corrected two-sided p
        z = (abs(u_a - mean) - 0.5) / math.sqrt(var)
        p = float(min(1.0, 2.0 * stats.norm.sf(max(z, 0.0))))
    return InstrumentResult("MW", u_a, r, p, _direction(r))


def ks_two_sample(xs, ys) -> InstrumentResult:
    """Exact two-sample ``D`` with the asymptotic Kolmogorov p-value."""
    x = np.sort(_as_sample(xs, "xs"))
    y = np.sort(_as_sample(ys, "ys"))
    grid = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, grid, side="right") / x.size
    cdf_y = np.searchsorted(y, grid, side="right") / y.size
    diff = cdf_x - cdf_y
    D = float(np.max(np.abs(diff)))
    en = math.sqrt(x.size * y.size / (x.size + y.size))
    p = float(min(1.0, max(special.kolmogorov(en * D), 0.0))) if D > 0 else 1.0
    # a larger CDF means smaller values; take the sign of the dominant gap
    i = int(np.argmax(np.abs(diff)))
    direction = "none" if D == 0 else _direction(-float(diff[i]))
    # never let p hit exactly zero
    p = max(p, np.finfo(float).tiny)
    return InstrumentResult("KS", D, D, p, direction)


def _as_points(X, name: str, system: CoordinateSystem | None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < MIN_SAMPLES:
        raise ValueError(f"{name} needs at least {MIN_SAMPLES} points, got {X.shape[0]}")
    if system is not None and X.shape[1] == 6:
        X = system.apply(X)
    return X


def _pairwise(P: np.ndarray) -> np.ndarray:
    # explicit differences keep coincident points at exactly zero
    return distance.cdist(P, P)


def _energy_from_weights(D: np.ndarray, U: np.ndarray) -> np.ndarray:
    # with u = 1_A/n_A - 1_B/n_B, E = -u^T D u
    return -np.einsum("ij,ij->i", U @ D, U)


def _label_weights(labels: np.ndarray, n_a: int, n_b: int) -> np.ndarray:
    return np.where(labels, 1.0 / n_a, -1.0 / n_b)


def energy_distance(X, Y, system: CoordinateSystem | None = SHANNON) -> float:
    """V-statistic ``2 E|x - y| - E|x - x'| - E|y - y'|``.

    Six-column inputs are reweighted by ``system`` first; other widths are
    used as given.
    """
    A = _as_points(X, "X", system)
    B = _as_points(Y, "Y", system)
    if A.shape[1] != B.shape[1]:
        raise ValueError("X and Y must have the same number of columns")
    D = _pairwise(np.vstack([A, B]))
    labels = np.arange(A.shape[0] + B.shape[0]) < A.shape[0]
    u = _label_weights(labels, A.shape[0], B.shape[0])
    return float(max(_energy_from_weights(D, u[None, :])[0], 0.0))


def permutation_test(X, Y, n_perm: int = DEFAULT_N_PERM, rng=None,
                     system: CoordinateSystem | None = SHANNON) -> tuple[float, float]:
    """Energy statistic and its Phipson-Smyth permutation p-value.

    Returns ``(E, p)`` with ``p = (1 + #{E_perm >= E}) / (n_perm + 1)``.
    All relabelings are drawn up front from ``rng`` so the result does not
    depend on evaluation order.
    """
    if n_perm < 99:
        raise ValueError("n_perm must be at least 99")
    rng = np.random.default_rng(rng)
    A = _as_points(X, "X", system)
    B = _as_points(Y, "Y", system)
    if A.shape[1] != B.shape[1]:
        raise ValueError("X and Y must have the same number of columns")
    n_a, n_b = A.shape[0], B.shape[0]
    D = _pairwise(np.vstack([A, B]))
    labels = np.arange(n_a + n_b) < n_a
    observed = float(_energy_from_weights(D, _label_weights(labels, n_a, n_b)[None, :])[0])
    perms = rng.permuted(np.broadcast_to(labels, (n_perm, labels.size)), axis=1)
    null = _energy_from_weights(D, _label_weights(perms, n_a, n_b))
    # tolerance absorbs summation-order rounding on tied relabelings
    exceed = int(np.sum(null >= observed - 1e-12 * max(abs(observed), 1.0)))
    return max(observed, 0.0), (exceed + 1.0) / (n_perm + 1.0)


def energy_test(X, Y, n_perm: int = DEFAULT_N_PERM, rng=None,
                system: CoordinateSystem | None = SHANNON, direction_from=None) -> InstrumentResult:
    """Energy instrument; direction from the medians of ``direction_from``.

    ``direction_from`` is a pair of 1-D samples (A, B), normally the scalar
    projection under test.  Without it the direction compares the medians
    of the row norms.
    """
    E, p = permutation_test(X, Y, n_perm=n_perm, rng=rng, system=system)
    if direction_from is None:
        A = _as_points(X, "X", system)
        B = _as_points(Y, "Y", system)
        direction_from = (np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1))
    direction = _median_direction(*direction_from) if E > 0 else "none"
    return InstrumentResult("ENERGY", E, E, p, direction)


def quorum(results, alpha: float = ALPHA) -> QuorumVerdict:
    """Winner only when at least two significant instruments agree on a side."""
    results = list(results)
    if not results:
        raise ValueError("quorum needs at least one instrument result")
    votes = {"A_better": 0, "B_better": 0}
    for res in results:
        if res.significant(alpha):
            votes[res.direction] += 1
    a, b = votes["A_better"], votes["B_better"]
    if a >= 2 and a > b:
        return QuorumVerdict("A", a)
    if b >= 2 and b > a:
        return QuorumVerdict("B", b)
    return QuorumVerdict("tie", max(a, b) if a != b else 0)
