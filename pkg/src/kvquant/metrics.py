"""Attention evaluation and the per-trial error battery.

Each trial yields a six-component error vector: relative MSE (``snr``) and
cosine distance (``dir``) at the K cache, the V cache and the attention
output T, plus KL divergence of the attention weights and top-5 recall.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from .quantizer import is_saturated

__all__ = [
    "LM_SCALE_FACTOR",
    "CoordinateSystem",
    "SHANNON",
    "LM",
    "ErrorVector6",
    "TrialRecord",
    "CSV_COLUMNS",
    "attention_log_weights",
    "softmax_attention",
    "kl_divergence",
    "kl_from_log_weights",
    "topk_recall",
    "snr_error",
    "dir_error",
    "build_trial_record",
]

LM_SCALE_FACTOR = 5.44


@dataclass(frozen=True)
class CoordinateSystem:
    """Weighting of the six error components before distances are taken.

    The Shannon system is the identity; the LM system multiplies the three
    ``snr`` components by ``lm_scale_factor``.
    """

    name: str = "Shannon"
    lm_scale_factor: float = LM_SCALE_FACTOR

    @property
    def weights(self) -> np.ndarray:
        if self.name == "Shannon":
            return np.ones(6)
        if self.name == "LM":
            f = self.lm_scale_factor
            return np.array([f, 1.0, f, 1.0, f, 1.0])
        raise ValueError(f"unknown coordinate system {self.name!r}")

    def apply(self, e6: np.ndarray) -> np.ndarray:
        return np.asarray(e6, dtype=np.float64) * self.weights


SHANNON = CoordinateSystem("Shannon")
LM = CoordinateSystem("LM")


def coordinate_system(name: str, lm_scale_factor: float = LM_SCALE_FACTOR) -> CoordinateSystem:
    if name not in ("Shannon", "LM"):
        raise ValueError(f"unknown coordinate system {name!r}")
    return CoordinateSystem(name, lm_scale_factor)


@dataclass(frozen=True)
class ErrorVector6:
    eK_snr: float
    eK_dir: float
    eV_snr: float
    eV_dir: float
    eT_snr: float
    eT_dir: float

    def as_array(self) -> np.ndarray:
        return np.array([self.eK_snr, self.eK_dir, self.eV_snr, self.eV_dir, self.eT_snr, self.eT_dir])


CSV_COLUMNS = (
    "scheme", "mode", "n", "d", "rank", "nu", "trial", "seed",
    "eK_snr", "eK_dir", "eV_snr", "eV_dir", "eT_snr", "eT_dir",
    "kl", "topk5", "dK", "dV", "dT", "d6", "sat_K", "sat_V",
)


@dataclass
class TrialRecord:
    e6: ErrorVector6
    kl: float
    topk5: float
    dK: float
    dV: float
    dT: float
    d6: float
    sat_K: bool
    sat_V: bool
    scheme: str = ""
    mode: str = ""
    n: int = 0
    d: int = 0
    rank: int | None = None
    nu: float | None = None
    trial: int = 0
    seed: int = 0
    system: str = "Shannon"

    def to_row(self) -> dict:
        row = {
            "scheme": self.scheme, "mode": self.mode, "n": self.n, "d": self.d,
            "rank": "" if self.rank is None else self.rank,
            "nu": "" if self.nu is None else self.nu,
            "trial": self.trial, "seed": self.seed,
        }
        row.update(asdict(self.e6))
        row.update(kl=self.kl, topk5=self.topk5, dK=self.dK, dV=self.dV, dT=self.dT, d6=self.d6,
                   sat_K=int(self.sat_K), sat_V=int(self.sat_V))
        return row


def attention_log_weights(Q, K) -> np.ndarray:
    """Row-wise ``log softmax(Q K^T / sqrt(d))``, finite even when weights underflow."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    return special.log_softmax(Q @ K.T / math.sqrt(Q.shape[1]), axis=1)


def softmax_attention(Q, K, V):
    """Row-stochastic weights ``softmax(Q K^T / sqrt(d))`` and output ``weights @ V``."""
    w = np.exp(attention_log_weights(Q, K))
    w /= w.sum(axis=1, keepdims=True)
    return w, w @ np.asarray(V, dtype=np.float64)


def kl_divergence(p_ref, p_quant) -> float:
    """Mean over rows of KL(p_ref || p_quant) in nats; 0 log 0 counts as 0."""
    p = np.asarray(p_ref, dtype=np.float64)
    q = np.asarray(p_quant, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    p2 = np.atleast_2d(p)
    q2 = np.atleast_2d(q)
    return float(np.mean(np.sum(special.rel_entr(p2, q2), axis=1)))


def kl_from_log_weights(log_p, log_q) -> float:
    """:func:`kl_divergence` computed from log-weights.

    Peaked softmax rows can underflow to exact zeros in probability space,
    which would make the probability form infinite; the log form stays exact.
    """
    log_p = np.atleast_2d(np.asarray(log_p, dtype=np.float64))
    log_q = np.atleast_2d(np.asarray(log_q, dtype=np.float64))
    if log_p.shape != log_q.shape:
        raise ValueError(f"shape mismatch {log_p.shape} vs {log_q.shape}")
    p = np.exp(log_p)
    terms = np.where(p > 0, p * (log_p - log_q), 0.0)
    return float(np.mean(np.maximum(terms.sum(axis=1), 0.0)))


def _topk_sets(p: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -p keeps the lower index first among ties
    return np.argsort(-p, axis=1, kind="stable")[:, :k]


def topk_recall(p_ref, p_quant, k: int = 5) -> float:
    """Mean fraction of each reference row's top-k indices found in the quantized top-k."""
    p = np.atleast_2d(np.asarray(p_ref, dtype=np.float64))
    q = np.atleast_2d(np.asarray(p_quant, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    if p.shape[1] < k:
        raise ValueError(f"need at least k={k} keys, got {p.shape[1]}")
    a = _topk_sets(p, k)
    b = _topk_sets(q, k)
    hits = (a[:, :, None] == b[:, None, :]).any(axis=2).sum(axis=1)
    return float(np.mean(hits / k))


def snr_error(x, x_hat):
    """Relative squared error ``||x - x_hat||^2 / ||x||^2`` per row."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    nx = np.sum(x * x, axis=-1)
    if np.any(nx == 0.0):
        raise ValueError("relative error of a zero reference vector is undefined")
    return np.sum((x - x_hat) ** 2, axis=-1) / nx


def dir_error(x, x_hat):
    """Cosine distance ``1 - cos(x, x_hat)`` per row, in [0, 2].

    A zero reconstruction counts as orthogonal (distance 1).
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    nx = np.linalg.norm(x, axis=-1)
    nh = np.linalg.norm(x_hat, axis=-1)
    denom = nx * nh
    cos = np.divide(np.sum(x * x_hat, axis=-1), denom, out=np.zeros_like(denom), where=denom > 0)
    return np.clip(1.0 - cos, 0.0, 2.0)


def _site(x, x_hat):
    mask = np.linalg.norm(x, axis=1) > 0
    if not np.any(mask):
        return 0.0, 0.0, np.zeros(0)
    snr = snr_error(x[mask], x_hat[mask])
    return float(np.mean(snr)), float(np.mean(dir_error(x[mask], x_hat[mask]))), snr


def site_distance(snr: float, dirv: float, system: CoordinateSystem = SHANNON) -> float:
    w = system.weights[0]
    return math.hypot(w * snr, dirv)


def build_trial_record(instance, K_hat, V_hat, system: CoordinateSystem = SHANNON, **meta) -> TrialRecord:
    """Evaluate one decoded trial against its exact reference.

    Trial-level components are arithmetic means of per-token errors over
    cache rows (K, V) and query rows (T).  Saturation flags are raised when
    the mean per-token relative MSE of a cache exceeds 1.
    """
    Q, K, V = instance.Q, instance.K, instance.V
    lw_ref = attention_log_weights(Q, K)
    lw_hat = attention_log_weights(Q, K_hat)
    w_ref = np.exp(lw_ref)
    w_hat = np.exp(lw_hat)
    T_ref = w_ref @ V
    T_hat = w_hat @ V_hat
    kS, kD, k_tok = _site(K, K_hat)
    vS, vD, v_tok = _site(V, V_hat)
    tS, tD, _ = _site(T_ref, T_hat)
    e6 = ErrorVector6(kS, kD, vS, vD, tS, tD)
    arr = system.apply(e6.as_array())
    return TrialRecord(
        e6=e6,
        kl=kl_from_log_weights(lw_ref, lw_hat),
        topk5=topk_recall(w_ref, w_hat, 5),
        dK=math.hypot(arr[0], arr[1]),
        dV=math.hypot(arr[2], arr[3]),
        dT=math.hypot(arr[4], arr[5]),
        d6=float(np.linalg.norm(arr)),
        sat_K=bool(np.any(is_saturated(k_tok))),
        sat_V=bool(np.any(is_saturated(v_tok))),
        system=system.name,
        **meta,
    )
