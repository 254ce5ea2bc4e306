"""Synthetic attention instances.

Modes
-----
random      K rows i.i.d. N(0, I).
heavy_tail  N(0, I) rows, a ``heavy_frac`` subset of whole rows scaled by
            ``heavy_scale``.
low_rank    K = A B with A (S x rank) and B (rank x d) standard normal.
fattail     i.i.d. Student-t(nu) components.
focused     N(0, I) keys; every query is a noisy copy of one dominant key.

V is always i.i.d. standard normal so that mode contrasts act on K only.
Queries are i.i.d. N(0, I) except in focused mode and in low_rank mode,
where by default they are drawn like the keys from the same subspace
(``Q = A_q B`` with A_q standard normal); ``query_in_subspace=False``
restores i.i.d. queries there.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

__all__ = [
    "MODES",
    "RANK_SWEEP",
    "NU_SWEEP",
    "WorkloadSpec",
    "AttentionInstance",
    "generate",
    "derive_trial_seed",
    "parse_mode",
]

MODES = ("random", "heavy_tail", "low_rank", "fattail", "focused")
RANK_SWEEP = (1, 2, 4, 8, 16, 32, 64)
NU_SWEEP = (10.0, 5.0, 3.0, 2.0, 1.5, 1.2, 1.05)


@dataclass(frozen=True)
class WorkloadSpec:
    mode: str
    d: int = 128
    S: int = 256
    m: int = 32
    rank: int | None = None
    nu: float = 3.0
    heavy_frac: float = 0.10
    heavy_scale: float = 10.0
    focus_noise: float | None = None
    query_in_subspace: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown workload mode {self.mode!r}; expected one of {MODES}")
        if self.d < 2 or self.S < 1 or self.m < 1:
            raise ValueError("d must be >= 2 and S, m >= 1")
        if self.rank is not None and not 1 <= self.rank <= self.d:
            raise ValueError(f"rank must lie in [1, d={self.d}], got {self.rank}")
        if not self.nu > 1.0:
            raise ValueError(f"nu must exceed 1, got {self.nu}")
        if not 0.0 < self.heavy_frac < 1.0:
            raise ValueError(f"heavy_frac must lie in (0, 1), got {self.heavy_frac}")
        if self.focus_noise is not None and self.focus_noise < 0:
            raise ValueError("focus_noise must be non-negative")

    @property
    def effective_rank(self) -> int:
        return self.rank if self.rank is not None else max(1, self.d // 8)

    @property
    def label(self) -> str:
        """Short id used in CSV rows and seed derivation."""
        if self.mode == "low_rank":
            return f"low_rank:rank={self.effective_rank}"
        if self.mode == "fattail":
            return f"fattail:nu={self.nu:g}"
        return self.mode

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionInstance:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    dominant_key: int | None = None
    spec: WorkloadSpec | None = field(default=None, repr=False)


def parse_mode(text: str, **defaults) -> WorkloadSpec:
    """Parse ``"fattail:nu=3"`` or ``"low_rank:rank=16,S=128"`` into a spec."""
    name, _, rest = text.strip().partition(":")
    kwargs = dict(defaults)
    types = {"d": int, "S": int, "m": int, "rank": int, "nu": float, "heavy_frac": float,
             "heavy_scale": float, "focus_noise": float}
    if rest:
        for item in rest.split(","):
            key, eq, val = item.partition("=")
            key = key.strip()
            if not eq or key not in types:
                raise ValueError(f"bad workload parameter {item!r} in {text!r}")
            kwargs[key] = types[key](val)
    return WorkloadSpec(mode=name.strip(), **kwargs)


def _student_t(rng: np.random.Generator, nu: float, shape) -> np.ndarray:
    # normal over sqrt(chi2 / nu): exact, no rejection step
    z = rng.standard_normal(shape)
    chi = rng.chisquare(nu, size=shape)
    return z / np.sqrt(chi / nu)


def generate(spec: WorkloadSpec, rng: np.random.Generator) -> AttentionInstance:
    """Draw one attention instance for ``spec``."""
    d, S, m = spec.d, spec.S, spec.m
    dominant = None
    if spec.mode == "random":
        K = rng.standard_normal((S, d))
        Q = rng.standard_normal((m, d))
    elif spec.mode == "heavy_tail":
        K = rng.standard_normal((S, d))
        n_heavy = max(1, int(round(spec.heavy_frac * S)))
        rows = rng.choice(S, size=n_heavy, replace=False)
        K[rows] *= spec.heavy_scale
        Q = rng.standard_normal((m, d))
    elif spec.mode == "low_rank":
        r = spec.effective_rank
        A = rng.standard_normal((S, r))
        B = rng.standard_normal((r, d))
        K = A @ B
        if spec.query_in_subspace:
            # queries built like the keys: same factor B, fresh coefficients
            Q = rng.standard_normal((m, r)) @ B
        else:
            Q = rng.standard_normal((m, d))
    elif spec.mode == "fattail":
        K = _student_t(rng, spec.nu, (S, d))
        Q = rng.standard_normal((m, d))
    elif spec.mode == "focused":
        K = rng.standard_normal((S, d))
        dominant = int(rng.integers(S))
        k_star = K[dominant]
        noise = spec.focus_noise
        if noise is None:
            noise = 0.3 * float(np.linalg.norm(k_star)) / math.sqrt(d)
        Q = k_star + noise * rng.standard_normal((m, d))
    else:  # pragma: no cover - guarded by WorkloadSpec
        raise ValueError(spec.mode)
    V = rng.standard_normal((S, d))
    return AttentionInstance(Q=Q, K=K, V=V, dominant_key=dominant, spec=spec)


def derive_trial_seed(master: int, config_id: str | int, trial_index: int) -> int:
    """Deterministic 63-bit seed for one (master, config, trial) triple.

    A keyed BLAKE2b digest of the packed triple; distinct triples give
    independent-looking seeds and the mapping never changes between runs.
    """
    cfg = str(config_id).encode("utf-8")
    payload = struct.pack("<qq", int(master), int(trial_index)) + cfg
    digest = hashlib.blake2b(payload, digest_size=8, person=b"kvq-trial").digest()
    return int.from_bytes(digest, "little") >> 1
