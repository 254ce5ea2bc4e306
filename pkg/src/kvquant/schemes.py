"""Fair-budget KV-cache encoders.

=========  ===========================  ===========================  ========
Scheme     K cache                      V cache                      rotated
=========  ===========================  ===========================  ========
KV         scalar, n bits               scalar, n bits               no
KQV        scalar, n bits               scalar n-1 bits + 1-bit QJL  yes
QKQV       scalar n-1 bits + 1-bit QJL  scalar n-1 bits + 1-bit QJL  yes
QJLK       1-bit sign sketch            scalar, n bits               yes
Plain      same as KV                   same as KV                   no
=========  ===========================  ===========================  ========

Every row keeps its norm as a float32 outside the per-coordinate budget, and
every QJL sketch keeps its residual norm the same way.  Scalar-only rows are
decoded to exactly the stored norm; rows carrying a QJL correction are
decoded as ``norm * (scalar part + residual estimate)`` so the estimator
stays unbiased.

Sign vectors are never stored: they are regenerated from the trial seed and
a fixed per-purpose tag, so KQV and QKQV built from one seed share their V
encoding bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from .quantizer import (
    Codebook,
    QjlSketch,
    beta_codebook,
    dequantize,
    design_lloyd_max,
    qjl_decode,
    qjl_encode,
    quantize,
)
from .transform import fresh_signs, fwht_inplace, is_power_of_two

__all__ = [
    "SchemeId",
    "TABLE1_SCHEMES",
    "MIN_BUDGET",
    "MAX_BUDGET",
    "EncodedVector",
    "CacheBlock",
    "EncodedCache",
    "bit_accounting",
    "signs_for",
    "encode_cache",
    "decode_cache",
    "empirical_codebook",
]

MIN_BUDGET = 2
MAX_BUDGET = 8


class SchemeId(str, Enum):
    KV = "KV"
    KQV = "KQV"
    QKQV = "QKQV"
    QJLK = "QJLK-ablation"
    PLAIN = "Plain-ablation"

    @classmethod
    def parse(cls, text) -> "SchemeId":
        if isinstance(text, cls):
            return text
        for member in cls:
            if text in (member.value, member.name):
                return member
        raise ValueError(f"unknown scheme {text!r}")

    @property
    def rotated(self) -> bool:
        return self in (SchemeId.KQV, SchemeId.QKQV, SchemeId.QJLK)

    def __str__(self) -> str:
        return self.value


TABLE1_SCHEMES = (SchemeId.KV, SchemeId.KQV, SchemeId.QKQV)

# seed tags; one independent stream per purpose
_TAG_ROT = {"K": 1, "V": 2}
_TAG_SKETCH = {"K": 3, "V": 4}


def bit_accounting(scheme, n: int) -> dict[str, dict[str, int]]:
    """Logical per-coordinate bits spent on each cache.

    Norms (and QJL residual norms) are float32 scalars per vector and are
    not part of this budget.  The QJL-K ablation spends a single sign bit on
    K and leaves ``n - 1`` bits unused.
    """
    scheme = SchemeId.parse(scheme)
    scalar = {"scalar": n, "sketch": 0, "unused": 0}
    split = {"scalar": n - 1, "sketch": 1, "unused": 0}
    if scheme in (SchemeId.KV, SchemeId.PLAIN):
        return {"K": dict(scalar), "V": dict(scalar)}
    if scheme is SchemeId.KQV:
        return {"K": dict(scalar), "V": split}
    if scheme is SchemeId.QKQV:
        return {"K": dict(split), "V": split}
    return {"K": {"scalar": 0, "sketch": 1, "unused": n - 1}, "V": dict(scalar)}


def signs_for(seed: int, tag: int, d: int, rows: int | None = None) -> np.ndarray:
    """Sign vector(s) for ``(seed, tag)``; row ``i`` depends only on (seed, tag, i)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(tag),))
    return fresh_signs(d, np.random.default_rng(ss), size=rows)


@dataclass
class EncodedVector:
    """View of one encoded cache row."""

    codes: np.ndarray | None
    norm: np.float32
    sign_seed: tuple | None
    sketch: QjlSketch | None = None


@dataclass
class CacheBlock:
    """One encoded cache (K or V), stored column-wise for vectorized decode."""

    kind: str  # "scalar", "scalar+qjl" or "sign"
    bits: int  # scalar bits per coordinate (0 for "sign")
    rotated: bool
    codes: np.ndarray | None  # (S, d) uint8
    norms: np.ndarray  # (S,) float32
    codebook: Codebook | None
    seed: int | None = None
    rot_tag: int | None = None
    sketch_tag: int | None = None
    q: np.ndarray | None = None  # (S, d) int8
    residual_norms: np.ndarray | None = None  # (S,) float32

    @property
    def shape(self) -> tuple[int, int]:
        arr = self.codes if self.codes is not None else self.q
        return arr.shape

    def entries(self) -> Iterator[EncodedVector]:
        S = self.shape[0]
        for i in range(S):
            sketch = None
            if self.q is not None:
                sketch = QjlSketch(
                    q=self.q[i],
                    residual_norm=self.residual_norms[i],
                    sketch_seed=(self.seed, self.sketch_tag, i),
                )
            yield EncodedVector(
                codes=None if self.codes is None else self.codes[i],
                norm=self.norms[i],
                sign_seed=(self.seed, self.rot_tag) if self.rotated else None,
                sketch=sketch,
            )

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "bits": self.bits,
            "rotated": self.rotated,
            "seed": self.seed,
            "rot_tag": self.rot_tag,
            "sketch_tag": self.sketch_tag,
            "norms": [float(v) for v in self.norms],
            "codebook": None if self.codebook is None else self.codebook.to_dict(),
        }
        if self.codes is not None:
            out["codes"] = self.codes.astype(int).tolist()
        if self.q is not None:
            out["q"] = self.q.astype(int).tolist()
            out["residual_norms"] = [float(v) for v in self.residual_norms]
        return out


@dataclass
class EncodedCache:
    k: CacheBlock
    v: CacheBlock
    scheme: SchemeId
    budget: int
    meta: dict = field(default_factory=dict)

    @property
    def k_entries(self) -> list[EncodedVector]:
        return list(self.k.entries())

    @property
    def v_entries(self) -> list[EncodedVector]:
        return list(self.v.entries())

    def to_dict(self) -> dict:
        """JSON-ready debug dump (codes as integer arrays)."""
        return {
            "scheme": self.scheme.value,
            "budget": self.budget,
            "bits": bit_accounting(self.scheme, self.budget),
            "k": self.k.to_dict(),
            "v": self.v.to_dict(),
        }


def _unit_rows(X: np.ndarray):
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return X / safe[:, None], norms


def _rotate_rows(U: np.ndarray, s: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(U * s)
    fwht_inplace(x)
    x /= np.sqrt(U.shape[1])
    return x


def _unrotate_rows(X: np.ndarray, s: np.ndarray) -> np.ndarray:
    x = np.array(X, dtype=np.float64, order="C", copy=True)
    fwht_inplace(x)
    x *= s / np.sqrt(X.shape[1])
    return x


def empirical_codebook(samples: np.ndarray, bits: int, label: str = "empirical") -> Codebook:
    """Codebook trained on the coordinates of normalized sample rows."""
    U, norms = _unit_rows(np.asarray(samples, dtype=np.float64))
    U = U[norms > 0]
    half = U.shape[0] // 2
    return design_lloyd_max(U[:half], bits, holdout=U[half:], label=label)


def _encode_block(X, which, kind, bits, rotated, seed, codebook=None) -> CacheBlock:
    S, d = X.shape
    U, norms = _unit_rows(X)
    norms32 = norms.astype(np.float32)
    rot_tag = _TAG_ROT[which] if rotated else None
    if rotated:
        U = _rotate_rows(U, signs_for(seed, rot_tag, d))

    if kind == "sign":
        # the rotation signs double as sketch signs: q = sign(H diag(s) v_hat)
        q = np.where(U >= 0.0, 1, -1).astype(np.int8)
        return CacheBlock(kind="sign", bits=0, rotated=True, codes=None, norms=norms32, codebook=None,
                          seed=seed, rot_tag=rot_tag, q=q,
                          residual_norms=np.where(norms > 0, 1.0, 0.0).astype(np.float32))

    cb = codebook if codebook is not None else beta_codebook(d, bits)
    codes = quantize(U, cb)
    block = CacheBlock(kind=kind, bits=bits, rotated=rotated, codes=codes, norms=norms32,
                       codebook=cb, seed=seed, rot_tag=rot_tag)
    if kind == "scalar+qjl":
        resid = U - cb.levels[codes]
        tag = _TAG_SKETCH[which]
        sk = qjl_encode(resid, signs_for(seed, tag, d, rows=S))
        block.sketch_tag = tag
        block.q = sk.q
        block.residual_norms = sk.residual_norm
    return block


def _decode_block(block: CacheBlock) -> np.ndarray:
    S, d = block.shape
    norms = block.norms.astype(np.float64)
    if block.kind == "sign":
        s_k = signs_for(block.seed, block.rot_tag, d)
        sk = QjlSketch(q=block.q, residual_norm=block.residual_norms)
        return qjl_decode(sk, s_k) * norms[:, None]

    X = dequantize(block.codes, block.codebook)
    if block.kind == "scalar+qjl":
        if block.q is None or block.sketch_tag is None:
            raise ValueError("QJL block is missing its sketch or seed")
        s_prime = signs_for(block.seed, block.sketch_tag, d, rows=S)
        X = X + qjl_decode(QjlSketch(q=block.q, residual_norm=block.residual_norms), s_prime)
    if block.rotated:
        if block.seed is None:
            raise ValueError("rotated block has no sign seed")
        X = _unrotate_rows(X, signs_for(block.seed, block.rot_tag, d))
    if block.kind == "scalar":
        # scalar-only rows are returned at exactly the stored norm
        length = np.linalg.norm(X, axis=1)
        X = X / np.where(length > 0, length, 1.0)[:, None]
    return X * norms[:, None]


def encode_cache(K, V, scheme, n: int, seed, *, codebook: str = "beta", training: dict | None = None) -> EncodedCache:
    """Encode both caches under ``scheme`` at ``n`` bits per coordinate.

    Parameters
    ----------
    K, V : (S, d) arrays
    scheme : SchemeId or str
    n : int
        Effective budget; QJL caches spend ``n - 1`` scalar bits and one
        sketch bit.
    seed : int or numpy Generator
        Trial seed from which every sign vector is derived.  A Generator is
        consumed for one 63-bit integer.
    codebook : {"beta", "empirical"}
        Codebook for the unrotated KV/Plain path.  ``"empirical"`` trains on
        ``training[which]`` (sample rows per cache), falling back to the
        cache itself.
    """
    scheme = SchemeId.parse(scheme)
    n = int(n)
    if not MIN_BUDGET <= n <= MAX_BUDGET:
        raise ValueError(f"budget n must lie in [{MIN_BUDGET}, {MAX_BUDGET}], got {n}")
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.ndim != 2 or V.ndim != 2 or K.shape[1] != V.shape[1]:
        raise ValueError("K and V must be 2-D with equal widths")
    d = K.shape[1]
    if scheme.rotated and not is_power_of_two(d):
        raise ValueError(f"scheme {scheme} needs a power-of-two dimension, got {d}")
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2**63 - 1))
    seed = int(seed)

    def plain_codebook(which, X):
        if codebook == "beta":
            return None
        if codebook != "empirical":
            raise ValueError(f"unknown codebook choice {codebook!r}")
        sample = (training or {}).get(which, X)
        return empirical_codebook(sample, n, label=f"empirical({which})")

    if scheme in (SchemeId.KV, SchemeId.PLAIN):
        k = _encode_block(K, "K", "scalar", n, False, seed, plain_codebook("K", K))
        v = _encode_block(V, "V", "scalar", n, False, seed, plain_codebook("V", V))
    elif scheme is SchemeId.KQV:
        k = _encode_block(K, "K", "scalar", n, True, seed)
        v = _encode_block(V, "V", "scalar+qjl", n - 1, True, seed)
    elif scheme is SchemeId.QKQV:
        k = _encode_block(K, "K", "scalar+qjl", n - 1, True, seed)
        v = _encode_block(V, "V", "scalar+qjl", n - 1, True, seed)
    else:
        k = _encode_block(K, "K", "sign", 0, True, seed)
        v = _encode_block(V, "V", "scalar", n, True, seed)
    return EncodedCache(k=k, v=v, scheme=scheme, budget=n, meta={"seed": seed, "codebook": codebook})


def decode_cache(ec: EncodedCache) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct ``(K_hat, V_hat)`` from an :class:`EncodedCache`."""
    return _decode_block(ec.k), _decode_block(ec.v)
