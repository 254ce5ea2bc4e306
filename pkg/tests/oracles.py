"""Independent reference implementations used to freeze expected values.

Nothing here imports the package under test.  Running the module prints
the frozen constants that the test-suite asserts against:

    python tests/oracles.py
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, linalg, special


def beta_pdf_ref(t, d):
    c = math.exp(special.gammaln(d / 2) - special.gammaln((d - 1) / 2)) / math.sqrt(math.pi)
    return c * (1.0 - t * t) ** ((d - 3) / 2)


def lloyd_quad(d, bits, iters=20000, tol=1e-13):
    """Plain Lloyd iteration with adaptive quadrature for every centroid."""
    size = 1 << bits
    sd = 1.0 / math.sqrt(d)
    levels = np.linspace(-2.5 * sd, 2.5 * sd, size)
    f = lambda t: beta_pdf_ref(t, d)
    for _ in range(iters):
        thr = 0.5 * (levels[1:] + levels[:-1])
        edges = np.concatenate([[-1.0], thr, [1.0]])
        new = np.empty(size)
        for i in range(size):
            lo, hi = edges[i], edges[i + 1]
            m0 = integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-12, limit=200)[0]
            m1 = integrate.quad(lambda t: t * f(t), lo, hi, epsabs=0, epsrel=1e-12, limit=200)[0]
            new[i] = m1 / m0
        moved = np.max(np.abs(new - levels))
        levels = new
        if moved < tol:
            break
    thr = 0.5 * (levels[1:] + levels[:-1])
    edges = np.concatenate([[-1.0], thr, [1.0]])
    mse = sum(integrate.quad(lambda t, c=c: (t - c) ** 2 * f(t), edges[i], edges[i + 1],
                             epsabs=0, epsrel=1e-12, limit=200)[0]
              for i, c in enumerate(levels))
    return levels, mse * d


def lloyd_samples(x, bits, iters=500):
    """Brute-force Lloyd on a 1-D sample: assign to the nearest level, average."""
    x = np.sort(np.asarray(x, dtype=float))
    levels = np.quantile(x, (np.arange(1 << bits) + 0.5) / (1 << bits))
    for _ in range(iters):
        idx = np.argmin(np.abs(x[:, None] - levels[None, :]), axis=1)
        levels = np.array([x[idx == i].mean() for i in range(levels.size)])
    return levels


def hadamard_ref(d):
    return linalg.hadamard(d).astype(float)


def energy_ref(X, Y):
    """Energy V-statistic with explicit pair loops."""
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    dxy = np.mean([np.linalg.norm(x - y) for x in X for y in Y])
    dxx = np.mean([np.linalg.norm(a - b) for a in X for b in X])
    dyy = np.mean([np.linalg.norm(a - b) for a in Y for b in Y])
    return 2 * dxy - dxx - dyy


def mw_u_ref(xs, ys):
    """U_A by explicit pair counting (ties count one half)."""
    return sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in xs for y in ys)


def ks_ref(xs, ys):
    pts = np.concatenate([xs, ys])
    fx = np.array([np.mean(np.asarray(xs) <= p) for p in pts])
    fy = np.array([np.mean(np.asarray(ys) <= p) for p in pts])
    return float(np.max(np.abs(fx - fy)))


def beta_gauss_gap(d=1024):
    t = np.linspace(-0.2, 0.2, 40001)
    g = np.sqrt(d / (2 * np.pi)) * np.exp(-d * t * t / 2)
    return float(np.max(np.abs(beta_pdf_ref(t, d) - g)) / np.sqrt(d / (2 * np.pi)))


if __name__ == "__main__":
    np.set_printoptions(precision=17)
    for bits in (1, 2, 3, 4):
        lv, eps = lloyd_quad(128, bits)
        print(f"beta128 B={bits} levels_pos={lv[lv > 0].tolist()} eps={eps!r}")
    for bits in (5, 6):
        lv, eps = lloyd_quad(128, bits, iters=40000)
        print(f"beta128 B={bits} eps={eps!r}")
    z = np.random.default_rng(12345).standard_normal(1_000_000)
    print("normal B=1 lloyd:", lloyd_samples(z, 1, iters=50).tolist())
    print("E|X| beta128:", 2 * integrate.quad(lambda t: t * beta_pdf_ref(t, 128), 0, 1, epsrel=1e-13)[0])
    print("beta/gauss gap d=1024:", beta_gauss_gap())
