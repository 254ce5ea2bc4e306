"""Why a random Hadamard rotation makes one codebook fit every vector.

After rotation each coordinate of a unit vector follows the same Beta-shaped
law, so a single Lloyd-Max codebook designed for that law serves all rows.
Run:  python demos/rotation_and_codebook.py
"""

import numpy as np

from kvquant.geometry import beta_pdf, gaussian_limit_pdf
from kvquant.quantizer import beta_codebook, dequantize, quantize
from kvquant.transform import fresh_signs, invert, rotate

rng = np.random.default_rng(0)
d = 128

# a deliberately lopsided key: all its energy in four coordinates
k = np.zeros(d)
k[:4] = [9.0, -4.0, 3.0, 1.0]
s = fresh_signs(d, rng)
rk = rotate(k, s)
print(f"largest |coordinate| before rotation: {np.max(np.abs(k / np.linalg.norm(k))):.3f}")
print(f"largest |coordinate| after rotation:  {np.max(np.abs(rk.x_rot)):.3f}  (1/sqrt(d) = {d ** -0.5:.3f})")

print("\ncoordinate law at t = 0.1:")
for dd in (8, 128, 1024):
    print(f"  d={dd:5d}  beta {beta_pdf(0.1, dd):8.4f}   gaussian limit {gaussian_limit_pdf(0.1, dd):8.4f}")

print("\nbits  relative MSE  ratio to previous")
prev = None
for bits in range(1, 7):
    eps = beta_codebook(d, bits).expected_rel_mse
    print(f"  {bits}    {eps:.6f}     {'' if prev is None else f'{prev / eps:.2f}'}")
    prev = eps

cb = beta_codebook(d, 4)
codes = quantize(rk.x_rot, cb)
k_hat = invert(type(rk)(dequantize(codes, cb), rk.norm), s)
print(f"\n4-bit reconstruction of the lopsided key: relative MSE "
      f"{np.sum((k - k_hat) ** 2) / np.sum(k ** 2):.4f}")
