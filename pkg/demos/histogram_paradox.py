"""Identical marginals, very different attention.

At d = 1024 the rotated coordinates of low-rank and heavy-tailed keys both
look like the Beta law to a KS test, yet their attention KL differs because
low-rank keys and queries share a subspace that makes softmax peaked.
Run:  python demos/histogram_paradox.py  (writes CSVs under $KVQUANT_OUTPUT_DIR or ./kvquant-out)
"""

import numpy as np

from kvquant.harness import RunConfig, hist, run_trials

d = 1024
modes = [f"low_rank:rank={d // 8}", "heavy_tail", "random"]
for s in hist(d, modes, 50_000):
    print(f"{s['mode']:20s} KS p = {s['ks_p']:.3f}  -> {s['path']}")

cfg = RunConfig(schemes=["KV"], modes=modes[:2], budgets=[4], d=d, trials=20, coordinate_systems=["Shannon"])
kl = {}
for r in run_trials(cfg):
    kl.setdefault(r.mode, []).append(r.kl)
for mode, vals in kl.items():
    print(f"{mode:20s} median KL = {np.median(vals):.4f}")

# small d keeps the structure visible
for s in hist(8, ["low_rank:rank=1", "random"], 20_000):
    print(f"d=8 {s['mode']:18s} KS p = {s['ks_p']:.2g}")
