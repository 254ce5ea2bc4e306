"""Spending the sketch bit on V instead of K.

KQV keeps all scalar bits on K and puts the one-bit sketch on V; QKQV puts a
sketch on both caches.  Routing (the softmax over keys) only sees K, so the
KL divergence of the attention weights separates the two.
Run:  python demos/kv_asymmetry.py
"""

import numpy as np

from kvquant.harness import RunConfig, run_trials
from kvquant.metrics import build_trial_record
from kvquant.schemes import decode_cache, encode_cache
from kvquant.stats import mann_whitney
from kvquant.workloads import generate

cfg = RunConfig(schemes=["KV", "KQV", "QKQV"], modes=["fattail:nu=3"], budgets=[2, 4], trials=40,
                coordinate_systems=["Shannon"])
records = run_trials(cfg)

print("n  scheme  median KL  median top5  median eK_dir  median eT_dir")
for n in cfg.budgets:
    for scheme in ("KV", "KQV", "QKQV"):
        rs = [r for r in records if r.n == n and r.scheme == scheme]
        print(f"{n}  {scheme:5s}   {np.median([r.kl for r in rs]):9.4f}  {np.median([r.topk5 for r in rs]):11.3f}"
              f"  {np.median([r.e6.eK_dir for r in rs]):13.5f}  {np.median([r.e6.eT_dir for r in rs]):13.5f}")

for n in cfg.budgets:
    a = [r.kl for r in records if r.n == n and r.scheme == "KQV"]
    b = [r.kl for r in records if r.n == n and r.scheme == "QKQV"]
    res = mann_whitney(a, b)
    print(f"n={n}: KL KQV vs QKQV  r={res.effect:+.3f}  p={res.p_value:.2g}  ({res.direction})")

# KL never looks at V: replacing the decoded V with noise leaves it untouched
spec = cfg.modes[0]
inst = generate(spec, np.random.default_rng(records[0].seed))
K_hat, V_hat = decode_cache(encode_cache(inst.K, inst.V, "KQV", 4, records[0].seed))
noise = np.random.default_rng(1).standard_normal(V_hat.shape)
kl_a = build_trial_record(inst, K_hat, V_hat).kl
kl_b = build_trial_record(inst, K_hat, noise).kl
print(f"\nKL with decoded V {kl_a:.6f}, with pure-noise V {kl_b:.6f}")
