"""Fair-budget KV-cache quantization experiments.

Submodules
----------
geometry    sphere-coordinate Beta law and its Gaussian limit
transform   fast Walsh-Hadamard transform and the Hadamard-Rademacher rotation
quantizer   Lloyd-Max codebooks and the 1-bit QJL residual sketch
schemes     KV / KQV / QKQV cache encoders and the ablations
workloads   synthetic attention instances
metrics     softmax attention, KL, top-5 recall and the 6D error vector
stats       Mann-Whitney, Kolmogorov-Smirnov, energy distance, quorum
harness     campaigns, tables, histograms and the selftest
"""

from . import geometry, harness, metrics, quantizer, schemes, stats, transform, workloads
from .harness import RunConfig, load_config, run, table
from .metrics import SHANNON, LM, TrialRecord, build_trial_record
from .quantizer import Codebook, beta_codebook, design_lloyd_max, qjl_decode, qjl_encode
from .schemes import SchemeId, decode_cache, encode_cache
from .workloads import WorkloadSpec, generate

__version__ = "0.1.0"

__all__ = [
    "geometry", "transform", "quantizer", "schemes", "workloads", "metrics", "stats", "harness",
    "RunConfig", "load_config", "run", "table",
    "SHANNON", "LM", "TrialRecord", "build_trial_record",
    "Codebook", "beta_codebook", "design_lloyd_max", "qjl_encode", "qjl_decode",
    "SchemeId", "encode_cache", "decode_cache",
    "WorkloadSpec", "generate",
]
