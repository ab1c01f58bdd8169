"""Counter-based normal variates keyed by (seed, sample, draw).

Sample ``i`` uses the stream key ``mix64(mix64(seed) + i * GOLDEN)``; draw
``j`` of that stream is ``mix64(key + (j + 1) * GOLDEN)`` mapped to a uniform
in (0, 1) and through Wichura's AS241 normal quantile. Results do not depend
on batching or thread count. The compiled kernels implement the same map.
"""
from __future__ import annotations

import math

import numpy as np

from . import _backend

__all__ = ["mix64", "stream_keys", "uniforms", "normal_quantile", "counter_normals"]

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(z):
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_keys(seed: int, start: int, count: int) -> np.ndarray:
    idx = np.arange(start, start + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(mix64(np.uint64(seed % 2**64)) + idx * GOLDEN)


def uniforms(keys: np.ndarray, j) -> np.ndarray:
    """Uniforms of draw(s) ``j`` for each key; shape ``keys.shape + j.shape``."""
    j = np.asarray(j, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = mix64(keys[..., None] + (j + np.uint64(1)) * GOLDEN)
    return ((x >> np.uint64(11)).astype(np.float64) + 0.5) * 1.1102230246251565e-16


_A = (3.3871328727963666080e0, 1.3314166789178437745e+2, 1.9715909503065514427e+3,
      1.3731693765509461125e+4, 4.5921953931549871457e+4, 6.7265770927008700853e+4,
      3.3430575583588128105e+4, 2.5090809287301226727e+3)
_B = (1.0, 4.2313330701600911252e+1, 6.8718700749205790830e+2, 5.3941960214247511077e+3,
      2.1213794301586595867e+4, 3.9307895800092710610e+4, 2.8729085735721942674e+4,
      5.2264952788528545610e+3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _horner(c, r):
    out = c[7] * r + c[6]
    for k in range(5, -1, -1):
        out = out * r + c[k]
    return out


def normal_quantile(p):
    """AS241 (PPND16) inverse normal CDF, elementwise, in the kernel's operation order."""
    p = np.asarray(p, dtype=np.float64)
    q = p - 0.5
    out = np.empty_like(p)
    central = np.abs(q) <= 0.425
    if central.any():
        qc = q[central]
        r = 0.180625 - qc * qc
        out[central] = qc * _horner(_A, r) / _horner(_B, r)
    tail = ~central
    if tail.any():
        qt = q[tail]
        r = np.where(qt < 0.0, p[tail], 1.0 - p[tail])
        # libm log, as in the kernels; numpy's vectorized log can differ by an ulp
        r = np.sqrt(-np.fromiter(map(math.log, r.tolist()), dtype=np.float64, count=r.size))
        near = r <= 5.0
        val = np.empty_like(r)
        rn = r[near] - 1.6
        val[near] = _horner(_C, rn) / _horner(_D, rn)
        rf = r[~near] - 5.0
        val[~near] = _horner(_E, rf) / _horner(_F, rf)
        out[tail] = np.where(qt < 0.0, -val, val)
    return out


def counter_normals(seed: int, start: int, count: int, n_draws: int) -> np.ndarray:
    """``Z[i, j]``: draw ``j`` of sample ``start + i``; shape ``(count, n_draws)``."""
    nat = _backend.native()
    if nat is not None:
        return nat.counter_normals(seed % 2**64, start, count, n_draws)
    keys = stream_keys(seed, start, count)
    return normal_quantile(uniforms(keys, np.arange(n_draws)))
