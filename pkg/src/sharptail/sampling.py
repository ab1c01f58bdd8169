"""Monte Carlo validation: direct tail sampling and instanton-shifted sampling.

Paths are simulated with Euler-Maruyama or stochastic Heun steps and the
same integrating factor as the deterministic propagators. Each sample draws
its normal increments from its own counter-based stream, so results are
identical for any batch size or thread count.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri

from . import _backend
from .core import ProblemSpec, TimeGrid
from .errors import ConfigError
from .rng import normal_quantile, stream_keys, uniforms

log = logging.getLogger(__name__)

__all__ = ["McConfig", "McResult", "wilson_interval", "direct_tail_mc", "ShiftedSamples",
           "importance_sampled_paths", "is_tail_estimate", "IsEstimate"]

MC_SCHEMES = ("euler_maruyama_if", "heun")


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo settings.

    ``dt`` of None means: use the instanton grid (shifted sampling) or 5e-4
    (direct sampling). ``sample_count`` is the number of simulated paths for
    direct sampling and the number of accepted paths for conditioned
    sampling. ``conditioning_tolerance`` bounds ``|f(X_T) - z| / sqrt(eps)``.
    """

    eps: float
    sample_count: int
    z: Optional[float] = None
    dt: Optional[float] = None
    T: float = 1.0
    scheme: str = "euler_maruyama_if"
    seed: int = 0
    conditioning_tolerance: float = 0.05
    batch_size: int = 50_000
    threads: Optional[int] = None
    confidence: float = 0.95
    max_simulated: Optional[int] = None
    record_times: Sequence[float] = ()

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be at least 1")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.scheme not in MC_SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {MC_SCHEMES}")
        if not 0 < self.confidence < 1:
            raise ConfigError("confidence must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")

    @property
    def heun(self) -> bool:
        return self.scheme == "heun"

    def grid(self) -> TimeGrid:
        dt = 5e-4 if self.dt is None else self.dt
        n_t = max(1, int(round(self.T / dt)))
        return TimeGrid.uniform(self.T, n_t)

    def nthreads(self) -> int:
        return int(self.threads) if self.threads else (os.cpu_count() or 1)


def wilson_interval(hits: int, n: int, confidence: float = 0.95):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ConfigError("n must be positive")
    if not 0 <= hits <= n:
        raise ConfigError("need 0 <= hits <= n")
    zq = float(ndtri(0.5 + 0.5 * confidence))
    p = hits / n
    z2 = zq * zq
    den = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / den
    half = zq / den * np.sqrt(p * (1 - p) / n + z2 / (4 * n * n))
    lo = 0.0 if hits == 0 else max(0.0, center - half)
    hi = 1.0 if hits == n else min(1.0, center + half)
    return lo, hi


class McResult(tuple):
    """``(hit_count, sample_count, interval)`` with diagnostics as attributes."""

    def __new__(cls, hits, n, interval, failures=0, confidence=0.95):
        self = super().__new__(cls, (int(hits), int(n), tuple(interval)))
        self.failures = int(failures)
        self.confidence = confidence
        return self

    @property
    def hits(self):
        return self[0]

    @property
    def n(self):
        return self[1]

    @property
    def interval(self):
        return self[2]

    @property
    def frequency(self):
        return self[0] / self[1] if self[1] else float("nan")


# ---------------------------------------------------------------------------
# path simulation


class _Sim:
    """Batched SDE stepping for one problem and grid (native or numpy)."""

    def __init__(self, spec: ProblemSpec, grid: TimeGrid, heun: bool, nthreads: int = 1):
        self.spec = spec
        self.grid = grid
        self.heun = heun
        self.h = np.ascontiguousarray(grid.steps)
        self.nthreads = nthreads
        self.native = _backend.native() if spec.quadratic is not None else None
        self.use_if = spec.linear is not None
        if self.use_if:
            self.N = spec.nonlinear
            self.E = [spec.linear.propagator(h)[0] for h in self.h]
        else:
            self.N = spec.drift
            self.E = [lambda v: v] * len(self.h)

    def _qs_args(self):
        q = self.spec.quadratic
        return (q.linear_diag, q.quad_sym, q.sigma, self.h, int(self.heun), int(self.use_if))

    def _draws(self, keys, i):
        r = self.spec.noise_rank
        return normal_quantile(uniforms(keys, np.arange(i * r, i * r + r)))

    def _step(self, i, x, inc):
        h = self.h[i]
        k1 = self.N(x)
        if not self.heun:
            return self.E[i](x + h * k1 + inc)
        y = self.E[i](x + h * k1 + inc)
        k2 = self.N(y)
        return self.E[i](x + (0.5 * h) * k1 + inc) + (0.5 * h) * k2

    def endpoints(self, eps, seed, start, count):
        """Final states and a finite-ness flag for ``count`` unshifted paths."""
        if self.native is not None:
            XT, ok = self.native.mc_endpoints(*self._qs_args(), self.spec.x0, float(eps), seed % 2**64,
                                              start, count, self.nthreads)
            return XT, ok.astype(bool)
        keys = stream_keys(seed, start, count)
        x = np.tile(np.asarray(self.spec.x0, dtype=float), (count, 1))
        se = np.sqrt(eps)
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(self.grid.n_t):
                w = (se * np.sqrt(self.h[i])) * self._draws(keys, i)
                x = self._step(i, x, self.spec.sigma_apply(w))
        return x, np.all(np.isfinite(x), axis=1)

    def shifted(self, eps, seed, start, count, shift, phi, theta, lam, record):
        """Shifted paths: scaled fluctuations at ``record``, tube log-weights, log-LR."""
        spec = self.spec
        wts = np.ascontiguousarray(self.grid.weights)
        if self.native is not None:
            return self.native.mc_shifted(*self._qs_args(), spec.x0, float(eps), seed % 2**64, start, count,
                                          shift, phi, theta, wts, float(lam), spec.quadratic.obs_quad,
                                          np.ascontiguousarray(record, dtype=np.int64), self.nthreads)
        keys = stream_keys(seed, start, count)
        n = spec.state_dim
        se = np.sqrt(eps)
        x = np.tile(np.asarray(spec.x0, dtype=float), (count, 1))
        Yrec = np.empty((count, len(record), n))
        acc = np.zeros(count)
        lr = np.zeros(count)
        rec = list(record)
        c = 0
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(self.grid.n_t + 1):
                Y = (x - phi[i]) / se
                if wts[i] != 0.0:
                    HY = spec.hessian_bilinear(phi[i], theta[i], Y)
                    acc = acc + wts[i] * (0.5 * np.einsum("sk,sk->s", HY, Y))
                while c < len(rec) and rec[c] == i:
                    Yrec[:, c] = Y
                    c += 1
                if i == self.grid.n_t:
                    break
                sh = np.sqrt(self.h[i])
                z = self._draws(keys, i)
                inc = (se * sh) * z + self.h[i] * shift[i]
                lr = lr - (z * (shift[i] * sh / se)).sum(axis=1) - self.h[i] * (shift[i] @ shift[i]) / (2.0 * eps)
                x = self._step(i, x, spec.sigma_apply(inc))
            YT = (x - phi[-1]) / se
            M = spec.obs_hess_action(phi[-1], YT)
            logw = acc + 0.5 * lam * np.einsum("sk,sk->s", YT, M)
        return Yrec, YT, logw, lr


def direct_tail_mc(spec: ProblemSpec, cfg: McConfig) -> McResult:
    """Count ``f(X_T) >= z`` over independent paths; Wilson interval at ``cfg.confidence``.

    Paths that leave the floating-point range are reported as failures and
    excluded from the sample count.
    """
    if cfg.z is None:
        raise ConfigError("direct sampling needs a threshold z")
    sim = _Sim(spec, cfg.grid(), cfg.heun, cfg.nthreads())
    hits = 0
    bad = 0
    done = 0
    while done < cfg.sample_count:
        cnt = min(cfg.batch_size, cfg.sample_count - done)
        XT, ok = sim.endpoints(cfg.eps, cfg.seed, done, cnt)
        f = spec.observable(XT[ok])
        hits += int(np.count_nonzero(f >= cfg.z))
        bad += int(cnt - ok.sum())
        done += cnt
    n = cfg.sample_count - bad
    if bad:
        log.warning("%d of %d trajectories diverged and were excluded", bad, cfg.sample_count)
    return McResult(hits, n, wilson_interval(hits, n, cfg.confidence) if n else (0.0, 1.0), bad,
                    cfg.confidence)


# ---------------------------------------------------------------------------
# instanton-shifted sampling


@dataclass
class ShiftedSamples:
    """Accepted conditioned paths in scaled coordinates ``Y = (X - phi_z) / sqrt(eps)``.

    ``log_weight`` is the tube reweighting exponent (second-order terms of
    drift and observable along the instanton); ``log_lr`` the exact
    likelihood ratio of unshifted to shifted noise.
    """

    eps: float
    times: np.ndarray
    nodes: np.ndarray
    phi: np.ndarray  # instanton state at the recorded nodes
    Y: np.ndarray  # (accepted, n_rec, n)
    YT: np.ndarray
    log_weight: np.ndarray
    log_lr: np.ndarray
    n_simulated: int
    n_accepted: int
    n_flagged: int
    meta: dict = field(default_factory=dict)

    def weights(self, kind: str = "tube") -> np.ndarray:
        """Normalized weights: ``"tube"``, ``"girsanov"`` or ``"none"``."""
        if kind == "none":
            lw = np.zeros(self.n_accepted)
        elif kind == "tube":
            lw = self.log_weight
        elif kind == "girsanov":
            lw = self.log_lr
        else:
            raise ConfigError(f"unknown weight kind {kind!r}")
        w = np.exp(lw - lw.max())
        return w / w.sum()

    def effective_sample_size(self, kind: str = "tube") -> float:
        w = self.weights(kind)
        return float(1.0 / np.sum(w * w))

    def moments(self, k: int, kind: str = "tube"):
        """Weighted mean and covariance of ``X(t_k)`` and the standard error of the mean."""
        w = self.weights(kind)
        Y = self.Y[:, k]
        m = w @ Y
        D = Y - m
        C = (D * w[:, None]).T @ D
        C = C / (1.0 - np.sum(w * w))
        se = np.sqrt(np.diag(C) * np.sum(w * w))
        s = np.sqrt(self.eps)
        return self.phi[k] + s * m, self.eps * C, s * se


def _shift_inputs(spec, instanton):
    eta = np.ascontiguousarray(instanton.eta.values)
    phi = np.ascontiguousarray(instanton.phi.values)
    theta = np.ascontiguousarray(instanton.theta.values)
    return eta, phi, theta


def importance_sampled_paths(spec: ProblemSpec, instanton, cfg: McConfig) -> ShiftedSamples:
    """Simulate the instanton-shifted system and keep paths ending near the constraint.

    Paths are drawn in batches until ``cfg.sample_count`` are accepted or
    ``cfg.max_simulated`` (default 1000 x sample_count) have been simulated.
    Samples with non-finite state or weight are flagged and excluded.
    """
    grid = instanton.grid
    if cfg.dt is not None and abs(cfg.dt - grid.steps.max()) > 1e-9 * cfg.dt:
        raise ConfigError("shifted sampling runs on the instanton grid; dt does not match")
    z = instanton.z if cfg.z is None else cfg.z
    eta, phi, theta = _shift_inputs(spec, instanton)
    times = np.asarray(cfg.record_times, dtype=float)
    nodes = np.array([grid.index_of(t) for t in times], dtype=np.int64)
    order = np.argsort(nodes, kind="stable")
    sim = _Sim(spec, grid, cfg.heun, cfg.nthreads())
    cap = cfg.max_simulated or 1000 * cfg.sample_count
    se = np.sqrt(cfg.eps)
    parts = []
    done = acc_n = flagged = 0
    while acc_n < cfg.sample_count and done < cap:
        cnt = min(cfg.batch_size, cap - done)
        Yrec, YT, lw, llr = sim.shifted(cfg.eps, cfg.seed, done, cnt, eta, phi, theta, instanton.lam,
                                        nodes[order])
        finite = np.isfinite(lw) & np.isfinite(llr) & np.all(np.isfinite(YT), axis=1)
        flagged += int(cnt - finite.sum())
        fT = spec.observable(phi[-1] + se * YT)
        keep = finite & (np.abs(fT - z) / se < cfg.conditioning_tolerance)
        idx = np.nonzero(keep)[0][: cfg.sample_count - acc_n]
        parts.append((Yrec[idx], YT[idx], lw[idx], llr[idx]))
        acc_n += idx.size
        done += cnt
    if acc_n < cfg.sample_count:
        log.warning("only %d of %d requested paths accepted after %d simulations", acc_n, cfg.sample_count, done)
    if flagged:
        log.warning("%d samples with non-finite state or weight excluded", flagged)
    inv = np.argsort(order)
    Y = np.concatenate([p[0] for p in parts])[:, inv] if parts else np.empty((0, nodes.size, spec.state_dim))
    return ShiftedSamples(
        eps=cfg.eps, times=times, nodes=nodes, phi=phi[nodes], Y=Y,
        YT=np.concatenate([p[1] for p in parts]), log_weight=np.concatenate([p[2] for p in parts]),
        log_lr=np.concatenate([p[3] for p in parts]), n_simulated=done, n_accepted=acc_n, n_flagged=flagged,
        meta={"z": float(z), "tolerance": cfg.conditioning_tolerance, "seed": cfg.seed},
    )


@dataclass
class IsEstimate:
    estimate: float
    std_error: float
    interval: tuple
    n: int
    hits: int
    flagged: int


def is_tail_estimate(spec: ProblemSpec, instanton, cfg: McConfig) -> IsEstimate:
    """Importance-sampling estimate of ``P(f(X_T) >= z)`` with the instanton as shift.

    Each path is weighted by the exact likelihood ratio of the unshifted to
    the shifted noise; the interval is the normal approximation at
    ``cfg.confidence``.
    """
    grid = instanton.grid
    z = instanton.z if cfg.z is None else cfg.z
    eta, phi, theta = _shift_inputs(spec, instanton)
    sim = _Sim(spec, grid, cfg.heun, cfg.nthreads())
    se = np.sqrt(cfg.eps)
    s1 = s2 = 0.0
    hits = flagged = done = 0
    while done < cfg.sample_count:
        cnt = min(cfg.batch_size, cfg.sample_count - done)
        _, YT, _, llr = sim.shifted(cfg.eps, cfg.seed, done, cnt, eta, phi, theta, instanton.lam,
                                    np.empty(0, dtype=np.int64))
        ok = np.isfinite(llr) & np.all(np.isfinite(YT), axis=1)
        flagged += int(cnt - ok.sum())
        hit = ok & (spec.observable(phi[-1] + se * YT) >= z)
        v = np.where(hit, np.exp(np.where(hit, llr, 0.0)), 0.0)
        s1 += float(v.sum())
        s2 += float((v * v).sum())
        hits += int(hit.sum())
        done += cnt
    n = done
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    sem = np.sqrt(var / n)
    zq = float(ndtri(0.5 + 0.5 * cfg.confidence))
    return IsEstimate(mean, sem, (max(0.0, mean - zq * sem), mean + zq * sem), n, hits, flagged)
