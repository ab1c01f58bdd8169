"""Problem abstraction, time grids, paths and noise-space geometry."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError, SingularInstantonError

__all__ = [
    "TimeGrid",
    "Path",
    "ProblemSpec",
    "DiagonalLinear",
    "FourierLinear",
    "QuadraticSystem",
    "l2_inner",
    "l2_norm",
    "project_orthogonal",
]

QUADRATURE_RULES = ("trapezoid", "left")


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class TimeGrid:
    """Fixed time grid on [0, T] with quadrature weights.

    Parameters
    ----------
    nodes : array_like
        Strictly increasing times starting at 0; at least three nodes.
    rule : {"trapezoid", "left"}
        Quadrature rule. ``"left"`` puts weight ``h_i`` on node i and zero on
        the final node, which is the rule consistent with explicit Euler.
    """

    __slots__ = ("nodes", "weights", "steps", "rule")

    def __init__(self, nodes, rule: str = "trapezoid"):
        t = np.asarray(nodes, dtype=np.float64)
        if t.ndim != 1 or t.size < 3:
            raise DimensionError("a time grid needs n_t >= 2 steps")
        if t[0] != 0.0:
            raise DimensionError("grid must start at t=0")
        h = np.diff(t)
        if not np.all(h > 0) or not np.all(np.isfinite(t)):
            raise DimensionError("grid nodes must be finite and strictly increasing")
        if rule not in QUADRATURE_RULES:
            raise DimensionError(f"unknown quadrature rule {rule!r}")
        w = np.zeros_like(t)
        if rule == "trapezoid":
            w[:-1] += 0.5 * h
            w[1:] += 0.5 * h
        else:
            w[:-1] = h
        object.__setattr__(self, "nodes", _frozen(t))
        object.__setattr__(self, "steps", _frozen(h))
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "rule", rule)

    def __setattr__(self, name, value):
        raise AttributeError("TimeGrid is immutable")

    @classmethod
    def uniform(cls, T: float, n_t: int, rule: str = "trapezoid") -> "TimeGrid":
        if int(n_t) < 2:
            raise DimensionError("a time grid needs n_t >= 2 steps")
        return cls(np.linspace(0.0, float(T), int(n_t) + 1), rule)

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_t(self) -> int:
        return self.nodes.size - 1

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.steps == self.steps[0]))

    def index_of(self, t: float) -> int:
        """Index of the node nearest to ``t``."""
        return int(np.argmin(np.abs(self.nodes - t)))

    def with_rule(self, rule: str) -> "TimeGrid":
        return TimeGrid(self.nodes, rule)

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.rule == other.rule and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash((self.rule, self.nodes.size, float(self.nodes[-1])))

    def __repr__(self):
        return f"TimeGrid(T={self.T:g}, n_t={self.n_t}, rule={self.rule!r})"


class Path:
    """Values on every node of a time grid, shape ``(n_t + 1, d)``."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: TimeGrid, values):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != grid.n_t + 1:
            raise DimensionError(
                f"path values of shape {v.shape} do not fit a grid with {grid.n_t + 1} nodes"
            )
        self.grid = grid
        self.values = v

    @classmethod
    def zeros(cls, grid: TimeGrid, width: int) -> "Path":
        return cls(grid, np.zeros((grid.n_t + 1, width)))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "Path":
        return Path(self.grid, self.values.copy())

    def norm(self) -> float:
        return l2_norm(self)

    def at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]

    def _check(self, other):
        if not isinstance(other, Path):
            return None
        _check_compatible(self, other)
        return other.values

    def __add__(self, other):
        o = self._check(other)
        if o is None:
            return NotImplemented
        return Path(self.grid, self.values + o)

    def __sub__(self, other):
        o = self._check(other)
        if o is None:
            return NotImplemented
        return Path(self.grid, self.values - o)

    def __mul__(self, a):
        if isinstance(a, Path):
            return NotImplemented
        return Path(self.grid, self.values * float(a))

    __rmul__ = __mul__

    def __truediv__(self, a):
        return Path(self.grid, self.values / float(a))

    def __neg__(self):
        return Path(self.grid, -self.values)

    def __repr__(self):
        return f"Path({self.grid!r}, width={self.width})"


def _check_compatible(p: Path, q: Path):
    if p.grid != q.grid:
        raise DimensionError("paths live on different grids")
    if p.values.shape != q.values.shape:
        raise DimensionError(f"path widths differ: {p.values.shape} vs {q.values.shape}")


def l2_inner(p: Path, q: Path) -> float:
    """Quadrature approximation of the L2 inner product on [0, T]."""
    _check_compatible(p, q)
    return float(np.dot(p.grid.weights, np.einsum("ij,ij->i", p.values, q.values)))


def l2_norm(p: Path) -> float:
    return float(np.sqrt(max(l2_inner(p, p), 0.0)))


def project_orthogonal(d: Path, eta: Path) -> Path:
    """Remove the L2 component of ``d`` along ``eta``."""
    _check_compatible(d, eta)
    nn = l2_inner(eta, eta)
    if not nn > 0.0:
        raise SingularInstantonError("cannot project against a zero path")
    return Path(d.grid, d.values - (l2_inner(eta, d) / nn) * eta.values)


# ---------------------------------------------------------------------------
# linear parts for integrating factors


class DiagonalLinear:
    """Linear operator ``v -> diag * v`` acting on the last axis."""

    def __init__(self, diag):
        self.diag = _frozen(diag)
        self.n = self.diag.size
        self._cache = {}

    def apply(self, v):
        return v * self.diag

    apply_t = apply

    def propagator(self, h: float):
        """Return ``(E, E^T)`` callables for ``E = exp(h L)``."""
        key = float(h)
        if key not in self._cache:
            e = np.exp(self.diag * key)
            f = lambda v, e=e: v * e  # noqa: E731
            self._cache[key] = (f, f)
        return self._cache[key]

    def dense(self):
        return np.diag(self.diag)


class FourierLinear:
    """Real periodic operator diagonal in Fourier space.

    ``symbol`` has length ``n // 2 + 1`` and multiplies ``rfft`` coefficients.
    The Nyquist entry must be real for the operator to be real; its imaginary
    part is discarded.
    """

    def __init__(self, symbol, n: int):
        s = np.array(symbol, dtype=np.complex128)
        if s.size != n // 2 + 1:
            raise DimensionError("symbol length must be n//2+1")
        s[0] = s[0].real
        if n % 2 == 0:
            s[-1] = s[-1].real
        s.setflags(write=False)
        self.symbol = s
        self.n = int(n)
        self._cache = {}

    def _mult(self, v, s):
        return np.fft.irfft(np.fft.rfft(v, axis=-1) * s, n=self.n, axis=-1)

    def apply(self, v):
        return self._mult(v, self.symbol)

    def apply_t(self, v):
        return self._mult(v, self.symbol.conj())

    def propagator(self, h: float):
        key = float(h)
        if key not in self._cache:
            e = np.exp(self.symbol * key)
            ec = e.conj()
            self._cache[key] = (lambda v, e=e: self._mult(v, e), lambda v, e=ec: self._mult(v, e))
        return self._cache[key]

    def dense(self):
        return self.apply(np.eye(self.n)).T


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticSystem:
    """Coefficients of a drift ``L x + N(x)`` with diagonal L and quadratic N.

    ``N_k(x) = sum_ij quad[k, i, j] x_i x_j``, noise ``sigma @ w`` and
    observable ``f(x) = obs_lin . x + 0.5 x^T obs_quad x``. Problems that
    carry this description can use the compiled kernels.
    """

    linear_diag: np.ndarray
    quad: np.ndarray
    sigma: np.ndarray
    obs_lin: np.ndarray
    obs_quad: np.ndarray
    x0: np.ndarray

    def __post_init__(self):
        for name in ("linear_diag", "quad", "sigma", "obs_lin", "obs_quad", "x0"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        n = self.linear_diag.size
        if self.quad.shape != (n, n, n) or self.sigma.shape[0] != n:
            raise DimensionError("inconsistent quadratic system shapes")

    @property
    def quad_sym(self):
        """Symmetrized tensor ``quad[k,i,j] + quad[k,j,i]``."""
        return np.ascontiguousarray(self.quad + self.quad.transpose(0, 2, 1))


@dataclass(frozen=True)
class ProblemSpec:
    """Additive-noise SDE ``dX = b(X) dt + sqrt(eps) sigma dB`` with observable f.

    The drift is split as ``b(x) = L x + N(x)``; ``linear`` may be ``None``
    in which case ``nonlinear`` is the full drift. All callables act on the
    last axis and broadcast over leading axes. ``hessian_bilinear(x, th, g)``
    returns ``<nabla^2 N(x), th> g``, which is symmetric in its action on g.
    """

    state_dim: int
    noise_rank: int
    x0: np.ndarray
    nonlinear: Callable
    nonlinear_jac: Callable
    nonlinear_jac_t: Callable
    hessian_bilinear: Callable
    sigma_apply: Callable
    sigma_adjoint: Callable
    observable: Callable
    obs_grad: Callable
    obs_hess_action: Callable
    linear: Optional[object] = None
    quadratic: Optional[QuadraticSystem] = None
    name: str = "problem"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = _frozen(self.x0).reshape(-1)
        if x0.size != self.state_dim:
            raise DimensionError("initial state has wrong dimension")
        object.__setattr__(self, "x0", x0)

    def drift(self, x):
        y = self.nonlinear(x)
        return y if self.linear is None else y + self.linear.apply(x)

    def jacobian_action(self, x, v):
        y = self.nonlinear_jac(x, v)
        return y if self.linear is None else y + self.linear.apply(v)

    def jacobian_adjoint(self, x, v):
        y = self.nonlinear_jac_t(x, v)
        return y if self.linear is None else y + self.linear.apply_t(v)

    def diffusion_matrix(self):
        """``a = sigma sigma^T`` as a dense matrix."""
        s = self.sigma_apply(np.eye(self.noise_rank))  # rows sigma e_k
        return s.T @ s

    def noise_path(self, grid: TimeGrid, values=None) -> Path:
        if values is None:
            return Path.zeros(grid, self.noise_rank)
        p = Path(grid, values)
        if p.width != self.noise_rank:
            raise DimensionError("noise path width differs from noise rank")
        return p
