"""Two-sided Levy sample paths with finite-activity jumps.

A path is stored on a node set made of the uniform lattice ``k * base_step``
plus every jump time.  Values follow the usual side conventions: right
continuous for ``t >= 0`` and left continuous for ``t <= 0``.  Both sides use
the same triplet; the negative side draws from independent RNG streams.

The glued process has stationary increments across zero::

    L_t = b_eff t + A W_t + sum_{0 < s <= t} u_s          (t >= 0)
    L_t = b_eff t + A W_t - sum_{t <= s < 0} u_s          (t < 0)

with a two-sided Brownian motion ``W`` and ``b_eff`` the drift after the
optional compensation of small jumps.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from ._validation import ParameterError, RangeError, as_matrix, as_vector, check_positive

_TIME_TOL = 1e-9


# ---------------------------------------------------------------------------
# jump laws


class JumpLaw:
    """Distribution of jump sizes on R^m minus the origin."""

    kind: str = "abstract"
    dim: int

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def expect(self, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """E[fn(u)], where ``fn`` maps an ``(n, m)`` array to ``(n, ...)``."""
        raise NotImplementedError

    def char(self, z) -> np.ndarray:
        """Characteristic function E[exp(i<z,u>)] for ``z`` of shape (..., m)."""
        raise NotImplementedError

    def small_mean(self, delta: float) -> np.ndarray:
        """E[u 1{|u| <= delta}]."""
        return np.asarray(
            self.expect(lambda u: u * (np.linalg.norm(u, axis=1) <= delta)[:, None]),
            dtype=float,
        )

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class UniformBall(JumpLaw):
    """Uniform jump sizes on the closed ball of the given radius."""

    radius: float
    dim: int = 1
    kind: str = field(default="uniform-ball", init=False)

    def __post_init__(self):
        check_positive(self.radius, "radius")
        if int(self.dim) < 1:
            raise ParameterError("dim must be >= 1")

    def sample(self, rng, n):
        if self.dim == 1:
            return rng.uniform(-self.radius, self.radius, size=(n, 1))
        g = rng.standard_normal((n, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = self.radius * rng.uniform(size=(n, 1)) ** (1.0 / self.dim)
        return g * r

    @cached_property
    def _quadrature(self):
        r = self.radius
        if self.dim == 1:
            x, w = np.polynomial.legendre.leggauss(96)
            return (r * x)[:, None], w / 2.0
        if self.dim == 2:
            x, w = np.polynomial.legendre.leggauss(64)
            rho = 0.5 * r * (x + 1.0)
            wr = 0.5 * r * w * 2.0 * rho / r**2
            n_ang = 128
            ang = 2 * np.pi * np.arange(n_ang) / n_ang
            pts = np.stack(
                [np.outer(rho, np.cos(ang)).ravel(), np.outer(rho, np.sin(ang)).ravel()], axis=1
            )
            return pts, np.repeat(wr, n_ang) / n_ang
        from scipy.stats import qmc

        u = qmc.Sobol(self.dim + 1, scramble=False).random_base2(14)[1:]
        g = special.ndtri(np.clip(u[:, : self.dim], 1e-12, 1 - 1e-12))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        pts = g * r * u[:, [self.dim]] ** (1.0 / self.dim)
        return pts, np.full(len(pts), 1.0 / len(pts))

    def expect(self, fn):
        pts, w = self._quadrature
        vals = np.asarray(fn(pts), dtype=float)
        return np.tensordot(w, vals, axes=(0, 0))

    def char(self, z):
        z = np.asarray(z, dtype=float)
        x = self.radius * np.linalg.norm(z.reshape(z.shape[:-1] + (-1,)), axis=-1)
        if self.dim == 1:
            return np.sinc(x / np.pi).astype(complex)
        nu = self.dim / 2.0
        with np.errstate(invalid="ignore", divide="ignore"):
            val = special.gamma(nu + 1) * (2.0 / x) ** nu * special.jv(nu, x)
        return np.where(x < 1e-12, 1.0, val).astype(complex)

    def small_mean(self, delta):
        return np.zeros(self.dim)

    def to_dict(self):
        return {"kind": self.kind, "radius": self.radius, "dim": self.dim}


@dataclass(frozen=True)
class TwoPoint(JumpLaw):
    """Jump equal to ``a`` with probability ``p`` and to ``b`` otherwise."""

    a: tuple
    b: tuple
    p: float = 0.5
    kind: str = field(default="two-point", init=False)

    def __post_init__(self):
        a = tuple(float(v) for v in np.atleast_1d(self.a))
        b = tuple(float(v) for v in np.atleast_1d(self.b))
        if len(a) != len(b):
            raise ParameterError("two-point atoms must have equal length")
        if not np.any(a) or not np.any(b):
            raise ParameterError("jump atoms must be nonzero")
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError("p must lie in [0, 1]")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return len(self.a)

    def sample(self, rng, n):
        pick = rng.uniform(size=n) < self.p
        return np.where(pick[:, None], np.array(self.a), np.array(self.b))

    def expect(self, fn):
        vals = np.asarray(fn(np.array([self.a, self.b])), dtype=float)
        return self.p * vals[0] + (1 - self.p) * vals[1]

    def char(self, z):
        z = np.asarray(z, dtype=float)
        return self.p * np.exp(1j * (z @ np.array(self.a))) + (1 - self.p) * np.exp(
            1j * (z @ np.array(self.b))
        )

    def small_mean(self, delta):
        a, b = np.array(self.a), np.array(self.b)
        return self.p * a * (np.linalg.norm(a) <= delta) + (1 - self.p) * b * (
            np.linalg.norm(b) <= delta
        )

    def to_dict(self):
        return {"kind": self.kind, "a": list(self.a), "b": list(self.b), "p": self.p}


@dataclass(frozen=True)
class TruncatedGaussian(JumpLaw):
    """Independent truncated normal components on ``[low, high]``."""

    mean: tuple
    std: tuple
    low: tuple
    high: tuple
    kind: str = field(default="truncated-gaussian", init=False)

    def __post_init__(self):
        arrs = [tuple(float(v) for v in np.atleast_1d(x)) for x in (self.mean, self.std, self.low, self.high)]
        if len({len(a) for a in arrs}) != 1:
            raise ParameterError("truncated-gaussian parameters must have equal length")
        m, s, lo, hi = (np.array(a) for a in arrs)
        if np.any(s <= 0) or np.any(hi <= lo):
            raise ParameterError("need std > 0 and high > low")
        for name, a in zip(("mean", "std", "low", "high"), arrs):
            object.__setattr__(self, name, a)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def _std_bounds(self):
        m, s = np.array(self.mean), np.array(self.std)
        return (np.array(self.low) - m) / s, (np.array(self.high) - m) / s

    def sample(self, rng, n):
        al, be = self._std_bounds()
        return stats.truncnorm.rvs(
            al, be, loc=np.array(self.mean), scale=np.array(self.std), size=(n, self.dim), random_state=rng
        )

    @cached_property
    def _quadrature(self):
        if self.dim > 3:
            raise ParameterError("truncated-gaussian quadrature supports dim <= 3")
        x, w = np.polynomial.legendre.leggauss(64)
        al, be = self._std_bounds()
        axes, weights = [], []
        for k in range(self.dim):
            lo, hi = self.low[k], self.high[k]
            pts = 0.5 * (hi - lo) * (x + 1) + lo
            dens = stats.truncnorm.pdf(pts, al[k], be[k], loc=self.mean[k], scale=self.std[k])
            axes.append(pts)
            weights.append(0.5 * (hi - lo) * w * dens)
        grids = np.meshgrid(*axes, indexing="ij")
        wgrid = np.ones_like(grids[0])
        for k, wk in enumerate(weights):
            shape = [1] * self.dim
            shape[k] = -1
            wgrid = wgrid * wk.reshape(shape)
        return np.stack([g.ravel() for g in grids], axis=1), wgrid.ravel()

    def expect(self, fn):
        pts, w = self._quadrature
        return np.tensordot(w, np.asarray(fn(pts), dtype=float), axes=(0, 0))

    def char(self, z):
        z = np.asarray(z, dtype=float)
        m, s = np.array(self.mean), np.array(self.std)
        al, be = self._std_bounds()

        def cdf(w):
            return 0.5 * (1.0 + special.erf(w / math.sqrt(2.0)))

        kappa = s * z
        num = cdf(be - 1j * kappa) - cdf(al - 1j * kappa)
        den = cdf(be) - cdf(al)
        comp = np.exp(1j * z * m - 0.5 * kappa**2) * num / den
        return np.prod(comp, axis=-1)

    def small_mean(self, delta):
        if self.dim == 1:
            m, s = self.mean[0], self.std[0]
            lo, hi = max(self.low[0], -delta), min(self.high[0], delta)
            if hi <= lo:
                return np.zeros(1)
            al, be = self._std_bounds()
            a2, b2 = (lo - m) / s, (hi - m) / s
            z = stats.norm.cdf(be[0]) - stats.norm.cdf(al[0])
            val = m * (stats.norm.cdf(b2) - stats.norm.cdf(a2)) + s * (stats.norm.pdf(a2) - stats.norm.pdf(b2))
            return np.array([val / z])
        return super().small_mean(delta)

    def to_dict(self):
        return {
            "kind": self.kind,
            "mean": list(self.mean),
            "std": list(self.std),
            "low": list(self.low),
            "high": list(self.high),
        }


def jump_law_from_dict(spec: dict) -> JumpLaw:
    """Build a jump law from a ``{"kind": ..., ...}`` mapping."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "uniform-ball":
        return UniformBall(float(spec.pop("radius")), int(spec.pop("dim", 1)))
    if kind == "two-point":
        return TwoPoint(spec.pop("a"), spec.pop("b"), float(spec.pop("p", 0.5)))
    if kind == "truncated-gaussian":
        return TruncatedGaussian(spec.pop("mean"), spec.pop("std"), spec.pop("low"), spec.pop("high"))
    raise ParameterError(f"unknown jump law kind {kind!r}")


# ---------------------------------------------------------------------------
# triplet


@dataclass(frozen=True, eq=False)
class LevyTriplet:
    """Law of a finite-activity Levy process.

    Parameters
    ----------
    dim : int
        Dimension ``m`` of the process.
    drift : array (m,)
        Drift ``b`` in Levy-Khintchine form when ``compensate_small`` is on,
        otherwise the plain drift of ``bt + AW + sum of jumps``.
    diffusion : array (m, m')
        Matrix ``A``; the Gaussian covariance is ``Q = A A^T``.
    jump_rate : float
        Intensity of the compound Poisson part.
    jump_law : JumpLaw or None
        Jump size distribution (required when ``jump_rate > 0``).
    small_jump_cutoff : float
        The cutoff ``delta`` in (0, 1).
    compensate_small : bool
        Subtract ``rate * E[u 1{|u|<=delta}]`` from the drift.
    """

    dim: int
    drift: np.ndarray
    diffusion: np.ndarray
    jump_rate: float = 0.0
    jump_law: JumpLaw | None = None
    small_jump_cutoff: float = 0.5
    compensate_small: bool = False

    def __post_init__(self):
        dim = int(self.dim)
        if dim < 1:
            raise ParameterError("dim must be >= 1")
        drift = as_vector(self.drift, dim, "drift")
        diff = as_matrix(self.diffusion, dim, "diffusion") if np.size(self.diffusion) else np.zeros((dim, 0))
        if not 0.0 < self.small_jump_cutoff < 1.0:
            raise ParameterError("small_jump_cutoff must lie in (0, 1)")
        check_positive(self.jump_rate, "jump_rate", strict=False)
        if self.jump_rate > 0 and self.jump_law is None:
            raise ParameterError("jump_law is required when jump_rate > 0")
        if self.jump_law is not None and self.jump_law.dim != dim:
            raise ParameterError("jump_law dimension does not match triplet dimension")
        drift.setflags(write=False)
        diff.setflags(write=False)
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "diffusion", diff)
        object.__setattr__(self, "jump_rate", float(self.jump_rate))

    @property
    def Q(self) -> np.ndarray:
        return self.diffusion @ self.diffusion.T

    @property
    def n_brownian(self) -> int:
        return self.diffusion.shape[1]

    @cached_property
    def effective_drift(self) -> np.ndarray:
        """Deterministic drift of the pathwise construction."""
        if self.compensate_small and self.jump_rate > 0:
            return self.drift - self.jump_rate * self.jump_law.small_mean(self.small_jump_cutoff)
        return self.drift.copy()

    def psi(self, z) -> np.ndarray:
        """Characteristic exponent, so that E exp(i<z, L_t>) = exp(t psi(z))."""
        z = np.asarray(z, dtype=float)
        val = 1j * (z @ self.effective_drift) - 0.5 * np.einsum("...i,ij,...j->...", z, self.Q, z)
        if self.jump_rate > 0:
            val = val + self.jump_rate * (self.jump_law.char(z) - 1.0)
        return val

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "drift": self.drift.tolist(),
            "diffusion": self.diffusion.tolist(),
            "jump_rate": self.jump_rate,
            "jump_law": None if self.jump_law is None else self.jump_law.to_dict(),
            "small_jump_cutoff": self.small_jump_cutoff,
            "compensate_small": self.compensate_small,
        }


# ---------------------------------------------------------------------------
# paths


class _PathBase:
    """Shared node-level machinery for sampled paths and shifted views."""

    triplet: LevyTriplet
    base_step: float

    # subclasses provide: nodes, W, jump, is_jump, is_base, base_k, L, horizon

    @property
    def zero_index(self) -> int:
        return int(np.searchsorted(self.nodes, 0.0 - _TIME_TOL))

    def node_index(self, t: float, snap: bool = False) -> int:
        """Index of the node at time ``t``.

        Raises :class:`RangeError` outside the horizon and
        :class:`ParameterError` if ``t`` is not a node (unless ``snap``).
        """
        self._check_range(t)
        i = int(np.searchsorted(self.nodes, t))
        cands = [j for j in (i - 1, i) if 0 <= j < len(self.nodes)]
        j = min(cands, key=lambda k: abs(self.nodes[k] - t))
        if abs(self.nodes[j] - t) > _TIME_TOL * max(1.0, abs(t)) and not snap:
            raise ParameterError(f"t={t!r} is not a node of the path")
        return j

    def _check_range(self, t):
        t = np.asarray(t, dtype=float)
        lo, hi = self.horizon
        tol = _TIME_TOL * max(1.0, abs(lo), abs(hi))
        if np.any(t < lo - tol) or np.any(t > hi + tol):
            raise RangeError(f"time outside horizon [{lo}, {hi}]")

    def evaluate(self, t):
        """Path value at ``t`` (scalar) or at each entry of an array of times."""
        t_arr = np.asarray(t, dtype=float)
        self._check_range(t_arr)
        flat = np.atleast_1d(t_arr).ravel()
        out = np.empty((flat.size, self.triplet.dim))
        nodes = self.nodes
        for n, tt in enumerate(flat):
            i = int(np.searchsorted(nodes, tt))
            if i < len(nodes) and abs(nodes[i] - tt) <= _TIME_TOL * max(1.0, abs(tt)):
                out[n] = self.L[i]
                continue
            if i > 0 and abs(nodes[i - 1] - tt) <= _TIME_TOL * max(1.0, abs(tt)):
                out[n] = self.L[i - 1]
                continue
            lo, hi = i - 1, i
            lam = (tt - nodes[lo]) / (nodes[hi] - nodes[lo])
            w = (1 - lam) * self.W[lo] + lam * self.W[hi]
            jump_part = self._jump_cum[lo] if tt > 0 else self._jump_cum[hi]
            out[n] = self._drift_at(tt) + self.triplet.diffusion @ w + jump_part
        return out[0] if t_arr.ndim == 0 else out.reshape(t_arr.shape + (self.triplet.dim,))

    def left_limit(self, t: float) -> np.ndarray:
        """L_{t-}; differs from L_t only at positive jump times."""
        i = self.node_index(t, snap=True)
        val = self.evaluate(t)
        return val - self.jump[i] if (self.is_jump[i] and self.nodes[i] > 0) else val

    def right_limit(self, t: float) -> np.ndarray:
        """L_{t+}; differs from L_t only at negative jump times."""
        i = self.node_index(t, snap=True)
        val = self.evaluate(t)
        return val + self.jump[i] if (self.is_jump[i] and self.nodes[i] < 0) else val

    def jump_times(self) -> np.ndarray:
        return self.nodes[self.is_jump]

    def _drift_at(self, t):
        raise NotImplementedError

    @property
    def _jump_cum(self):
        raise NotImplementedError


@dataclass(eq=False)
class TwoSidedPath(_PathBase):
    """One sampled realization of a two-sided Levy process.

    Attributes
    ----------
    nodes : (N,) strictly increasing times containing 0
    W : (N, m') two-sided Brownian motion at the nodes, W(0) = 0
    jump : (N, m) jump size recorded at each node (zero where no jump)
    is_jump, is_base : (N,) flags; ``base_k`` gives k for lattice nodes
    """

    triplet: LevyTriplet
    seed: int
    base_step: float
    horizon: tuple
    nodes: np.ndarray
    W: np.ndarray
    jump: np.ndarray
    is_jump: np.ndarray
    is_base: np.ndarray
    base_k: np.ndarray
    refine_level: int = 1

    def __post_init__(self):
        for arr in (self.nodes, self.W, self.jump, self.is_jump, self.is_base, self.base_k):
            arr.setflags(write=False)

    @cached_property
    def _jump_cum(self) -> np.ndarray:
        z = self.zero_index
        cum = np.zeros_like(self.jump)
        cum[z:] = np.cumsum(self.jump[z:], axis=0)
        if z > 0:
            cum[:z] = -np.cumsum(self.jump[:z][::-1], axis=0)[::-1]
        cum.setflags(write=False)
        return cum

    def _drift_at(self, t):
        return self.triplet.effective_drift * t

    @cached_property
    def L(self) -> np.ndarray:
        val = (
            self.nodes[:, None] * self.triplet.effective_drift[None, :]
            + self.W @ self.triplet.diffusion.T
            + self._jump_cum
        )
        val[self.zero_index] = 0.0
        val.setflags(write=False)
        return val

    @property
    def jumps_pos(self):
        mask = self.is_jump & (self.nodes > 0)
        return list(zip(self.nodes[mask].tolist(), self.jump[mask]))

    @property
    def jumps_neg(self):
        mask = self.is_jump & (self.nodes < 0)
        return list(zip(self.nodes[mask].tolist(), self.jump[mask]))


class ShiftView(_PathBase):
    """The shifted path ``t -> L(s + t) - L(s)``.

    ``s`` is snapped to the nearest node of the base path.  Node arrays are
    those of the base path translated by ``-s``; jumps keep their sizes.  At a
    jump node the side convention follows the sign of the shifted time.
    """

    def __init__(self, base: TwoSidedPath, offset: float):
        if isinstance(base, ShiftView):
            offset = base.offset + offset
            base = base.base
        k = base.node_index(offset, snap=True)
        if abs(base.nodes[k] - offset) > _TIME_TOL * max(1.0, abs(offset)):
            warnings.warn(f"shift {offset} snapped to node {base.nodes[k]}", stacklevel=2)
        self.base = base
        self.offset = float(base.nodes[k])
        self._k = k
        self.triplet = base.triplet
        self.base_step = base.base_step
        self.seed = base.seed

    @property
    def horizon(self):
        return (self.base.horizon[0] - self.offset, self.base.horizon[1] - self.offset)

    @cached_property
    def nodes(self):
        arr = self.base.nodes - self.offset
        arr[self._k] = 0.0
        arr.setflags(write=False)
        return arr

    @cached_property
    def W(self):
        arr = self.base.W - self.base.W[self._k]
        arr.setflags(write=False)
        return arr

    @property
    def jump(self):
        return self.base.jump

    @property
    def is_jump(self):
        return self.base.is_jump

    @property
    def is_base(self):
        return self.base.is_base

    @cached_property
    def base_k(self):
        return self.base.base_k - int(round(self.offset / self.base_step))

    @cached_property
    def L(self):
        arr = self.base.L - self.base.L[self._k]
        arr.setflags(write=False)
        return arr

    @cached_property
    def _jump_cum(self):
        return self.base._jump_cum - self.base._jump_cum[self._k]

    def _drift_at(self, t):
        return self.triplet.effective_drift * t

    def evaluate(self, t):
        t_arr = np.asarray(t, dtype=float)
        self._check_range(t_arr)
        return self.base.evaluate(t_arr + self.offset) - self.base.L[self._k]


PathLike = TwoSidedPath | ShiftView


def shift(path: PathLike, s: float) -> ShiftView:
    """Wiener shift ``theta_s`` of a path."""
    path._check_range(s)
    return ShiftView(path, s)


def _block_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key))


def sample_path(
    triplet: LevyTriplet,
    horizon: Sequence[float],
    base_step: float,
    seed: int,
    forced_jumps: Sequence[tuple] | None = None,
) -> TwoSidedPath:
    """Sample a two-sided path on ``horizon = (t_min, t_max)``.

    The horizon is tiled into blocks of about unit length; each block on each
    side owns an RNG stream keyed by ``(seed, side, block)`` so extending the
    horizon leaves the shared part unchanged.  ``forced_jumps`` replaces the
    random jump record by the given ``(time, size)`` list.
    """
    t_min, t_max = (float(v) for v in horizon)
    if not t_min <= 0.0 <= t_max:
        raise ParameterError("horizon must contain 0")
    h = check_positive(base_step, "base_step")
    m, mp = triplet.dim, triplet.n_brownian
    n_pos = int(math.ceil(t_max / h - 1e-9))
    n_neg = int(math.ceil(-t_min / h - 1e-9))
    per_block = max(1, int(round(1.0 / h)))
    block_len = per_block * h

    lattice_W = {0: np.zeros(mp)}
    jumps: list[tuple[float, np.ndarray]] = []
    bridge_normals: dict[tuple[int, int], np.random.Generator] = {}
    for side, n_cells in ((0, n_pos), (1, n_neg)):
        sign = 1.0 if side == 0 else -1.0
        n_blocks = int(math.ceil(n_cells / per_block)) if n_cells else 0
        w_last = np.zeros(mp)
        for blk in range(n_blocks):
            rng = _block_rng(seed, side, blk)
            dW = rng.standard_normal((per_block, mp)) * math.sqrt(h)
            n_j = rng.poisson(triplet.jump_rate * block_len) if triplet.jump_rate > 0 else 0
            offs = rng.uniform(0.0, block_len, size=n_j)
            sizes = triplet.jump_law.sample(rng, n_j) if n_j else np.zeros((0, m))
            bridge_normals[(side, blk)] = rng
            for j in range(per_block):
                k = blk * per_block + j
                if k >= n_cells:
                    break
                w_last = w_last + dW[j]
                lattice_W[int(sign * (k + 1))] = w_last
            for off, u in zip(offs, sizes):
                # positive side: (blk L, (blk+1) L]; negative side: [-(blk+1) L, -blk L)
                t = sign * (blk * block_len + block_len - off)
                if t_min - 1e-12 <= t <= t_max + 1e-12 and t != 0.0:
                    jumps.append((t, np.asarray(u, dtype=float)))

    if forced_jumps is not None:
        jumps = []
        for t, u in forced_jumps:
            t = float(t)
            if not t_min <= t <= t_max or t == 0.0:
                raise ParameterError(f"forced jump time {t} outside horizon or at 0")
            jumps.append((t, as_vector(u, m, "jump size")))

    lat_k = np.array(sorted(lattice_W))
    lat_t = lat_k * h
    lat_W = np.array([lattice_W[k] for k in lat_k]).reshape(len(lat_k), mp)

    # merge jump times into the lattice
    node_t = list(lat_t)
    node_W = list(lat_W)
    is_base = [True] * len(lat_t)
    base_k = list(lat_k)
    jump_at = [np.zeros(m) for _ in lat_t]
    extra = []
    for t, u in sorted(jumps, key=lambda p: p[0]):
        k_near = int(round(t / h))
        if abs(k_near * h - t) <= 1e-12 * max(1.0, abs(t)) and k_near in lattice_W:
            idx = int(np.searchsorted(lat_k, k_near))
            jump_at[idx] = jump_at[idx] + u
        else:
            extra.append((t, u))

    # Brownian bridge for the off-lattice jump times, in time order per cell
    if extra:
        by_cell: dict[int, list] = {}
        for t, u in extra:
            by_cell.setdefault(int(math.floor(t / h)), []).append((t, u))
        for cell, items in sorted(by_cell.items(), key=lambda kv: abs(kv[0] + 0.5)):
            a_t, b_t = cell * h, (cell + 1) * h
            ia = int(np.searchsorted(lat_k, cell))
            wa, wb = lat_W[ia], lat_W[ia + 1]
            side = 0 if cell >= 0 else 1
            blk = cell // per_block if side == 0 else (-cell - 1) // per_block
            rng = bridge_normals[(side, blk)]
            prev_t, prev_w = a_t, wa
            for t, u in sorted(items, key=lambda p: p[0]):
                frac = (t - prev_t) / (b_t - prev_t)
                var = (t - prev_t) * (b_t - t) / (b_t - prev_t)
                w = prev_w + frac * (wb - prev_w) + math.sqrt(max(var, 0.0)) * rng.standard_normal(mp)
                node_t.append(t)
                node_W.append(w)
                is_base.append(False)
                base_k.append(0)
                jump_at.append(u)
                prev_t, prev_w = t, w

    order = np.argsort(node_t, kind="stable")
    nodes = np.asarray(node_t, dtype=float)[order]
    W = np.asarray(node_W, dtype=float).reshape(len(node_t), mp)[order]
    jump = np.asarray(jump_at, dtype=float).reshape(len(node_t), m)[order]
    is_base_arr = np.asarray(is_base, dtype=bool)[order]
    base_k_arr = np.asarray(base_k, dtype=np.int64)[order]
    is_jump = np.any(jump != 0.0, axis=1)
    return TwoSidedPath(
        triplet=triplet,
        seed=int(seed),
        base_step=h,
        horizon=(float(lat_t[0]), float(lat_t[-1])),
        nodes=nodes,
        W=W,
        jump=jump,
        is_jump=is_jump,
        is_base=is_base_arr,
        base_k=base_k_arr,
    )


def refine(path: TwoSidedPath, factor: int) -> TwoSidedPath:
    """Subdivide every lattice cell into ``factor`` cells by Brownian bridge.

    Existing nodes keep their values, so coarse and fine paths agree on the
    shared nodes.
    """
    factor = int(factor)
    if factor < 1:
        raise ParameterError("factor must be a positive integer")
    if factor == 1:
        return path
    h_new = path.base_step / factor
    level = path.refine_level * factor
    mp = path.triplet.n_brownian
    new_t, new_W, new_k = [], [], []
    nodes, W = path.nodes, path.W
    lat_idx = np.flatnonzero(path.is_base)
    for a_i, b_i in zip(lat_idx[:-1], lat_idx[1:]):
        k0 = int(path.base_k[a_i])
        cell_key = (k0, 1) if k0 >= 0 else (-k0 - 1, 2)
        rng = _block_rng(path.seed, 9, level, *cell_key)
        fine = [(k0 * factor + j) for j in range(1, factor)]
        # old nodes strictly inside the lattice cell (jump times) act as anchors
        anchors_t = list(nodes[a_i : b_i + 1])
        anchors_W = list(W[a_i : b_i + 1])
        for kf in fine:
            t = kf * h_new
            pos = int(np.searchsorted(anchors_t, t))
            lo_t, lo_w = anchors_t[pos - 1], anchors_W[pos - 1]
            hi_t, hi_w = anchors_t[pos], anchors_W[pos]
            frac = (t - lo_t) / (hi_t - lo_t)
            var = (t - lo_t) * (hi_t - t) / (hi_t - lo_t)
            w = lo_w + frac * (hi_w - lo_w) + math.sqrt(max(var, 0.0)) * rng.standard_normal(mp)
            anchors_t.insert(pos, t)
            anchors_W.insert(pos, w)
            new_t.append(t)
            new_W.append(w)
            new_k.append(kf)
    if not new_t:
        return path
    m = path.triplet.dim
    nodes2 = np.concatenate([nodes, np.asarray(new_t)])
    W2 = np.concatenate([W, np.asarray(new_W).reshape(-1, mp)])
    jump2 = np.concatenate([path.jump, np.zeros((len(new_t), m))])
    is_base2 = np.concatenate([path.is_base, np.ones(len(new_t), dtype=bool)])
    k2 = np.concatenate([np.where(path.is_base, path.base_k * factor, 0), np.asarray(new_k)])
    order = np.argsort(nodes2, kind="stable")
    jump2 = jump2[order]
    return TwoSidedPath(
        triplet=path.triplet,
        seed=path.seed,
        base_step=h_new,
        horizon=path.horizon,
        nodes=nodes2[order],
        W=W2[order],
        jump=jump2,
        is_jump=np.any(jump2 != 0.0, axis=1),
        is_base=is_base2[order],
        base_k=k2[order].astype(np.int64),
        refine_level=level,
    )


# ---------------------------------------------------------------------------
# grids and cell increments


@dataclass
class CellData:
    """Per-cell increments of a grid.

    ``pre`` holds the jump applied at the start of the cell (negative-side
    jump at the left node), ``post`` the jump applied at its end (positive-side
    jump at the right node); ``dLc`` is the continuous increment.
    """

    t0: np.ndarray
    t1: np.ndarray
    dt: np.ndarray
    dW: np.ndarray
    dLc: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    has_pre: np.ndarray
    has_post: np.ndarray

    def __len__(self):
        return len(self.dt)


class TimeGrid:
    """Jump-adapted subset of path nodes between ``t_min`` and ``t_max``.

    Attributes
    ----------
    nodes : (n,) times;  index : (n,) indices into ``path.nodes``
    base_step : grid step (a multiple of the path lattice step)
    """

    def __init__(self, path: PathLike, index: np.ndarray, base_step: float):
        self.path = path
        self.index = np.asarray(index, dtype=np.int64)
        self.nodes = np.asarray(path.nodes[self.index], dtype=float)
        self.base_step = float(base_step)
        if len(self.nodes) < 1 or np.any(np.diff(self.nodes) <= 0):
            raise ParameterError("grid nodes must be strictly increasing")

    @property
    def t_min(self) -> float:
        return float(self.nodes[0])

    @property
    def t_max(self) -> float:
        return float(self.nodes[-1])

    def __len__(self):
        return len(self.nodes)

    def position(self, t: float) -> int:
        """Index of time ``t`` within this grid."""
        i = int(np.searchsorted(self.nodes, t))
        cands = [j for j in (i - 1, i) if 0 <= j < len(self.nodes)]
        j = min(cands, key=lambda k: abs(self.nodes[k] - t))
        if abs(self.nodes[j] - t) > _TIME_TOL * max(1.0, abs(t)):
            raise ParameterError(f"t={t} is not a grid node")
        return j

    @cached_property
    def cells(self) -> CellData:
        p = self.path
        idx = self.index
        t = self.nodes
        dt = np.diff(t)
        dW = np.diff(p.W[idx], axis=0)
        dLc = dt[:, None] * p.triplet.effective_drift[None, :] + dW @ p.triplet.diffusion.T
        jumps = p.jump[idx]
        isj = p.is_jump[idx]
        has_pre = isj[:-1] & (t[:-1] < 0)
        has_post = isj[1:] & (t[1:] > 0)
        pre = np.where(has_pre[:, None], jumps[:-1], 0.0)
        post = np.where(has_post[:, None], jumps[1:], 0.0)
        return CellData(t[:-1], t[1:], dt, dW, dLc, pre, post, has_pre, has_post)

    def exp_weighted(self, mu: float, ref: float | None = 0.0):
        """Cellwise integrals of ``exp(mu (s - ref)) dL_s``.

        Returns ``(cont, pre, post)``: the continuous part (drift in closed
        form, Brownian increment weighted at the cell midpoint) and the two
        jump parts weighted at their exact times.  ``ref=None`` uses each
        cell's right endpoint as reference.
        """
        c = self.cells
        tr = self.path.triplet
        if ref is None:
            ref = c.t1
        e0 = np.exp(mu * (c.t0 - ref))
        if mu == 0:
            drift_w = c.dt
        else:
            drift_w = e0 * np.expm1(mu * c.dt) / mu
        mid = np.exp(mu * (0.5 * (c.t0 + c.t1) - ref))
        cont = drift_w[:, None] * tr.effective_drift[None, :] + mid[:, None] * (c.dW @ tr.diffusion.T)
        pre = e0[:, None] * c.pre
        post = np.exp(mu * (c.t1 - ref))[:, None] * c.post
        return cont, pre, post

    def values(self) -> np.ndarray:
        """Path values at the grid nodes."""
        return self.path.L[self.index]


def make_grid(path: PathLike, t_min: float, t_max: float, step: float | None = None) -> TimeGrid:
    """Jump-adapted grid on ``[t_min, t_max]``.

    Keeps lattice nodes whose index is a multiple of ``step / base_step``, all
    jump times and both endpoints (which must be path nodes).
    """
    if t_max < t_min:
        raise ParameterError("t_max must be >= t_min")
    i0 = path.node_index(t_min)
    i1 = path.node_index(t_max)
    h = path.base_step
    q = 1 if step is None else step / h
    if step is not None and abs(q - round(q)) > 1e-6:
        raise ParameterError("grid step must be an integer multiple of the path lattice step")
    q = max(1, int(round(q)))
    sl = slice(i0, i1 + 1)
    keep = (path.is_base[sl] & (np.mod(path.base_k[sl], q) == 0)) | path.is_jump[sl]
    keep[0] = keep[-1] = True
    idx = np.arange(i0, i1 + 1)[keep]
    return TimeGrid(path, idx, q * h)


# ---------------------------------------------------------------------------
# stationary exponential integrals and checks


def stationary_exp_integral(path: PathLike, mu: float, t: float, tail_horizon: float) -> np.ndarray:
    """``exp(-mu t) * int_{-T_h}^t exp(mu s) dL_s`` on the lattice cells."""
    mu = check_positive(mu, "mu")
    th = check_positive(tail_horizon, "tail_horizon")
    lo = -th
    if lo < path.horizon[0] - _TIME_TOL * max(1.0, th):
        raise RangeError("tail horizon exceeds the path horizon")
    grid = make_grid(path, path.nodes[path.node_index(lo, snap=True)], t)
    cont, pre, post = grid.exp_weighted(mu, ref=t)
    return (cont + pre + post).sum(axis=0)


def sample_increment(triplet: LevyTriplet, t: float, n_samples: int, seed: int) -> np.ndarray:
    """Draw ``n_samples`` independent copies of ``L_t``."""
    rng = np.random.default_rng(seed)
    m = triplet.dim
    out = np.tile(triplet.effective_drift * t, (n_samples, 1))
    if triplet.n_brownian:
        out += rng.standard_normal((n_samples, triplet.n_brownian)) @ triplet.diffusion.T * math.sqrt(t)
    if triplet.jump_rate > 0:
        counts = rng.poisson(triplet.jump_rate * t, size=n_samples)
        total = int(counts.sum())
        if total:
            sizes = triplet.jump_law.sample(rng, total)
            owner = np.repeat(np.arange(n_samples), counts)
            np.add.at(out, owner, sizes.reshape(total, m))
    return out


def empirical_characteristic_check(
    triplet: LevyTriplet, t: float, z_grid, n_samples: int, seed: int
) -> float:
    """Max over ``z_grid`` of |empirical CF of L_t - exp(t psi(z))|."""
    if n_samples < 1000:
        raise ParameterError("n_samples must be >= 1000")
    z = np.asarray(z_grid, dtype=float).reshape(-1, triplet.dim)
    samples = sample_increment(triplet, t, n_samples, seed)
    emp = np.exp(1j * samples @ z.T).mean(axis=0)
    theory = np.exp(t * triplet.psi(z))
    return float(np.max(np.abs(emp - theory)))


# ---------------------------------------------------------------------------
# CSV


@dataclass
class PathTable:
    t: np.ndarray
    L: np.ndarray
    is_jump: np.ndarray


def path_to_csv(path: PathLike, dest=None) -> str:
    """Write ``t, L_1..L_m, is_jump`` rows; returns the text."""
    m = path.triplet.dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"L_{i + 1}" for i in range(m)] + ["is_jump"])
    for t, row, j in zip(path.nodes, path.L, path.is_jump):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in row] + [int(j)])
    text = buf.getvalue()
    if dest is not None:
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    return text


def read_path_csv(src) -> PathTable:
    """Read a path dump written by :func:`path_to_csv`."""
    if hasattr(src, "read"):
        text = src.read()
    else:
        with open(src, newline="") as fh:
            text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if header[0] != "t" or header[-1] != "is_jump":
        raise ParameterError("not a path CSV")
    arr = np.array([[float(v) for v in r[:-1]] for r in body])
    return PathTable(arr[:, 0], arr[:, 1:], np.array([r[-1] == "1" for r in body]))


def table_to_csv(table: PathTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    m = table.L.shape[1]
    w.writerow(["t"] + [f"L_{i + 1}" for i in range(m)] + ["is_jump"])
    for t, row, j in zip(table.t, table.L, table.is_jump):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in row] + [int(j)])
    return buf.getvalue()
