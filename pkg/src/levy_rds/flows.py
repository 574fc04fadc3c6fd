"""Jump-adapted integrators for Ito SDEs, random ODEs and variational flows."""

from __future__ import annotations

import csv
import math
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._validation import DIVERGENCE_THRESHOLD, DivergenceError, ParameterError
from .levy_paths import PathLike, TimeGrid, make_grid, shift

Field = Callable[[np.ndarray], np.ndarray]


@dataclass
class SystemSpec:
    """Coefficients of ``dX = a(X) dt + sigma_i(X) dL^i``.

    All evaluators act on arrays of shape ``(..., d)``:

    * ``drift`` -> ``(..., d)``, ``drift_jac`` -> ``(..., d, d)``
    * ``noise`` -> ``(..., d, m)`` whose column ``i`` is ``sigma_i``
    * ``noise_jac`` -> ``(..., d, m, d)`` with entry ``[k, i, j] = d sigma_i^k / d x_j``
    """

    dim: int
    n_noise: int
    drift: Field
    drift_jac: Field
    noise: Field
    noise_jac: Field
    regularity_tag: str = "C_b^{1,gamma}"
    name: str = "custom"

    def self_test(self, points, h: float = 1e-6) -> float:
        """Max relative mismatch between Jacobians and central differences."""
        X = np.atleast_2d(np.asarray(points, dtype=float))
        worst = 0.0
        eye = np.eye(self.dim)
        for x in X:
            fd_a = np.stack(
                [(self.drift(x + h * e) - self.drift(x - h * e)) / (2 * h) for e in eye], axis=-1
            )
            fd_s = np.stack(
                [(self.noise(x + h * e) - self.noise(x - h * e)) / (2 * h) for e in eye], axis=-1
            )
            for fd, an in ((fd_a, self.drift_jac(x)), (fd_s, self.noise_jac(x))):
                scale = max(1.0, float(np.max(np.abs(an))))
                worst = max(worst, float(np.max(np.abs(fd - an))) / scale)
        return worst


def linear_system(B0, Bs, name: str = "linear") -> SystemSpec:
    """``a(x) = B0 x``, ``sigma_i(x) = B_i x``."""
    B0 = np.atleast_2d(np.asarray(B0, dtype=float))
    Bs = np.asarray(Bs, dtype=float).reshape(-1, B0.shape[0], B0.shape[0])
    d, m = B0.shape[0], Bs.shape[0]
    noise_jac = np.transpose(Bs, (1, 0, 2))  # [k, i, j]
    return SystemSpec(
        dim=d,
        n_noise=m,
        drift=lambda x: x @ B0.T,
        drift_jac=lambda x: np.broadcast_to(B0, x.shape[:-1] + (d, d)),
        noise=lambda x: np.einsum("ikj,...j->...ki", Bs, x),
        noise_jac=lambda x: np.broadcast_to(noise_jac, x.shape[:-1] + (d, m, d)),
        regularity_tag="linear",
        name=name,
    )


def scalar_system(a, da, s, ds, name: str = "scalar") -> SystemSpec:
    """One-dimensional system with a single noise field, from scalar callables."""
    return SystemSpec(
        dim=1,
        n_noise=1,
        drift=lambda x: a(x),
        drift_jac=lambda x: da(x)[..., None],
        noise=lambda x: s(x)[..., None],
        noise_jac=lambda x: ds(x)[..., None, None],
        name=name,
    )


@dataclass
class FlowResult:
    """Trajectory samples on a grid.

    ``states`` has shape ``(n_nodes, d)`` for a single initial point and
    ``(n_nodes, p, d)`` for a batch; ``jacobians`` adds a trailing ``(d, d)``.
    """

    grid: TimeGrid
    states: np.ndarray
    jacobians: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t: float) -> np.ndarray:
        return self.states[self.grid.position(t)]

    def to_csv(self, dest=None) -> str:
        """``t, x_1..x_d[, J_11..J_dd]`` rows (single trajectory only)."""
        if self.states.ndim != 2:
            raise ParameterError("CSV export needs a single trajectory")
        d = self.states.shape[1]
        header = ["t"] + [f"x_{i + 1}" for i in range(d)]
        if self.jacobians is not None:
            header += [f"J_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for k, t in enumerate(self.grid.nodes):
            row = [repr(float(t))] + [repr(float(v)) for v in self.states[k]]
            if self.jacobians is not None:
                row += [repr(float(v)) for v in self.jacobians[k].ravel()]
            w.writerow(row)
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return text


def _prepare(x0, dim):
    x = np.asarray(x0, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x).reshape(-1, dim).copy()
    return X, single


def _check(X, t, on_divergence, mask):
    bad = ~np.all(np.isfinite(X), axis=-1) | (np.max(np.abs(X), axis=-1) > DIVERGENCE_THRESHOLD)
    bad &= ~mask
    if np.any(bad):
        if on_divergence == "raise":
            raise DivergenceError(f"trajectory blew up at t={t}", last_time=t)
        mask |= bad
        X[mask] = np.nan
    return X


def _apply(S, u):
    return np.einsum("pki,i->pk", S, u)


def _invert_jump(system: SystemSpec, x, u, iters: int = 30):
    """Solve ``y + sigma(y) u = x`` for ``y`` by Newton."""
    y = x - _apply(system.noise(x), u)
    eye = np.eye(system.dim)
    for _ in range(iters):
        r = y + _apply(system.noise(y), u) - x
        if np.nanmax(np.abs(r), initial=0.0) < 1e-14 * max(1.0, np.nanmax(np.abs(x), initial=0.0)):
            break
        Jm = eye + np.einsum("pkij,i->pkj", system.noise_jac(y), u)
        y = y - np.linalg.solve(Jm, r[..., None])[..., 0]
    return y


def integrate_ito(
    system: SystemSpec,
    path: PathLike,
    x0,
    grid: TimeGrid,
    *,
    backward: bool = False,
    on_divergence: str = "raise",
) -> FlowResult:
    """Jump-adapted Euler-Maruyama for ``dX = a dt + sigma_i dL^i``.

    Inside a cell the continuous increment is applied first and a jump at the
    right node afterwards; a negative-side jump at the left node is applied
    before the continuous increment.  Jumps use the pre-jump coefficient.
    With ``backward=True`` the run starts at the last grid node and each cell
    is undone: jumps are inverted by Newton, the continuous part by a
    reversed explicit step.  ``on_divergence='mask'`` turns diverging points
    into NaN instead of raising.
    """
    X, single = _prepare(x0, system.dim)
    c = grid.cells
    n = len(grid)
    out = np.empty((n,) + X.shape)
    mask = np.zeros(X.shape[0], dtype=bool)
    if not backward:
        out[0] = X
        for k in range(n - 1):
            if c.has_pre[k]:
                X = X + _apply(system.noise(X), c.pre[k])
            X = X + system.drift(X) * c.dt[k] + _apply(system.noise(X), c.dLc[k])
            if c.has_post[k]:
                X = X + _apply(system.noise(X), c.post[k])
            X = _check(X, c.t1[k], on_divergence, mask)
            out[k + 1] = X
    else:
        out[-1] = X
        for k in range(n - 2, -1, -1):
            if c.has_post[k]:
                X = _invert_jump(system, X, c.post[k])
            X = X - system.drift(X) * c.dt[k] - _apply(system.noise(X), c.dLc[k])
            if c.has_pre[k]:
                X = _invert_jump(system, X, c.pre[k])
            X = _check(X, c.t0[k], on_divergence, mask)
            out[k] = X
    states = out[:, 0, :] if single else out
    return FlowResult(grid, states, meta={"integrator": "euler-ito", "cells": n - 1, "diverged": int(mask.sum())})


def integrate_variational(system: SystemSpec, path: PathLike, x0, grid: TimeGrid) -> FlowResult:
    """Euler flow together with its exact derivative ``J = dX/dx0``.

    Nodes where ``|det J|`` drops below 1e-12 are listed in
    ``meta['singular_nodes']``; this does not stop the run.
    """
    X, single = _prepare(x0, system.dim)
    d = system.dim
    c = grid.cells
    n = len(grid)
    J = np.broadcast_to(np.eye(d), (X.shape[0], d, d)).copy()
    states = np.empty((n,) + X.shape)
    jacs = np.empty((n,) + J.shape)
    states[0], jacs[0] = X, J
    eye = np.eye(d)
    singular = []

    def jump(X, J, u):
        M = eye + np.einsum("pkij,i->pkj", system.noise_jac(X), u)
        return X + _apply(system.noise(X), u), M @ J

    for k in range(n - 1):
        if c.has_pre[k]:
            X, J = jump(X, J, c.pre[k])
        M = eye + system.drift_jac(X) * c.dt[k] + np.einsum("pkij,i->pkj", system.noise_jac(X), c.dLc[k])
        X = X + system.drift(X) * c.dt[k] + _apply(system.noise(X), c.dLc[k])
        J = M @ J
        if c.has_post[k]:
            X, J = jump(X, J, c.post[k])
        _check(X, c.t1[k], "raise", np.zeros(X.shape[0], dtype=bool))
        states[k + 1], jacs[k + 1] = X, J
        if np.any(np.abs(np.linalg.det(J)) < 1e-12):
            singular.append(float(c.t1[k]))
    if single:
        states, jacs = states[:, 0], jacs[:, 0]
    return FlowResult(grid, states, jacs, meta={"integrator": "euler-variational", "singular_nodes": singular})


def integrate_rde(
    F: Callable[[float, np.ndarray], np.ndarray],
    path: PathLike,
    y0,
    grid: TimeGrid,
    *,
    backward: bool = False,
    on_divergence: str = "raise",
) -> FlowResult:
    """Heun's method for ``dy/dt = F(t, y)`` with ``F`` evaluated at nodes.

    ``path`` is accepted for symmetry with the SDE integrators; the noise
    enters only through ``F``.
    """
    y = np.asarray(y0, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y).copy()
    t = grid.nodes
    n = len(grid)
    out = np.empty((n,) + Y.shape)
    mask = np.zeros(Y.shape[0], dtype=bool)
    order = range(n - 1) if not backward else range(n - 1, 0, -1)
    out[0 if not backward else -1] = Y
    for k in order:
        k_next = k + 1 if not backward else k - 1
        h = t[k_next] - t[k]
        k1 = F(t[k], Y)
        k2 = F(t[k_next], Y + h * k1)
        Y = Y + 0.5 * h * (k1 + k2)
        Y = _check(Y, t[k_next], on_divergence, mask)
        out[k_next] = Y
    return FlowResult(grid, out[:, 0] if single else out, meta={"integrator": "heun", "diverged": int(mask.sum())})


# ---------------------------------------------------------------------------
# cocycle closures

Flow = Callable[[PathLike, np.ndarray, float, float], np.ndarray]


@dataclass
class ItoCocycle:
    """``phi_{t1 - t0}(theta_{t0} omega, x)`` realized on the path grid."""

    system: SystemSpec
    step: float | None = None
    on_divergence: str = "raise"

    def __call__(self, path: PathLike, x, t0: float, t1: float) -> np.ndarray:
        if t1 == t0:
            return np.array(x, dtype=float, copy=True)
        grid = make_grid(path, min(t0, t1), max(t0, t1), self.step)
        res = integrate_ito(self.system, path, x, grid, backward=t1 < t0, on_divergence=self.on_divergence)
        return res.states[-1] if t1 > t0 else res.states[0]


@dataclass
class RDECocycle:
    """Cocycle of a random ODE whose right side is built from the path.

    ``field_factory(path, t_lo, t_hi)`` returns ``F(t, y)`` valid on the grid
    nodes of ``[t_lo, t_hi]`` for that path.
    """

    field_factory: Callable[[PathLike], Callable]
    step: float | None = None
    on_divergence: str = "raise"

    def __call__(self, path: PathLike, y, t0: float, t1: float) -> np.ndarray:
        if t1 == t0:
            return np.array(y, dtype=float, copy=True)
        grid = make_grid(path, min(t0, t1), max(t0, t1), self.step)
        res = integrate_rde(
            self.field_factory(path, grid.t_min, grid.t_max), path, y, grid, backward=t1 < t0, on_divergence=self.on_divergence
        )
        return res.states[-1] if t1 > t0 else res.states[0]


@dataclass
class ResidualSeries:
    """A residual time series ``r(t)`` on grid nodes."""

    times: np.ndarray
    residual: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def max(self) -> float:
        return float(np.max(self.residual))

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "residual"])
        for t, r in zip(self.times, self.residual):
            w.writerow([repr(float(t)), repr(float(r))])
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return text


def jump_map_min_det(system: SystemSpec, points, jump_sizes, n_eta: int = 11) -> float:
    """Smallest ``|det(I + eta grad sigma_i(y) u^i)|`` over sampled ``y``, ``u`` and ``eta in [0, 1]``.

    A sampled spot-check that ``y -> y + eta sigma_i(y) u^i`` stays locally
    invertible; a value near zero flags a jump map that may fold.  It is not
    a global certificate.
    """
    Y = np.atleast_2d(np.asarray(points, dtype=float))
    U = np.atleast_2d(np.asarray(jump_sizes, dtype=float))
    if Y.shape[1] != system.dim or U.shape[1] != system.n_noise:
        raise ParameterError("points or jump sizes have the wrong width")
    DS = system.noise_jac(Y)  # (p, d, m, d)
    eye = np.eye(system.dim)
    worst = math.inf
    for u in U:
        M = np.einsum("pkij,i->pkj", DS, u)
        for eta in np.linspace(0.0, 1.0, int(n_eta)):
            worst = min(worst, float(np.min(np.abs(np.linalg.det(eye + eta * M)))))
    return worst


def cocycle_check(flow: Flow, path: PathLike, x0, s: float, t: float) -> float:
    """``|phi_{t+s}(omega, x0) - phi_t(theta_s omega, phi_s(omega, x0))|``.

    Both legs run on the same lattice, the second one on the shifted path.
    """
    x0 = np.asarray(x0, dtype=float)
    mid = flow(path, x0, 0.0, s)
    direct = mid if t == 0 else flow(path, x0, 0.0, s + t)
    composed = flow(shift(path, s), mid, 0.0, t)
    return float(np.max(np.linalg.norm(np.atleast_2d(direct - composed), axis=-1)))
