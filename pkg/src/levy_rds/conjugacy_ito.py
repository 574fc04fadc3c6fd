"""Cohomology transform between an Ito SDE with jumps and a random ODE.

For a fixed ``tau`` the process ``g_t = h_t^{x, tau}`` solves

    g_t = x + exp(-tau) int_{-T_h}^t exp(s) sigma_i(g_s) dL^i_s,

which is an initial-value problem in ``t`` started from ``g = x`` at the
truncation time.  ``H_t(x) = h_t^{x,t}`` and ``Gamma_t(x) = d h_t^{x,tau}/d tau``
at ``tau = t``.  The derivative in ``tau`` and the Jacobian in ``x`` are
co-integrated with the Euler scheme, so both are exact derivatives of the
discrete map.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    InversionError,
    IterationError,
    ParameterError,
    RangeError,
    as_points,
    as_vector,
    check_positive,
)
from .flows import FlowResult, ResidualSeries, SystemSpec, integrate_ito, integrate_rde
from .levy_paths import PathLike, TimeGrid, make_grid, shift

DEFAULT_NEWTON_TOL = 1e-10


def default_tail_horizon(newton_tol: float = DEFAULT_NEWTON_TOL) -> float:
    return max(20.0, -math.log(newton_tol))


def _extended_grid(path: PathLike, grid: TimeGrid, tail_horizon: float) -> TimeGrid:
    th = check_positive(tail_horizon, "tail_horizon")
    start_t = min(0.0, grid.t_min) - th
    if start_t < path.horizon[0] - 1e-9 * max(1.0, th):
        raise RangeError("tail horizon exceeds the path horizon")
    start = path.nodes[path.node_index(start_t, snap=True)]
    ext = make_grid(path, start, grid.t_max, grid.base_step)
    if not np.all(np.isin(grid.index, ext.index)):
        raise ParameterError("grid nodes are not on the extended lattice")
    return ext


def _stage_step(system: SystemSpec, g, D, J, w, scale):
    """One Euler stage of ``dg = e^{t-tau} sigma(g) dL`` and its derivatives.

    ``w`` is the exp-weighted increment ``int exp(s) dL_s`` of the stage and
    ``scale = exp(-tau)`` broadcasts over the leading batch axis.
    """
    S = system.noise(g)
    incr = scale[..., None] * (S @ w)
    M = None
    if D is not None or J is not None:
        M = scale[..., None, None] * np.einsum("...kij,i->...kj", system.noise_jac(g), w)
    if D is not None:
        D = D - incr + (M @ D[..., None])[..., 0]
    if J is not None:
        J = J + M @ J
    return g + incr, D, J


def _stage_weights(ext: TimeGrid):
    cont, pre, post = ext.exp_weighted(1.0, ref=0.0)
    c = ext.cells
    return cont, pre, post, c.has_pre, c.has_post


def solve_h(
    system: SystemSpec,
    path: PathLike,
    x,
    tau: float,
    grid: TimeGrid,
    tail_horizon: float,
    *,
    method: str = "ivp",
    newton_tol: float = DEFAULT_NEWTON_TOL,
    max_sweeps: int = 50,
    with_D: bool = False,
) -> FlowResult:
    """Trajectory ``t -> h_t^{x, tau}`` from the truncation time to ``grid.t_max``.

    ``method='ivp'`` marches the Euler scheme forward once.  ``method='picard'``
    iterates the truncated integral map from ``h = x`` until successive
    sweeps differ by less than ``newton_tol`` (sup norm); its fixed point
    coincides with the forward march.  With ``with_D`` the result carries
    ``D(t, tau)`` in ``meta['D']``.
    """
    x = as_vector(x, system.dim, "x")
    ext = _extended_grid(path, grid, tail_horizon)
    if method == "picard":
        return _solve_h_picard(system, ext, x, tau, newton_tol, max_sweeps, with_D)
    if method != "ivp":
        raise ParameterError(f"unknown method {method!r}")
    cont, pre, post, has_pre, has_post = _stage_weights(ext)
    n = len(ext)
    scale = np.array(math.exp(-tau))
    g = x.copy()
    D = np.zeros_like(x) if with_D else None
    out = np.empty((n, system.dim))
    Dout = np.empty((n, system.dim)) if with_D else None
    out[0] = g
    if with_D:
        Dout[0] = D
    for k in range(n - 1):
        if has_pre[k]:
            g, D, _ = _stage_step(system, g, D, None, pre[k], scale)
        g, D, _ = _stage_step(system, g, D, None, cont[k], scale)
        if has_post[k]:
            g, D, _ = _stage_step(system, g, D, None, post[k], scale)
        out[k + 1] = g
        if with_D:
            Dout[k + 1] = D
    meta = {"method": "ivp", "tau": float(tau)}
    if with_D:
        meta["D"] = Dout
    return FlowResult(ext, out, meta=meta)


def _solve_h_picard(system, ext, x, tau, tol, max_sweeps, with_D):
    cont, pre, post, has_pre, has_post = _stage_weights(ext)
    n = len(ext)
    # stage-resolved increments: (pre, cont, post) per cell, flattened in time order
    W = np.stack([pre, cont, post], axis=1).reshape(3 * (n - 1), -1)
    e = math.exp(-tau)
    d = system.dim
    stages = np.broadcast_to(x, (3 * (n - 1), d)).copy()  # state before each stage
    resid = math.inf
    for sweep in range(1, max_sweeps + 1):
        incr = e * np.einsum("pki,pi->pk", system.noise(stages), W)
        cum = np.cumsum(incr, axis=0)
        new = np.empty_like(stages)
        new[0] = x
        new[1:] = x + cum[:-1]
        resid = float(np.max(np.abs(new - stages))) if len(new) else 0.0
        stages = new
        if resid < tol:
            break
    else:
        raise IterationError(f"Picard iteration did not converge in {max_sweeps} sweeps", resid)
    incr = e * np.einsum("pki,pi->pk", system.noise(stages), W)
    traj = np.vstack([x[None], x + np.cumsum(incr, axis=0)[2::3]])
    meta = {"method": "picard", "tau": float(tau), "sweeps": sweep, "residual": resid}
    if with_D:
        Dtraj = np.zeros((n, d))
        Dv = np.zeros(d)
        M = e * np.einsum("pkij,pi->pkj", system.noise_jac(stages), W)
        for p in range(len(stages)):
            Dv = Dv - incr[p] + M[p] @ Dv
            if p % 3 == 2:
                Dtraj[p // 3 + 1] = Dv
        meta["D"] = Dtraj
    return FlowResult(ext, traj, meta=meta)


def solve_D(
    system: SystemSpec,
    path: PathLike,
    x,
    tau: float,
    h_traj: FlowResult,
    grid: TimeGrid,
    tail_horizon: float,
) -> np.ndarray:
    """``D(t, tau) = d h_t^{x,tau} / d tau`` by forward substitution along ``h_traj``.

    ``D`` obeys a linear equation driven by the stored trajectory; the stage
    values inside each cell are rebuilt from ``h_traj`` node values.
    """
    x = as_vector(x, system.dim, "x")
    ext = _extended_grid(path, grid, tail_horizon)
    if len(ext) != len(h_traj.states):
        raise ParameterError("h_traj does not match the extended grid")
    cont, pre, post, has_pre, has_post = _stage_weights(ext)
    scale = np.array(math.exp(-tau))
    D = np.zeros(system.dim)
    out = np.zeros((len(ext), system.dim))
    H = h_traj.states
    for k in range(len(ext) - 1):
        g = H[k]
        if has_pre[k]:
            g, D, _ = _stage_step(system, g, D, None, pre[k], scale)
        g, D, _ = _stage_step(system, g, D, None, cont[k], scale)
        if has_post[k]:
            g, D, _ = _stage_step(system, g, D, None, post[k], scale)
        out[k + 1] = D
    return out


def solve_h_time_changed(
    system: SystemSpec, path: PathLike, x, tau: float, grid: TimeGrid, tail_horizon: float
) -> np.ndarray:
    """Cross-check of ``h_t^{x,tau}`` through the clock ``v = exp(2t)/2``.

    In the new clock ``h~_v = x + exp(-tau) int_0^v sigma(h~) dL~`` with
    ``L~_v = int_{-inf}^{log(2v)/2} exp(s) dL_s``, a process started at 0.
    The driver increments are the exp-weighted cell sums and the equation is
    solved by a jump-adapted Euler step in ``v``; returns ``h`` at the
    extended grid nodes.
    """
    x = as_vector(x, system.dim, "x")
    ext = _extended_grid(path, grid, tail_horizon)
    cont, pre, post = ext.exp_weighted(1.0, ref=0.0)
    e = math.exp(-tau)
    out = np.empty((len(ext), system.dim))
    out[0] = x
    h = x.copy()
    # the new clock keeps the jump times, so jumps remain separate steps
    for k in range(len(ext) - 1):
        for w in (pre[k], cont[k], post[k]):
            if np.any(w):
                h = h + e * system.noise(h) @ w
        out[k + 1] = h
    return out


# ---------------------------------------------------------------------------
# the sampled field


@dataclass
class CohomologyField:
    """``H_t``, ``Gamma_t`` and ``dH_t/dx`` sampled on grid nodes and an anchor lattice.

    Values between anchors are multilinear interpolants; queries outside the
    lattice are extrapolated linearly and counted in ``extrapolations``.
    """

    system: SystemSpec
    path: PathLike
    grid: TimeGrid
    tail_horizon: float
    axes: tuple
    H_samples: np.ndarray  # (n_nodes, *lattice, d)
    Gamma_samples: np.ndarray
    dH_samples: np.ndarray  # (n_nodes, *lattice, d, d)
    newton_tol: float = DEFAULT_NEWTON_TOL
    singular: list = field(default_factory=list)
    extrapolations: int = 0

    def __post_init__(self):
        self._cache: dict = {}

    @property
    def anchors(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def _interp(self, k: int):
        it = self._cache.get(k)
        if it is None:
            vals = np.concatenate(
                [
                    self.H_samples[k],
                    self.Gamma_samples[k],
                    self.dH_samples[k].reshape(self.H_samples[k].shape[:-1] + (-1,)),
                ],
                axis=-1,
            )
            it = RegularGridInterpolator(self.axes, vals, method="linear", bounds_error=False, fill_value=None)
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[k] = it
        return it

    def _eval(self, t: float, y):
        y = np.asarray(y, dtype=float)
        d = self.system.dim
        pts = y.reshape(-1, d)
        outside = np.zeros(len(pts), dtype=bool)
        for j, ax in enumerate(self.axes):
            tol = 1e-12 * max(1.0, abs(ax[0]), abs(ax[-1]))
            outside |= (pts[:, j] < ax[0] - tol) | (pts[:, j] > ax[-1] + tol)
        if np.any(outside):
            self.extrapolations += int(outside.sum())
            warnings.warn("cohomology query outside the anchor lattice; extrapolating", RuntimeWarning, stacklevel=3)
        k = self.grid.position(t)
        if len(self.axes[0]) == 1 and d == 1:
            raw = np.broadcast_to(self._interp_values(k)[0], (len(pts), 2 * d + d * d))
        else:
            raw = self._interp(k)(pts)
        H = raw[:, :d].reshape(y.shape)
        G = raw[:, d : 2 * d].reshape(y.shape)
        dH = raw[:, 2 * d :].reshape(y.shape + (d,))
        return H, G, dH

    def _interp_values(self, k):
        return np.concatenate([self.H_samples[k], self.Gamma_samples[k], self.dH_samples[k].reshape(1, -1)], axis=-1)

    def H(self, t: float, y) -> np.ndarray:
        return self._eval(t, y)[0]

    def Gamma(self, t: float, y) -> np.ndarray:
        return self._eval(t, y)[1]

    def dH_dx(self, t: float, y) -> np.ndarray:
        return self._eval(t, y)[2]

    def to_csv(self, dest=None) -> str:
        """``t, x_anchor_id, H_1..H_d, Gamma_1..Gamma_d`` rows."""
        d = self.system.dim
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x_anchor_id"] + [f"H_{i + 1}" for i in range(d)] + [f"Gamma_{i + 1}" for i in range(d)])
        H = self.H_samples.reshape(len(self.grid), -1, d)
        G = self.Gamma_samples.reshape(len(self.grid), -1, d)
        for k, t in enumerate(self.grid.nodes):
            for a in range(H.shape[1]):
                w.writerow([repr(float(t)), a] + [repr(float(v)) for v in H[k, a]] + [repr(float(v)) for v in G[k, a]])
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return text


def _lattice_axes(anchors, dim: int) -> tuple:
    """Normalize an anchor specification into sorted unique lattice axes.

    ``anchors`` is either a list of per-dimension 1-D arrays or a point set
    whose coordinates already form a full tensor lattice.
    """
    if isinstance(anchors, (tuple, list)) and len(anchors) == dim and all(np.ndim(a) == 1 for a in anchors) and not (
        dim == 1 and np.ndim(anchors[0]) == 0
    ):
        axes = tuple(np.unique(np.asarray(a, dtype=float)) for a in anchors)
    else:
        P = as_points(anchors, dim, "anchors")
        axes = tuple(np.unique(P[:, j]) for j in range(dim))
        if np.prod([len(a) for a in axes]) != len(np.unique(P, axis=0)):
            raise ParameterError("anchors must form a tensor lattice")
    if any(len(a) == 0 for a in axes):
        raise ParameterError("anchors must be non-empty")
    if any(len(a) == 1 for a in axes) and not all(len(a) == 1 for a in axes):
        raise ParameterError("every lattice axis needs at least two values")
    return axes


def build_cohomology(
    system: SystemSpec,
    path: PathLike,
    anchors,
    grid: TimeGrid,
    tail_horizon: float,
    newton_tol: float = DEFAULT_NEWTON_TOL,
) -> CohomologyField:
    """Sample ``H_t``, ``Gamma_t`` and ``dH_t/dx`` at all grid nodes and anchors.

    All ``tau`` values (the grid nodes) and anchors are marched together; the
    ``tau`` branch is recorded when the march reaches ``t = tau``.
    """
    axes = _lattice_axes(anchors, system.dim)
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=-1)
    ext = _extended_grid(path, grid, tail_horizon)
    cont, pre, post, has_pre, has_post = _stage_weights(ext)
    d, p, q = system.dim, len(X), len(grid)
    taus = grid.nodes
    scale_all = np.exp(-taus)
    g = np.broadcast_to(X, (q, p, d)).copy()
    D = np.zeros((q, p, d))
    J = np.broadcast_to(np.eye(d), (q, p, d, d)).copy()
    H = np.empty((q, p, d))
    G = np.empty((q, p, d))
    dH = np.empty((q, p, d, d))
    # ext node position of each tau
    pos = np.searchsorted(ext.index, grid.index)
    lo = 0  # first tau still being marched
    for k in range(len(ext) - 1):
        while lo < q and pos[lo] <= k:
            lo += 1
        if lo >= q:
            break
        sl = slice(lo, q)
        gg, DD, JJ, sc = g[sl], D[sl], J[sl], scale_all[sl, None]
        if has_pre[k]:
            gg, DD, JJ = _stage_step(system, gg, DD, JJ, pre[k], sc)
        gg, DD, JJ = _stage_step(system, gg, DD, JJ, cont[k], sc)
        if has_post[k]:
            gg, DD, JJ = _stage_step(system, gg, DD, JJ, post[k], sc)
        g[sl], D[sl], J[sl] = gg, DD, JJ
        if pos[lo] == k + 1:
            H[lo], G[lo], dH[lo] = g[lo], D[lo], J[lo]
    if pos[0] == 0:  # only when the grid starts at the truncation time
        H[0], G[0], dH[0] = X, 0.0, np.eye(d)
    shape = tuple(len(a) for a in axes)
    singular = [
        (float(taus[k]), int(a))
        for k, a in zip(*np.nonzero(np.abs(np.linalg.det(dH)) < 1e-12))
    ]
    return CohomologyField(
        system,
        path,
        grid,
        float(tail_horizon),
        axes,
        H.reshape((q,) + shape + (d,)),
        G.reshape((q,) + shape + (d,)),
        dH.reshape((q,) + shape + (d, d)),
        newton_tol,
        singular,
    )


# ---------------------------------------------------------------------------
# inversion and the transformed drift


def invert_H(field_: CohomologyField, t: float, y, max_iter: int = 50) -> np.ndarray:
    """Solve ``H_t(x) = y`` by Newton with the interpolated Jacobian.

    In one dimension a bisection on an expanding bracket takes over if Newton
    stalls.
    """
    d = field_.system.dim
    y = as_vector(y, d, "y")
    tol = field_.newton_tol
    x = y.copy()
    for _ in range(max_iter):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            H, _, dH = field_._eval(t, x)
        r = H - y
        if np.max(np.abs(r)) < tol:
            return x
        try:
            step = np.linalg.solve(dH, r)
        except np.linalg.LinAlgError:
            break
        x = x - step
        if not np.all(np.isfinite(x)):
            break
    if d == 1:
        def f(s):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                return float(field_.H(t, np.array([s]))[0] - y[0])

        a, b = y[0] - 1.0, y[0] + 1.0
        for _ in range(60):
            if f(a) * f(b) <= 0:
                root = brentq(f, a, b, xtol=tol * 1e-2, rtol=4 * np.finfo(float).eps)
                return np.array([root])
            a, b = a - (b - a), b + (b - a)
    raise InversionError(f"could not invert H at t={t}")


def invert_H0(field_: CohomologyField, y) -> np.ndarray:
    """Inverse of ``H`` at the first grid node (time 0 for forward runs)."""
    return invert_H(field_, field_.grid.t_min, y)


def transformed_drift(field_: CohomologyField, system: SystemSpec, t: float, y) -> np.ndarray:
    """``(dH_t/dx)^{-1} [a(H_t(y)) - Gamma_t(y)]`` by a linear solve."""
    H, G, dH = field_._eval(t, y)
    rhs = system.drift(H) - G
    try:
        return np.linalg.solve(dH, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise ParameterError(f"singular dH/dx at t={t}") from exc


class ItoCohomology(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit(path)`` samples the field, ``transform`` applies ``H_t``."""

    def __init__(self, system=None, anchors=None, t_min: float = 0.0, t_max: float = 1.0,
                 step: float | None = None, tail_horizon: float = 20.0, newton_tol: float = DEFAULT_NEWTON_TOL):
        self.system = system
        self.anchors = anchors
        self.t_min = t_min
        self.t_max = t_max
        self.step = step
        self.tail_horizon = tail_horizon
        self.newton_tol = newton_tol

    def fit(self, path, y=None):
        if self.system is None or self.anchors is None:
            raise ParameterError("system and anchors are required")
        grid = make_grid(path, self.t_min, self.t_max, self.step)
        self.field_ = build_cohomology(self.system, path, self.anchors, grid, self.tail_horizon, self.newton_tol)
        return self

    def transform(self, X, t: float | None = None):
        check_is_fitted(self, "field_")
        t = self.field_.grid.t_min if t is None else t
        return self.field_.H(t, as_points(X, self.system.dim))

    def inverse_transform(self, X, t: float | None = None):
        check_is_fitted(self, "field_")
        t = self.field_.grid.t_min if t is None else t
        return np.array([invert_H(self.field_, t, x) for x in as_points(X, self.system.dim)])


def ito_rde_field(field_: CohomologyField, system: SystemSpec) -> Callable:
    def F(t, y):
        return transformed_drift(field_, system, t, y)

    return F


def verify_conjugacy_ito(
    system: SystemSpec,
    path: PathLike,
    x0,
    grid: TimeGrid,
    tail_horizon: float,
    anchors=None,
    field_: CohomologyField | None = None,
) -> ResidualSeries:
    """``r(t) = |phi_t(x0) - H_t(psi_t(H_0^{-1} x0))|`` on grid nodes.

    ``phi`` is the Euler flow of the SDE and ``psi`` the Heun flow of the
    transformed random ODE.  ``anchors`` defaults to a small lattice around
    the trajectory's range.
    """
    x0 = as_vector(x0, system.dim, "x0")
    phi = integrate_ito(system, path, x0, grid)
    if field_ is None:
        if anchors is None:
            lo = np.min(phi.states, axis=0)
            hi = np.max(phi.states, axis=0)
            pad = 0.5 * (hi - lo) + 0.5
            anchors = [np.linspace(lo[j] - pad[j], hi[j] + pad[j], 5) for j in range(system.dim)]
        field_ = build_cohomology(system, path, anchors, grid, tail_horizon)
    y0 = invert_H(field_, grid.t_min, x0)
    psi = integrate_rde(ito_rde_field(field_, system), path, y0, grid)
    mapped = np.array([field_.H(t, y) for t, y in zip(grid.nodes, psi.states)])
    r = np.linalg.norm(phi.states - mapped, axis=-1)
    return ResidualSeries(grid.nodes.copy(), r, meta={"phi": phi, "psi": psi, "field": field_})


def stationarity_check(
    system: SystemSpec, path: PathLike, anchors, s: float, t_max: float, tail_horizon: float,
    step: float | None = None,
) -> float:
    """``max |H_{s+t}(omega, x) - H_t(theta_s omega, x)|`` over shared nodes and anchors."""
    g_direct = make_grid(path, s, s + t_max, step)
    direct = build_cohomology(system, path, anchors, g_direct, tail_horizon)
    sp = shift(path, s)
    g_shift = make_grid(sp, 0.0, t_max, step)
    shifted = build_cohomology(system, sp, anchors, g_shift, tail_horizon)
    if len(g_direct) != len(g_shift):
        raise ParameterError("shifted grid does not match")
    return float(
        max(
            np.max(np.abs(direct.H_samples - shifted.H_samples)),
            np.max(np.abs(direct.Gamma_samples - shifted.Gamma_samples)),
        )
    )


def sde_identity_residual(field_: CohomologyField) -> ResidualSeries:
    """Telescoped residual of ``dH_t = Gamma_t dt + sigma(H_t) dL`` at the anchors.

    For each cell the increment of ``H`` is compared with one Euler step of
    that equation (jumps act on the state they meet, as in the SDE scheme);
    the running sum of the mismatch is reported (max over anchors).
    """
    sys_ = field_.system
    d = sys_.dim
    c = field_.grid.cells
    H = field_.H_samples.reshape(len(field_.grid), -1, d)
    G = field_.Gamma_samples.reshape(len(field_.grid), -1, d)
    noise = sys_.noise
    s1 = H[:-1] + np.einsum("npki,ni->npk", noise(H[:-1]), c.pre)
    s2 = s1 + G[:-1] * c.dt[:, None, None] + np.einsum("npki,ni->npk", noise(s1), c.dLc)
    s3 = s2 + np.einsum("npki,ni->npk", noise(s2), c.post)
    pred = s3 - H[:-1]
    mismatch = np.cumsum((H[1:] - H[:-1]) - pred, axis=0)
    r = np.concatenate([[0.0], np.max(np.linalg.norm(mismatch, axis=-1), axis=-1)])
    return ResidualSeries(field_.grid.nodes.copy(), r)


# ---------------------------------------------------------------------------
# the exchange-of-integration identity


def check_fubini_formula(
    system: SystemSpec,
    path: PathLike,
    x,
    s: float,
    t: float,
    tail_horizon: float,
    step: float | None = None,
) -> dict:
    """Compare both sides of the exchange-of-integration identity on ``[s, t]``.

    Left side::

        exp(-t) int_s^t exp(r) sigma(h_r^{x,t}) dL_r - int_s^t sigma(h_r^{x,r}) dL_r

    Right side::

        int_s^t int_s^u exp(r-u) [grad sigma(h_r^{x,u}) D(r,u) - sigma(h_r^{x,u})] dL_r du

    The outer integral is summed per cell with the ``tau`` argument frozen at
    the left node ``u_k``; the ``exp(-u)`` factor is integrated exactly.
    Returns ``{'lhs', 'rhs', 'residual'}``.
    """
    x = as_vector(x, system.dim, "x")
    if not t > s:
        raise ParameterError("need t > s")
    grid = make_grid(path, s, t, step)
    ext = _extended_grid(path, grid, tail_horizon)
    return _fubini_assemble(system, path, x, grid, ext)


def _fubini_assemble(system, path, x, grid, ext):
    cont, pre, post, has_pre, has_post = _stage_weights(ext)
    c = ext.cells
    d, q = system.dim, len(grid)
    taus = grid.nodes
    scale = np.exp(-taus)
    pos = np.searchsorted(ext.index, grid.index)
    k_s, k_t = pos[0], pos[-1]
    dt = c.dt
    part_cont = (dt - (-np.expm1(-dt)))[:, None] * path.triplet.effective_drift[None, :] + (
        -np.expm1(-dt / 2)
    )[:, None] * (c.dW @ path.triplet.diffusion.T)
    part_pre = (-np.expm1(-dt))[:, None] * c.pre
    zero = np.zeros_like(c.post[0])

    def kernel(gv, Dv, w):
        S = system.noise(gv)
        DS = np.einsum("...kij,...j->...ki", system.noise_jac(gv), Dv)
        return (DS - S) @ w

    g = np.broadcast_to(x, (q, d)).copy()
    D = np.zeros((q, d))
    acc = np.zeros((q, d))
    g_s = None
    lhs2 = np.zeros(d)
    rhs = np.zeros(d)
    for k in range(len(ext) - 1):
        if k == k_s:
            g_s = g[-1].copy()
        in_window = k_s <= k < k_t
        if in_window:
            j = int(np.searchsorted(pos, k))  # tau node at the left end of cell k
            # outer integral over u in cell k of exp(-u) * acc_j (cells before u_j)
            rhs += math.exp(-taus[j]) * (-math.expm1(-dt[k])) * acc[j]
        stages = []
        if has_pre[k]:
            stages.append((pre[k], c.pre[k], part_pre[k], 0))
        stages.append((cont[k], c.dLc[k], part_cont[k], 0))
        if has_post[k]:
            # a jump at the right node belongs to the branch tau = u_{k+1}
            stages.append((post[k], c.post[k], zero, 1))
        for w_exp, w_plain, w_part, lag in stages:
            if in_window:
                rhs += kernel(g[j], D[j], w_part)
                lhs2 += system.noise(g[j + lag]) @ w_plain
                acc += kernel(g, D, w_exp)
            S = system.noise(g)
            incr = scale[:, None] * (S @ w_exp)
            M = scale[:, None, None] * np.einsum("qkij,i->qkj", system.noise_jac(g), w_exp)
            D = D - incr + (M @ D[..., None])[..., 0]
            g = g + incr
        if k + 1 == k_t:
            break
    lhs1 = g[-1] - g_s
    lhs = lhs1 - lhs2
    return {"lhs": lhs, "rhs": rhs, "residual": float(np.max(np.abs(lhs - rhs)))}


# ---------------------------------------------------------------------------
# composition of a random field with a semimartingale


@dataclass
class RandomFieldSpec:
    """Scalar random field ``xi_t(x) = sum_k C_k(t) phi_k(x)`` in one dimension.

    ``C_k(t) = c_k + E_k t + F_k W_t + G_k (sum of jump sizes up to t)``, so
    the field's own integrands are ``E(x) = sum E_k phi_k(x)``,
    ``F(x) = sum F_k phi_k(x)`` and the jump change ``G(x, u) = u sum G_k phi_k(x)``.
    ``basis`` holds ``(phi_k, phi_k', phi_k'')`` triples.
    """

    basis: Sequence[tuple]
    c: np.ndarray
    E: np.ndarray
    F: np.ndarray
    G: np.ndarray

    def _eval(self, coef, x, order=0):
        return sum(ck * b[order](x) for ck, b in zip(coef, self.basis))

    @classmethod
    def polynomial(cls, c, E=None, F=None, G=None) -> "RandomFieldSpec":
        """Monomial basis ``1, x, x^2, ...`` with the given coefficient vectors."""
        K = len(c)
        basis = []
        for n in range(K):
            basis.append(
                (
                    lambda x, n=n: x**n,
                    lambda x, n=n: n * x ** (n - 1) if n >= 1 else 0.0 * x,
                    lambda x, n=n: n * (n - 1) * x ** (n - 2) if n >= 2 else 0.0 * x,
                )
            )
        z = np.zeros(K)
        arr = lambda v: z.copy() if v is None else np.asarray(v, dtype=float)
        return cls(basis, np.asarray(c, dtype=float), arr(E), arr(F), arr(G))


@dataclass
class ProcessSpec:
    """``d eta = e(eta) dt + f(eta) dW + g(eta, u) dN(u)`` with ``eta_0 = x0``."""

    e: Callable
    f: Callable
    g: Callable
    x0: float
    df: Callable | None = None


def ito_ventzell_residual(
    xi: RandomFieldSpec,
    eta: ProcessSpec,
    path: PathLike,
    grid: TimeGrid,
    *,
    second_order: bool = True,
    quadratic_variation: str = "realized",
) -> ResidualSeries:
    """Sup-node gap between ``xi_t(eta_t)`` and the accumulated chain-rule terms.

    The right side sums, per cell and from left-point values: the field's own
    increment ``E dt + F dW`` at ``eta``, the transport term
    ``xi'(eta) (e dt + f dW)``, the second-order term ``xi''(eta) (f dW)^2 / 2``,
    the cross term ``F'(eta) f dW^2`` and, at jumps, the exact composition
    change.  ``quadratic_variation='expected'`` replaces ``dW^2`` by ``dt``;
    ``second_order=False`` drops the second-order term (negative control).
    The Brownian motion is the first component of the path's ``W``.
    """
    c = grid.cells
    n = len(grid)
    dW = c.dW[:, 0] if c.dW.shape[1] else np.zeros(n - 1)
    jumps_pre = c.pre[:, 0]
    jumps_post = c.post[:, 0]
    t_nodes = grid.nodes
    W_nodes = np.concatenate([[0.0], np.cumsum(dW)])

    def coef(k_t, W, Jc):
        return xi.c + xi.E * (k_t - t_nodes[0]) + xi.F * W + xi.G * Jc

    def field(C, x, order=0):
        return xi._eval(C, x, order)

    eta_v = float(eta.x0)
    C0 = coef(t_nodes[0], 0.0, 0.0)
    lhs0 = field(C0, eta_v)
    acc = 0.0
    resid = np.zeros(n)
    Jc = 0.0
    qv_key = quadratic_variation
    if qv_key not in ("realized", "expected"):
        raise ParameterError("quadratic_variation must be 'realized' or 'expected'")
    for k in range(n - 1):
        W0 = W_nodes[k]

        def jump(eta_v, Jc, u):
            Cm = coef(t_nodes[k], W0, Jc)
            new_eta = eta_v + eta.g(eta_v, u)
            Cp = Cm + xi.G * u
            return new_eta, Jc + u, field(Cp, new_eta) - field(Cm, eta_v)

        if c.has_pre[k]:
            eta_v, Jc, dj = jump(eta_v, Jc, jumps_pre[k])
            acc += dj
        C = coef(t_nodes[k], W0, Jc)
        dt = c.dt[k]
        e_v, f_v = eta.e(eta_v), eta.f(eta_v)
        qv = dW[k] ** 2 if qv_key == "realized" else dt
        own = field(xi.E, eta_v) * dt + field(xi.F, eta_v) * dW[k]
        transport = field(C, eta_v, 1) * (e_v * dt + f_v * dW[k])
        second = 0.5 * field(C, eta_v, 2) * f_v**2 * qv if second_order else 0.0
        cross = field(xi.F, eta_v, 1) * f_v * qv
        acc += own + transport + second + cross
        eta_v = eta_v + e_v * dt + f_v * dW[k]
        if c.has_post[k]:
            eta_v, Jc, dj = jump(eta_v, Jc, jumps_post[k])
            acc += dj
        lhs = field(coef(t_nodes[k + 1], W_nodes[k + 1], Jc), eta_v)
        resid[k + 1] = abs(lhs - lhs0 - acc)
    return ResidualSeries(t_nodes.copy(), resid, meta={"max": float(resid.max())})
