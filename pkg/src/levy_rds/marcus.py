"""Marcus canonical SDEs, the flow map of the noise fields and the OU transform.

For commuting noise fields the Marcus equation

    dX = a(X) dt + sigma_i(X) <> dL^i

is conjugate to a random ODE through ``H_t(x) = Phi(Z_t, x)``, where ``Phi``
solves ``d Phi / d z_i = sigma_i(Phi)`` and ``Z`` is the stationary OU
process ``dZ = -mu Z dt + dL``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    HypothesisError,
    ParameterError,
    as_points,
    as_vector,
    check_positive,
)
from .flows import FlowResult, ResidualSeries, _check, integrate_rde
from .levy_paths import PathLike, TimeGrid, make_grid


# ---------------------------------------------------------------------------
# flow map


class FlowMap:
    """Solution map ``Phi(z, x)`` of ``d Phi / d z_i = sigma_i(Phi)``, ``Phi(0, x) = x``.

    Use :meth:`closed_form_linear` for affine fields ``sigma_i(x) = S_i x + beta_i``
    or :meth:`numeric_ode` for general fields.
    """

    def __init__(self, mode: str, dim: int, n_noise: int, **kw):
        self.mode = mode
        self.dim = int(dim)
        self.n_noise = int(n_noise)
        if mode == "closed_form_linear":
            self.mats = np.asarray(kw["mats"], dtype=float).reshape(n_noise, dim, dim)
            off = kw.get("offsets")
            self.offsets = np.zeros((n_noise, dim)) if off is None else np.asarray(off, float).reshape(n_noise, dim)
            self._check_commuting()
        elif mode == "numeric_ode":
            self._noise = kw["noise"]
            self._noise_jac = kw["noise_jac"]
            self.n_sub = kw.get("n_sub")
        else:
            raise ParameterError(f"unknown flow map mode {mode!r}")

    @classmethod
    def closed_form_linear(cls, mats, offsets=None) -> "FlowMap":
        mats = np.asarray(mats, dtype=float)
        if mats.ndim == 2:
            mats = mats[None]
        return cls("closed_form_linear", mats.shape[1], mats.shape[0], mats=mats, offsets=offsets)

    @classmethod
    def numeric_ode(cls, noise, noise_jac, dim: int, n_noise: int, n_sub: int | None = None) -> "FlowMap":
        """Flow of general fields; ``noise``/``noise_jac`` follow the SystemSpec layout."""
        return cls("numeric_ode", dim, n_noise, noise=noise, noise_jac=noise_jac, n_sub=n_sub)

    def _check_commuting(self):
        S, b = self.mats, self.offsets
        scale = max(1.0, float(np.max(np.abs(S), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
        for i in range(self.n_noise):
            for j in range(i + 1, self.n_noise):
                c1 = np.max(np.abs(S[i] @ S[j] - S[j] @ S[i]))
                c2 = np.max(np.abs(S[i] @ b[j] - S[j] @ b[i]))
                if max(c1, c2) > 1e-12 * scale**2:
                    raise HypothesisError(f"noise fields {i} and {j} do not commute")

    # fields ---------------------------------------------------------------

    def fields(self, x) -> np.ndarray:
        """``(..., d, m)`` array with columns ``sigma_i(x)``."""
        x = np.asarray(x, dtype=float)
        if self.mode == "closed_form_linear":
            return np.einsum("ikj,...j->...ki", self.mats, x) + self.offsets.T
        return self._noise(x)

    def fields_jac(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.mode == "closed_form_linear":
            return np.broadcast_to(np.transpose(self.mats, (1, 0, 2)), x.shape[:-1] + (self.dim, self.n_noise, self.dim))
        return self._noise_jac(x)

    # evaluation -----------------------------------------------------------

    def _augmented(self, z) -> np.ndarray:
        key = np.asarray(z, dtype=float).tobytes()
        cache = self.__dict__.setdefault("_expm_cache", {})
        E = cache.get(key)
        if E is None:
            d = self.dim
            aug = np.zeros((d + 1, d + 1))
            aug[:d, :d] = np.tensordot(z, self.mats, axes=(0, 0))
            aug[:d, d] = z @ self.offsets
            E = expm(aug)
            if len(cache) > 100_000:
                cache.clear()
            cache[key] = E
        return E

    def _substeps(self, z) -> int:
        if self.n_sub is not None:
            return int(self.n_sub)
        return max(8, int(math.ceil(np.linalg.norm(z) / 0.1)))

    def _rk4(self, z, x, with_jac: bool):
        n = self._substeps(z)
        h = 1.0 / n
        y = np.array(x, dtype=float, copy=True)
        J = np.broadcast_to(np.eye(self.dim), y.shape[:-1] + (self.dim, self.dim)).copy() if with_jac else None

        def f(y):
            return self._noise(y) @ z

        def g(y, J):
            return np.einsum("...kij,i->...kj", self._noise_jac(y), z) @ J

        for _ in range(n):
            if with_jac:
                k1, l1 = f(y), g(y, J)
                k2, l2 = f(y + 0.5 * h * k1), g(y + 0.5 * h * k1, J + 0.5 * h * l1)
                k3, l3 = f(y + 0.5 * h * k2), g(y + 0.5 * h * k2, J + 0.5 * h * l2)
                k4, l4 = f(y + h * k3), g(y + h * k3, J + h * l3)
                J = J + h / 6 * (l1 + 2 * l2 + 2 * l3 + l4)
            else:
                k1 = f(y)
                k2 = f(y + 0.5 * h * k1)
                k3 = f(y + 0.5 * h * k2)
                k4 = f(y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        return y, J

    def __call__(self, z, x) -> np.ndarray:
        return self.phi(z, x)

    def phi(self, z, x) -> np.ndarray:
        """``Phi(z, x)`` for one ``z`` of shape (m,) and ``x`` of shape (..., d)."""
        z = as_vector(z, self.n_noise, "z")
        x = np.asarray(x, dtype=float)
        if not np.any(z):
            return x.copy()
        if self.mode == "closed_form_linear":
            E = self._augmented(z)
            return x @ E[: self.dim, : self.dim].T + E[: self.dim, self.dim]
        return self._rk4(z, x, with_jac=False)[0]

    def jac(self, z, x) -> np.ndarray:
        """``d Phi / d x`` at ``(z, x)``; shape ``x.shape + (d,)``."""
        z = as_vector(z, self.n_noise, "z")
        x = np.asarray(x, dtype=float)
        if self.mode == "closed_form_linear":
            E = self._augmented(z)[: self.dim, : self.dim]
            return np.broadcast_to(E, x.shape[:-1] + (self.dim, self.dim)).copy()
        if not np.any(z):
            return np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim)).copy()
        return self._rk4(z, x, with_jac=True)[1]

    def inverse(self, z, y) -> np.ndarray:
        """``Phi(z, .)^{-1}(y) = Phi(-z, y)`` (group property of commuting flows)."""
        return self.phi(-np.asarray(z, dtype=float), y)


def pseudo_inverse_formula(mat, offset, z, x, rcond: float = 1e-12) -> np.ndarray:
    """Single-field affine flow written with a pseudo-inverse.

    ``exp(S z) x + S^+ (exp(S z) - I) beta``; exact when ``S`` is invertible,
    and missing the ``beta z`` contribution along the kernel of ``S``.
    Kept as a reference for comparison with :class:`FlowMap`.
    """
    S = np.atleast_2d(np.asarray(mat, dtype=float))
    E = expm(S * float(np.squeeze(z)))
    return np.asarray(x) @ E.T + np.linalg.pinv(S, rcond=rcond) @ (E - np.eye(len(S))) @ np.asarray(offset)


def lie_bracket_check(noise, noise_jac, sample_points) -> float:
    """Max over points and pairs of ``|grad s_j . s_i - grad s_i . s_j|``."""
    X = np.atleast_2d(np.asarray(sample_points, dtype=float))
    S = noise(X)  # (p, d, m)
    DS = noise_jac(X)  # (p, d, m, d)
    m = S.shape[-1]
    worst = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            br = np.einsum("pkl,pl->pk", DS[:, :, j, :], S[:, :, i]) - np.einsum(
                "pkl,pl->pk", DS[:, :, i, :], S[:, :, j]
            )
            worst = max(worst, float(np.max(np.linalg.norm(br, axis=-1))))
    return worst


# ---------------------------------------------------------------------------
# Marcus system and integrator


@dataclass
class MarcusSystem:
    """``dX = a(X) dt + sigma_i(X) <> dL^i`` with noise fields from ``flow_map``."""

    drift: Callable
    drift_jac: Callable
    flow_map: FlowMap
    commutativity_certified: bool = True
    name: str = "marcus"

    @property
    def dim(self) -> int:
        return self.flow_map.dim

    @property
    def n_noise(self) -> int:
        return self.flow_map.n_noise

    def noise(self, x):
        return self.flow_map.fields(x)

    def noise_jac(self, x):
        return self.flow_map.fields_jac(x)

    def certify(self, sample_points, tol: float = 1e-10) -> float:
        val = lie_bracket_check(self.noise, self.noise_jac, sample_points)
        self.commutativity_certified = val <= tol
        return val

    def stratonovich_correction(self, x, Q) -> np.ndarray:
        """``1/2 Q_ij (grad sigma_i) sigma_j``."""
        S = self.noise(x)
        DS = self.noise_jac(x)
        return 0.5 * np.einsum("ij,...kil,...lj->...k", Q, DS, S)


def integrate_marcus(
    system: MarcusSystem,
    path: PathLike,
    x0,
    grid: TimeGrid,
    *,
    backward: bool = False,
    on_divergence: str = "raise",
) -> FlowResult:
    """Euler scheme for the Ito form plus Stratonovich correction; jumps by ``Phi``.

    A jump of size ``u`` maps ``x`` to ``Phi(u, x)``.  Backward runs invert
    the jump exactly with ``Phi(-u, .)`` and the continuous part by a
    reversed explicit step.
    """
    x = np.asarray(x0, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x).reshape(-1, system.dim).copy()
    Q = path.triplet.Q
    has_gauss = bool(np.any(Q))
    c = grid.cells
    n = len(grid)
    fm = system.flow_map
    out = np.empty((n,) + X.shape)
    mask = np.zeros(X.shape[0], dtype=bool)

    def cont(X, k, sign):
        drift = system.drift(X)
        if has_gauss:
            drift = drift + system.stratonovich_correction(X, Q)
        return X + sign * (drift * c.dt[k] + np.einsum("pki,i->pk", system.noise(X), c.dLc[k]))

    if not backward:
        out[0] = X
        for k in range(n - 1):
            if c.has_pre[k]:
                X = fm.phi(c.pre[k], X)
            X = cont(X, k, 1.0)
            if c.has_post[k]:
                X = fm.phi(c.post[k], X)
            X = _check(X, c.t1[k], on_divergence, mask)
            out[k + 1] = X
    else:
        out[-1] = X
        for k in range(n - 2, -1, -1):
            if c.has_post[k]:
                X = fm.phi(-c.post[k], X)
            X = cont(X, k, -1.0)
            if c.has_pre[k]:
                X = fm.phi(-c.pre[k], X)
            X = _check(X, c.t0[k], on_divergence, mask)
            out[k] = X
    return FlowResult(grid, out[:, 0] if single else out, meta={"integrator": "euler-marcus", "diverged": int(mask.sum())})


@dataclass
class MarcusCocycle:
    """Marcus flow closure ``(path, x, t0, t1) -> phi_{t1-t0}(theta_{t0} omega, x)``."""

    system: MarcusSystem
    step: float | None = None
    on_divergence: str = "raise"

    def __call__(self, path, x, t0, t1):
        if t1 == t0:
            return np.array(x, dtype=float, copy=True)
        grid = make_grid(path, min(t0, t1), max(t0, t1), self.step)
        res = integrate_marcus(self.system, path, x, grid, backward=t1 < t0, on_divergence=self.on_divergence)
        return res.states[-1] if t1 > t0 else res.states[0]


# ---------------------------------------------------------------------------
# OU process


@dataclass
class OUState:
    """Stationary OU samples ``Z_t`` on the nodes of ``grid``."""

    mu: float
    tail_horizon: float
    grid: TimeGrid
    Z: np.ndarray
    start: float

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    def at(self, t: float) -> np.ndarray:
        return self.Z[self.grid.position(t)]

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"Z_{i + 1}" for i in range(self.Z.shape[1])])
        for t, z in zip(self.grid.nodes, self.Z):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in z])
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return text


def ou_path(path: PathLike, mu: float, grid: TimeGrid, tail_horizon: float) -> OUState:
    """Exact cell recursion ``Z <- exp(-mu dt) Z + int_cell exp(-mu (t1 - s)) dL_s``.

    The recursion starts from ``Z = 0`` at ``min(0, grid.t_min) - tail_horizon``
    and uses the same step as ``grid``.
    """
    mu = check_positive(mu, "mu")
    th = check_positive(tail_horizon, "tail_horizon")
    start_t = min(0.0, grid.t_min) - th
    start = path.nodes[path.node_index(start_t, snap=True)]
    ext = make_grid(path, start, grid.t_max, grid.base_step)
    cont, pre, post = ext.exp_weighted(mu, ref=None)
    incr = cont + pre + post
    decay = np.exp(-mu * ext.cells.dt)
    Z = np.zeros((len(ext), path.triplet.dim))
    for k in range(len(ext) - 1):
        Z[k + 1] = decay[k] * Z[k] + incr[k]
    pos = np.searchsorted(ext.index, grid.index)
    if np.any(ext.index[pos] != grid.index):
        raise ParameterError("grid nodes are not on the OU lattice")
    return OUState(mu, th, grid, Z[pos], float(start))


# ---------------------------------------------------------------------------
# cohomology


@dataclass
class MarcusField:
    """``H_t(x) = Phi(Z_t, x)`` evaluated lazily on the OU grid."""

    flow_map: FlowMap
    ou: OUState

    @property
    def grid(self) -> TimeGrid:
        return self.ou.grid

    def Z(self, t: float) -> np.ndarray:
        return self.ou.at(t)

    def H(self, t: float, x) -> np.ndarray:
        return self.flow_map.phi(self.Z(t), x)

    def H_inv(self, t: float, y) -> np.ndarray:
        return self.flow_map.inverse(self.Z(t), y)

    def dH_dx(self, t: float, x) -> np.ndarray:
        return self.flow_map.jac(self.Z(t), x)


def build_marcus_cohomology(flow_map: FlowMap, ou: OUState) -> MarcusField:
    if flow_map.n_noise != ou.Z.shape[1]:
        raise ParameterError("flow map and OU process have different noise dimensions")
    return MarcusField(flow_map, ou)


def transformed_drift_marcus(flow_map: FlowMap, system: MarcusSystem, Z_t, y, mu: float) -> np.ndarray:
    """``(dPhi/dx)^{-1} [a(Phi(Z_t, y)) + mu sigma_i(Phi(Z_t, y)) Z_t^i]``."""
    Z_t = np.asarray(Z_t, dtype=float)
    y = np.asarray(y, dtype=float)
    Hy = flow_map.phi(Z_t, y)
    rhs = system.drift(Hy) + mu * flow_map.fields(Hy) @ Z_t
    Jm = flow_map.jac(Z_t, y)
    try:
        return np.linalg.solve(Jm, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise HypothesisError("singular flow-map Jacobian") from exc


def marcus_rde_field(system: MarcusSystem, field_: MarcusField, mu: float) -> Callable:
    """Right side ``F(t, y)`` of the transformed random ODE."""
    fm = field_.flow_map

    def F(t, y):
        return transformed_drift_marcus(fm, system, field_.Z(t), y, mu)

    return F


class MarcusCohomology(BaseEstimator):
    """Estimator wrapper around the Marcus cohomology ``Phi(Z_t, .)``.

    ``fit(path)`` samples the OU process on ``[t_min, t_max]``; ``transform``
    and ``inverse_transform`` map points through ``H_t`` and its inverse.
    """

    def __init__(self, flow_map=None, mu: float = 1.0, tail_horizon: float = 20.0,
                 t_min: float = 0.0, t_max: float = 1.0, step: float | None = None):
        self.flow_map = flow_map
        self.mu = mu
        self.tail_horizon = tail_horizon
        self.t_min = t_min
        self.t_max = t_max
        self.step = step

    def fit(self, path, y=None):
        if self.flow_map is None:
            raise ParameterError("flow_map is required")
        grid = make_grid(path, self.t_min, self.t_max, self.step)
        self.ou_ = ou_path(path, self.mu, grid, self.tail_horizon)
        self.field_ = build_marcus_cohomology(self.flow_map, self.ou_)
        return self

    def transform(self, X, t: float = 0.0):
        check_is_fitted(self, "field_")
        return self.field_.H(t, as_points(X, self.flow_map.dim))

    def inverse_transform(self, X, t: float = 0.0):
        check_is_fitted(self, "field_")
        return self.field_.H_inv(t, as_points(X, self.flow_map.dim))


class MarcusRDECocycle:
    """Cocycle of the transformed random ODE, with OU samples cached per path."""

    def __init__(self, system: MarcusSystem, mu: float, tail_horizon: float, step: float | None = None,
                 on_divergence: str = "raise"):
        self.system = system
        self.mu = mu
        self.tail_horizon = tail_horizon
        self.step = step
        self.on_divergence = on_divergence
        self._cache: dict = {}

    def field_for(self, path, t_lo: float, t_hi: float) -> MarcusField:
        key = id(path)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is path:
            fld = hit[1]
            if fld.grid.t_min <= t_lo + 1e-12 and fld.grid.t_max >= t_hi - 1e-12:
                return fld
        grid = make_grid(path, t_lo, t_hi, self.step)
        fld = build_marcus_cohomology(self.system.flow_map, ou_path(path, self.mu, grid, self.tail_horizon))
        self._cache = {key: (path, fld)}
        return fld

    def prepare(self, path, t_lo: float, t_hi: float) -> MarcusField:
        """Precompute the OU samples for ``[t_lo, t_hi]``."""
        return self.field_for(path, t_lo, t_hi)

    def __call__(self, path, y, t0, t1):
        if t1 == t0:
            return np.array(y, dtype=float, copy=True)
        lo, hi = min(t0, t1), max(t0, t1)
        fld = self.field_for(path, lo, hi)
        grid = make_grid(path, lo, hi, self.step)
        F = marcus_rde_field(self.system, fld, self.mu)
        res = integrate_rde(F, path, y, grid, backward=t1 < t0, on_divergence=self.on_divergence)
        return res.states[-1] if t1 > t0 else res.states[0]


def verify_conjugacy_marcus(
    system: MarcusSystem, path: PathLike, x0, grid: TimeGrid, mu: float, tail_horizon: float
) -> ResidualSeries:
    """``r(t) = |phi_t(x0) - H_t(psi_t(H_0^{-1} x0))|`` on the grid nodes.

    ``phi`` is the Marcus flow, ``psi`` the transformed random ODE, and
    ``H_0(theta_t omega, .)`` is taken as ``H_t(omega, .)``.
    """
    x0 = as_vector(x0, system.dim, "x0")
    fld = build_marcus_cohomology(system.flow_map, ou_path(path, mu, grid, tail_horizon))
    phi = integrate_marcus(system, path, x0, grid)
    y0 = fld.H_inv(grid.t_min, x0)
    psi = integrate_rde(marcus_rde_field(system, fld, mu), path, y0, grid)
    mapped = np.array([fld.H(t, y) for t, y in zip(grid.nodes, psi.states)])
    r = np.linalg.norm(phi.states - mapped, axis=-1)
    return ResidualSeries(grid.nodes.copy(), r, meta={"phi": phi, "psi": psi, "field": fld})


# ---------------------------------------------------------------------------
# builtin examples


def linear_marcus_system(drift, drift_jac, mats, offsets=None, name: str = "linear-marcus") -> MarcusSystem:
    """Marcus system with commuting affine noise fields ``S_i x + beta_i``."""
    return MarcusSystem(drift, drift_jac, FlowMap.closed_form_linear(mats, offsets), name=name)


def scalar_cubic_marcus(sigma: float = 1.0) -> MarcusSystem:
    """``dX = -X^3 dt + sigma X <> dL`` in one dimension."""
    return linear_marcus_system(
        lambda x: -(x**3),
        lambda x: (-3.0 * x**2)[..., None],
        [[[sigma]]],
        name="scalar-cubic",
    )
