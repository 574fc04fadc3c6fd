"""Linearization at a fixed point, Lyapunov spectra and the linear conjugacy."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import HypothesisError, ParameterError, as_vector, check_positive
from .conjugacy_ito import CohomologyField, transformed_drift
from .flows import FlowResult, ResidualSeries, SystemSpec, integrate_ito, integrate_rde, linear_system, scalar_system
from .levy_paths import LevyTriplet, PathLike, TimeGrid, make_grid, sample_path

FIXED_POINT_TOL = 1e-10


@dataclass
class LinearSystem:
    """``dx = B0 x dt + B_i x dL^i``."""

    B0: np.ndarray
    Bs: np.ndarray  # (m, d, d)

    def __post_init__(self):
        self.B0 = np.atleast_2d(np.asarray(self.B0, dtype=float))
        d = self.B0.shape[0]
        self.Bs = np.asarray(self.Bs, dtype=float).reshape(-1, d, d)

    @property
    def dim(self) -> int:
        return self.B0.shape[0]

    @property
    def n_noise(self) -> int:
        return self.Bs.shape[0]

    def to_system(self) -> SystemSpec:
        return linear_system(self.B0, self.Bs, name="linearized")


def linearize(system: SystemSpec, analytic: bool = True, h: float = 1e-6) -> LinearSystem:
    """Jacobians of the drift and noise fields at the origin.

    Raises ``HypothesisError`` unless the origin is a common zero of all
    coefficients.
    """
    z = np.zeros(system.dim)
    if np.max(np.abs(system.drift(z))) > FIXED_POINT_TOL or np.max(np.abs(system.noise(z))) > FIXED_POINT_TOL:
        raise HypothesisError("the origin is not a fixed point of the coefficients")
    if analytic:
        B0 = np.asarray(system.drift_jac(z), dtype=float).reshape(system.dim, system.dim)
        NJ = np.asarray(system.noise_jac(z), dtype=float).reshape(system.dim, system.n_noise, system.dim)
    else:
        eye = np.eye(system.dim)
        B0 = np.stack([(system.drift(h * e) - system.drift(-h * e)) / (2 * h) for e in eye], axis=-1)
        NJ = np.stack([(system.noise(h * e) - system.noise(-h * e)) / (2 * h) for e in eye], axis=-1)
    return LinearSystem(B0, np.transpose(NJ, (1, 0, 2)))


def integrate_linear(linsys: LinearSystem, path: PathLike, x0, grid: TimeGrid, method: str = "auto") -> FlowResult:
    """Solve the linear equation on ``grid``.

    With ``method='auto'`` a one-dimensional system uses per-cell
    stochastic-exponential factors ``exp((B0 - B^2 q / 2) dt + B dLc) (1 + B u)``,
    exact for drift and jumps; ``'euler'`` (and any ``d > 1``) uses the
    jump-adapted Euler scheme.
    """
    if method not in ("auto", "euler"):
        raise ParameterError(f"unknown method {method!r}")
    if linsys.dim != 1 or method == "euler":
        return integrate_ito(linsys.to_system(), path, x0, grid)
    x = np.asarray(x0, dtype=float)
    c = grid.cells
    B0 = linsys.B0[0, 0]
    B = linsys.Bs[:, 0, 0]
    Q = path.triplet.Q
    logf = (B0 - 0.5 * B @ Q @ B) * c.dt + c.dLc @ B
    fac = np.exp(logf) * (1.0 + c.pre @ B) * (1.0 + c.post @ B)
    cum = np.concatenate([[1.0], np.cumprod(fac)])
    states = cum.reshape((-1,) + (1,) * x.ndim) * x[None]
    if x.ndim == 0:
        states = states[:, None]
    return FlowResult(grid, states, meta={"integrator": "stochastic-exponential"})


def _central_jacobian(fn: Callable, y0: np.ndarray, steps: np.ndarray) -> np.ndarray:
    cols = []
    for j, h in enumerate(steps):
        e = np.zeros_like(y0)
        e[j] = h
        cols.append((fn(y0 + e) - fn(y0 - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _lattice_steps(field_: CohomologyField) -> np.ndarray:
    steps = []
    for ax in field_.axes:
        if len(ax) < 2:
            raise ParameterError("the anchor lattice needs two values per axis")
        i = int(np.searchsorted(ax, 0.0))
        nb = [abs(ax[j] - 0.0) for j in (i - 1, i, i + 1) if 0 <= j < len(ax) and abs(ax[j]) > 0]
        steps.append(min(nb))
    # inside one lattice cell the interpolants are linear, so a small step
    # sees the same slopes while resolving nonlinear drifts accurately
    return 1e-3 * np.asarray(steps)


def linearized_rde_coefficient(field_: CohomologyField, linsys: LinearSystem, t: float) -> np.ndarray:
    """``f = (dH_t/dx)^{-1}(0) [B0 dH_t/dx(0) - dGamma_t/dx(0)]``.

    ``dGamma/dx`` is a central difference inside the lattice cells next to the origin.
    """
    z = np.zeros(linsys.dim)
    M = field_.dH_dx(t, z)
    dG = _central_jacobian(lambda y: field_.Gamma(t, y), z, _lattice_steps(field_))
    try:
        return np.linalg.solve(M, linsys.B0 @ M - dG)
    except np.linalg.LinAlgError as exc:
        raise ParameterError(f"singular dH/dx at the origin, t={t}") from exc


def rde_coefficient_by_differentiation(field_: CohomologyField, system: SystemSpec, t: float) -> np.ndarray:
    """Jacobian at the origin of the transformed drift, by central differences."""
    z = np.zeros(system.dim)
    return _central_jacobian(lambda y: transformed_drift(field_, system, t, y), z, _lattice_steps(field_))


def verify_step2_conjugacy(
    field_: CohomologyField, linsys: LinearSystem, path: PathLike, y0, grid: TimeGrid | None = None,
    method: str = "auto",
) -> ResidualSeries:
    """``r(t) = |M_t y_t - x_t|`` with ``M_t = dH_t/dx(0)``.

    ``y`` solves ``dy = f(theta_t omega) y dt`` (Heun) and ``x`` the linear
    SDE from ``x_0 = M_0 y_0``.
    """
    grid = field_.grid if grid is None else grid
    y0 = as_vector(y0, linsys.dim, "y0")
    z = np.zeros(linsys.dim)
    f_nodes = {float(t): linearized_rde_coefficient(field_, linsys, t) for t in grid.nodes}
    M_nodes = np.array([field_.dH_dx(t, z) for t in grid.nodes])

    def F(t, y):
        return y @ f_nodes[float(t)].T

    psi = integrate_rde(F, path, y0, grid)
    x = integrate_linear(linsys, path, M_nodes[0] @ y0, grid, method=method)
    mapped = np.einsum("nij,nj->ni", M_nodes, psi.states)
    r = np.linalg.norm(mapped - x.states, axis=-1)
    return ResidualSeries(grid.nodes.copy(), r, meta={"psi": psi, "x": x})


def composed_conjugacy(field_: CohomologyField, t: float, zeta: Callable | None = None) -> Callable:
    """The map ``x -> H_t(zeta_t((dH_t/dx)(0)^{-1} x))`` carrying the linear flow.

    ``zeta`` defaults to the identity; it is a stand-in for the local
    homeomorphism, which is not constructed here.
    """
    z = np.zeros(field_.system.dim)
    M = field_.dH_dx(t, z)
    zeta = (lambda y: y) if zeta is None else zeta

    def apply(x):
        y = np.linalg.solve(M, np.asarray(x, dtype=float).T).T
        return field_.H(t, zeta(y))

    return apply


# ---------------------------------------------------------------------------
# Lyapunov exponents


@dataclass
class LyapunovSpectrum:
    exponents: np.ndarray
    standard_errors: np.ndarray
    horizon: float
    n_samples: int
    samples: np.ndarray = field(repr=False, default=None)

    @property
    def hyperbolic(self) -> bool:
        return bool(np.min(np.abs(self.exponents)) > 3 * np.max(self.standard_errors))

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["exponent_rank", "value", "stderr"])
        for i, (v, s) in enumerate(zip(self.exponents, self.standard_errors)):
            w.writerow([i + 1, repr(float(v)), repr(float(s))])
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return text


def _growth_one_path(linsys: LinearSystem, path: PathLike, T: float, qr_period: int) -> np.ndarray:
    grid = make_grid(path, 0.0, T)
    c = grid.cells
    if linsys.dim == 1:
        B0 = linsys.B0[0, 0]
        B = linsys.Bs[:, 0, 0]
        Q = path.triplet.Q
        cont = (B0 - 0.5 * B @ Q @ B) * c.dt.sum() + c.dLc.sum(axis=0) @ B
        jumps = np.sum(np.log(np.abs(1.0 + c.pre @ B))) + np.sum(np.log(np.abs(1.0 + c.post @ B)))
        return np.array([(cont + jumps) / T])
    d = linsys.dim
    eye = np.eye(d)
    Mc = eye + linsys.B0[None] * c.dt[:, None, None] + np.einsum("ni,ijk->njk", c.dLc, linsys.Bs)
    Mpre = eye + np.einsum("ni,ijk->njk", c.pre, linsys.Bs)
    Mpost = eye + np.einsum("ni,ijk->njk", c.post, linsys.Bs)
    steps = Mpost @ Mc @ Mpre
    Qm = eye.copy()
    logs = np.zeros(d)
    for k in range(len(steps)):
        Qm = steps[k] @ Qm
        if (k + 1) % qr_period == 0 or k == len(steps) - 1:
            Qm, R = np.linalg.qr(Qm)
            sgn = np.sign(np.diag(R))
            sgn[sgn == 0] = 1.0
            Qm = Qm * sgn
            logs += np.log(np.abs(np.diag(R)))
    return np.sort(logs / T)[::-1]


def lyapunov_exponents(
    linsys: LinearSystem,
    triplet: LevyTriplet,
    T: float,
    dt: float,
    n_samples: int,
    seed: int,
    qr_period: int = 10,
    workers: int | None = None,
) -> LyapunovSpectrum:
    """Monte-Carlo Lyapunov spectrum of the linear flow over ``[0, T]``.

    Sample ``j`` uses the path seed spawned as child ``j`` of ``seed``, so
    the result does not depend on ``workers``.
    """
    check_positive(T, "T")
    check_positive(dt, "dt")
    children = np.random.SeedSequence(int(seed)).spawn(int(n_samples))
    seeds = [int(ch.generate_state(1, dtype=np.uint64)[0]) for ch in children]

    def one(s):
        path = sample_path(triplet, (0.0, T), dt, s)
        return _growth_one_path(linsys, path, T, qr_period)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, seeds))
    else:
        rows = [one(s) for s in seeds]
    samples = np.array(rows)
    se = samples.std(axis=0, ddof=1) / math.sqrt(len(samples)) if len(samples) > 1 else np.zeros(linsys.dim)
    return LyapunovSpectrum(samples.mean(axis=0), se, float(T), int(n_samples), samples)


class LyapunovSpectrumEstimator(BaseEstimator):
    """``fit(linsys)`` estimates the Lyapunov spectrum for the configured noise."""

    def __init__(self, triplet=None, T: float = 200.0, dt: float = 1e-2, n_samples: int = 100,
                 seed: int = 0, qr_period: int = 10, workers: int | None = None):
        self.triplet = triplet
        self.T = T
        self.dt = dt
        self.n_samples = n_samples
        self.seed = seed
        self.qr_period = qr_period
        self.workers = workers

    def fit(self, X, y=None):
        linsys = X if isinstance(X, LinearSystem) else linearize(X)
        spec = lyapunov_exponents(linsys, self.triplet, self.T, self.dt, self.n_samples, self.seed,
                                  self.qr_period, self.workers)
        self.spectrum_ = spec
        self.exponents_ = spec.exponents
        self.standard_errors_ = spec.standard_errors
        return self

    def score(self, X=None, y=None) -> float:
        check_is_fitted(self, "exponents_")
        return float(self.exponents_[0])


def scalar_lyapunov_oracle(beta: float, triplet: LevyTriplet, B: float = 1.0) -> float:
    """Exponent of ``dx = beta x dt + B x dL`` in one dimension."""
    q = float(triplet.Q[0, 0])
    jump = 0.0
    if triplet.jump_rate > 0:
        jump = triplet.jump_rate * float(triplet.jump_law.expect(lambda u: np.log(np.abs(1.0 + B * u[..., 0]))))
    return beta + B * float(triplet.effective_drift[0]) - 0.5 * B * B * q + jump


# ---------------------------------------------------------------------------
# scalar example


def scalar_example_systems(alpha: float, sigma: float, l: int):
    """Nonlinear ``(beta x - x^l) dt + x dL`` and its linearization, ``beta = alpha + sigma^2/2``."""
    if int(l) != l or l <= 1:
        raise ParameterError("l must be an integer > 1")
    l = int(l)
    beta = alpha + 0.5 * sigma**2
    nonlinear = scalar_system(
        lambda x: beta * x - x**l,
        lambda x: beta - l * x ** (l - 1),
        lambda x: x,
        lambda x: np.ones_like(x),
        name="scalar-hartman",
    )
    return nonlinear, linearize(nonlinear), beta


@dataclass
class ScalarSuiteReport:
    beta: float
    ladder: list
    ratios: list
    fixed_point_ok: bool
    monotone: bool
    lyapunov: float
    lyapunov_sign: int
    linear_diverges: bool
    notes: list = field(default_factory=list)

    def text(self) -> str:
        lines = [f"beta = {self.beta!r}", f"fixed point preserved: {self.fixed_point_ok}"]
        for x0, r in zip(self.ladder, self.ratios):
            lines.append(f"x0 = {x0:g}: sup |phi - phi0| / |x0| = {r:.6e}")
        lines.append(f"ratio decreasing down the ladder: {self.monotone}")
        lines.append(f"Lyapunov exponent of the linear flow: {self.lyapunov:.6f} (sign {self.lyapunov_sign:+d})")
        lines.append("local homeomorphism and stopping times: not constructed")
        lines += self.notes
        return "\n".join(lines) + "\n"


def scalar_example_suite(
    alpha: float, sigma: float, l: int, path: PathLike, grid: TimeGrid,
    ladder=(1e-1, 1e-2, 1e-3, 1e-4),
) -> ScalarSuiteReport:
    """Compare the nonlinear scalar flow with its linearization near 0."""
    nonlinear, linsys, beta = scalar_example_systems(alpha, sigma, l)
    lin_sys = linsys.to_system()
    zero_nl = integrate_ito(nonlinear, path, [0.0], grid).states
    zero_l = integrate_ito(lin_sys, path, [0.0], grid).states
    fixed_ok = bool(np.all(zero_nl == 0.0) and np.all(zero_l == 0.0))
    ratios = []
    for x0 in ladder:
        a = integrate_ito(nonlinear, path, [x0], grid, on_divergence="mask").states[:, 0]
        b = integrate_ito(lin_sys, path, [x0], grid, on_divergence="mask").states[:, 0]
        ratios.append(float(np.nanmax(np.abs(a - b))) / abs(x0))
    monotone = bool(np.all(np.diff(ratios) < 0))
    T = grid.t_max - grid.t_min
    lin_run = integrate_linear(linsys, path, [1.0], grid).states[:, 0]
    lyap = float(np.log(np.abs(lin_run[-1])) / T) if T > 0 else 0.0
    notes = []
    diverges = lyap > 0
    if diverges:
        notes.append("linear flow grows while the nonlinear flow saturates; outside the local regime")
    return ScalarSuiteReport(beta, list(ladder), ratios, fixed_ok, monotone, lyap, int(np.sign(lyap)), diverges, notes)
