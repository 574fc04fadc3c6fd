"""Pullback attractors, Lyapunov certificates and the Duffing-van der Pol case."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import sympy as sp
from scipy.spatial import cKDTree
from scipy.stats import norm, qmc
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import CertificateError, DivergenceError, ParameterError, as_points, check_positive
from .marcus import FlowMap, MarcusField, MarcusSystem

Flow = Callable  # (path, x, t0, t1) -> x


def semi_hausdorff(A, B) -> float:
    """``sup_{a in A} inf_{b in B} |a - b|`` over finite point sets."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        raise ParameterError("point sets must be non-empty")
    dist, _ = cKDTree(B).query(A, k=1)
    return float(np.max(dist))


def hausdorff(A, B) -> float:
    return max(semi_hausdorff(A, B), semi_hausdorff(B, A))


def ball_points(center, radius: float, n_points: int, seed: int = 0) -> np.ndarray:
    """Low-discrepancy points in a closed ball (scrambled Halton sequence)."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    d = len(center)
    u = qmc.Halton(d=d + 1, scramble=True, seed=seed).random(int(n_points))
    u = np.clip(u, 1e-12, 1 - 1e-12)
    if d == 1:
        return center + radius * (2 * u[:, :1] - 1)
    direction = norm.ppf(u[:, :d])
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * u[:, d : d + 1] ** (1.0 / d)
    return center + r * direction


def _run_cloud(cocycle: Flow, path, cloud: np.ndarray, t0: float, t1: float) -> np.ndarray:
    try:
        out = np.asarray(cocycle(path, cloud, t0, t1), dtype=float).reshape(cloud.shape)
    except DivergenceError:
        # the cocycle raises on blow-up; retry point by point to isolate the culprits
        out = np.full(cloud.shape, np.nan)
        for i, x in enumerate(cloud):
            try:
                out[i] = cocycle(path, x, t0, t1)
            except DivergenceError:
                pass
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} cloud points diverged and were dropped", RuntimeWarning, stacklevel=3)
    return out[~bad]


def pullback_cloud(cocycle: Flow, path, initial_cloud, t: float, base: float = 0.0) -> np.ndarray:
    """``phi_t(theta_{-t} omega_base, cloud)``: run from ``base - t`` to ``base``."""
    cloud = np.atleast_2d(np.asarray(initial_cloud, dtype=float))
    if t < 0:
        raise ParameterError("pullback time must be >= 0")
    if t == 0:
        return cloud.copy()
    return _run_cloud(cocycle, path, cloud, base - t, base)


@dataclass
class PullbackRun:
    """Pullback clouds for an increasing schedule of pullback times."""

    times: np.ndarray
    clouds: list
    diameters: np.ndarray
    successive_hausdorff: np.ndarray
    converged: bool
    tol: float
    base: float = 0.0

    @property
    def final_cloud(self) -> np.ndarray:
        return self.clouds[-1]

    def clouds_csv(self, dest=None) -> str:
        """``t_pullback, point_id, x_1..x_d`` rows."""
        d = self.clouds[0].shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_pullback", "point_id"] + [f"x_{i + 1}" for i in range(d)])
        for t, cl in zip(self.times, self.clouds):
            for i, x in enumerate(cl):
                w.writerow([repr(float(t)), i] + [repr(float(v)) for v in x])
        return _emit(buf.getvalue(), dest)

    def summary_csv(self, dest=None) -> str:
        """``t_pullback, diameter, hausdorff_step`` rows."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_pullback", "diameter", "hausdorff_step"])
        for t, dmt, hs in zip(self.times, self.diameters, self.successive_hausdorff):
            w.writerow([repr(float(t)), repr(float(dmt)), repr(float(hs))])
        return _emit(buf.getvalue(), dest)


def _emit(text: str, dest):
    if dest is not None:
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    return text


def estimate_attractor(
    cocycle: Flow,
    path,
    ball_radius: float,
    n_points: int,
    t_schedule: Sequence[float],
    tol: float = 1e-2,
    *,
    center=None,
    dim: int | None = None,
    base: float = 0.0,
    seed: int = 0,
    stop_early: bool = False,
) -> PullbackRun:
    """Pullback clouds of a ball for each time in ``t_schedule``.

    Convergence is declared at the first schedule step whose two-sided
    semi-Hausdorff distance to the previous cloud is below ``tol``; the
    first entry compares against the initial ball.  The diameter is
    ``max |x|`` over the cloud.
    """
    ts = np.asarray(t_schedule, dtype=float)
    if len(ts) == 0 or np.any(np.diff(ts) <= 0) or ts[0] < 0:
        raise ParameterError("t_schedule must be non-negative and increasing")
    if center is None:
        if dim is None:
            raise ParameterError("give center or dim")
        center = np.zeros(dim)
    init = ball_points(center, check_positive(ball_radius, "ball_radius"), n_points, seed)
    clouds, diam, steps = [], [], []
    prev = init
    converged = False
    for t in ts:
        cl = pullback_cloud(cocycle, path, init, float(t), base)
        clouds.append(cl)
        diam.append(float(np.max(np.linalg.norm(cl, axis=1))) if len(cl) else math.nan)
        steps.append(hausdorff(cl, prev) if len(cl) and len(prev) else math.inf)
        prev = cl
        if steps[-1] < tol:
            converged = True
            if stop_early:
                break
    return PullbackRun(ts[: len(clouds)], clouds, np.array(diam), np.array(steps), converged, tol, base)


def invariance_check(cocycle: Flow, path, cloud, t: float, target) -> float:
    """``dist(phi_t(omega, cloud), target)`` with ``target`` an estimate of ``A(theta_t omega)``."""
    if t == 0:
        return semi_hausdorff(cloud, target) if target is not None else 0.0
    moved = _run_cloud(cocycle, path, np.atleast_2d(np.asarray(cloud, dtype=float)), 0.0, t)
    return semi_hausdorff(moved, target)


def reestimate_at(cocycle: Flow, path, t: float, ball_radius: float, n_points: int, t_pullback: float,
                  dim: int, seed: int = 0) -> np.ndarray:
    """Attractor estimate at base point ``t`` from a single long pullback."""
    init = ball_points(np.zeros(dim), ball_radius, n_points, seed)
    return pullback_cloud(cocycle, path, init, t_pullback, base=t)


class PullbackAttractor(BaseEstimator):
    """``fit(path)`` runs the pullback schedule; ``cloud_`` is the attractor estimate."""

    def __init__(self, cocycle=None, dim: int = 2, ball_radius: float = 5.0, n_points: int = 256,
                 t_schedule=(1, 2, 4, 8, 16), tol: float = 1e-2, seed: int = 0):
        self.cocycle = cocycle
        self.dim = dim
        self.ball_radius = ball_radius
        self.n_points = n_points
        self.t_schedule = t_schedule
        self.tol = tol
        self.seed = seed

    def fit(self, path, y=None):
        run = estimate_attractor(self.cocycle, path, self.ball_radius, self.n_points, self.t_schedule,
                                 self.tol, dim=self.dim, seed=self.seed)
        self.run_ = run
        self.cloud_ = run.final_cloud
        self.converged_ = run.converged
        return self

    def score(self, X, y=None) -> float:
        """Negative semi-Hausdorff distance from ``X`` to the estimate."""
        check_is_fitted(self, "cloud_")
        return -semi_hausdorff(as_points(X, self.dim), self.cloud_)


def temperedness_check(times, diameters, betas=(0.1, 1.0)) -> dict:
    """Fit ``log d`` against ``t``; tempered for ``beta`` when the slope is below ``beta``."""
    t = np.asarray(times, dtype=float)
    d = np.asarray(diameters, dtype=float)
    if len(t) < 10:
        raise ParameterError("need at least 10 samples")
    slope = float(np.polyfit(t, np.log(np.maximum(d, 1e-300)), 1)[0])
    per = {float(b): bool(slope < b) for b in betas}
    return {"slope": slope, "per_beta": per, "passed": all(per.values())}


def map_attractor_through_cohomology(field_: MarcusField, cloud, t: float = 0.0) -> np.ndarray:
    """``{H_t(a) : a in cloud}``."""
    return field_.H(t, np.atleast_2d(np.asarray(cloud, dtype=float)))


def lipschitz_on_hull(field_: MarcusField, cloud, t: float = 0.0) -> float:
    """Max spectral norm of ``dH_t/dx`` over the cloud points."""
    J = field_.dH_dx(t, np.atleast_2d(np.asarray(cloud, dtype=float)))
    return float(np.max(np.linalg.norm(J, ord=2, axis=(-2, -1))))


def transported_invariance(sde_cocycle: Flow, rde_cocycle: Flow, field_: MarcusField, path, A0, A_t,
                           t: float, slack: float = 1e-2) -> dict:
    """Invariance residuals of ``A`` under the random ODE and of ``B = H_0(A)`` under the SDE.

    ``A_t`` is the attractor estimate at base point ``t``; the SDE target is
    ``H_t(A_t)``.  Passes when the SDE residual is at most the ODE residual
    plus ``slack``.
    """
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    A_t = np.atleast_2d(np.asarray(A_t, dtype=float))
    psi_res = invariance_check(rde_cocycle, path, A0, t, A_t)
    B0 = map_attractor_through_cohomology(field_, A0, 0.0)
    B_t = map_attractor_through_cohomology(field_, A_t, t)
    phi_res = invariance_check(sde_cocycle, path, B0, t, B_t)
    return {
        "psi_residual": psi_res,
        "phi_residual": phi_res,
        "lipschitz": lipschitz_on_hull(field_, A_t, t),
        "slack": slack,
        "passed": bool(phi_res <= psi_res + slack),
    }


# ---------------------------------------------------------------------------
# certificates


@dataclass
class LyapunovCertificate:
    """Lyapunov function data for the deterministic drift and the flow-map envelopes."""

    V: Callable
    grad_V: Callable
    kappa: Callable | None = None
    k1: Callable | None = None
    k2: Callable | None = None
    flow_map: FlowMap | None = None
    alpha: float | None = None
    eta: float | None = None

    def l_field(self, z, y) -> np.ndarray:
        """``(dPhi/dy)^{-1}(z, y) sigma_i(Phi(z, y)) z^i``."""
        fm = self.flow_map
        if fm is None:
            raise ParameterError("certificate has no flow map")
        y = np.atleast_2d(np.asarray(y, dtype=float))
        z = np.asarray(z, dtype=float)
        P = fm.phi(z, y)
        rhs = fm.fields(P) @ z
        return np.linalg.solve(fm.jac(z, y), rhs[..., None])[..., 0]


def annulus_points(radii: Sequence[float], n_angles: int, dim: int = 2, seed: int = 0) -> np.ndarray:
    """Points on spheres of the given radii, shape ``(len(radii), n_angles, dim)``."""
    if dim == 2:
        th = np.linspace(0.0, 2 * np.pi, int(n_angles), endpoint=False)
        unit = np.stack([np.cos(th), np.sin(th)], axis=-1)
    else:
        u = qmc.Halton(d=dim, scramble=True, seed=seed).random(int(n_angles))
        unit = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
        unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    return np.asarray(radii, dtype=float)[:, None, None] * unit[None]


def verify_lyapunov(cert: LyapunovCertificate, drift: Callable, radii=(5.0, 50.0), n_radii: int = 200,
                    n_angles: int = 720, dim: int = 2) -> dict:
    """Scan the annulus for ``alpha_hat`` and ``eta_hat``.

    ``alpha_hat = -max <grad log V, a>`` and ``eta_hat = -max <grad V, a> / kappa``;
    the per-radius maxima are returned so the trend can be inspected.
    """
    r = np.geomspace(radii[0], radii[1], int(n_radii))
    Y = annulus_points(r, n_angles, dim)
    V = cert.V(Y)
    if np.any(V <= 0):
        raise CertificateError("V is not positive on the annulus")
    inner = np.sum(cert.grad_V(Y) * drift(Y), axis=-1)
    log_rate = inner / V
    out = {
        "radii": r,
        "alpha_by_radius": -np.max(log_rate, axis=1),
        "alpha_hat": float(-np.max(log_rate)),
    }
    out["alpha_pass"] = out["alpha_hat"] > 0
    if cert.kappa is not None:
        ratio = inner / cert.kappa(Y)
        flat = int(np.argmax(ratio))
        out["eta_by_radius"] = -np.max(ratio, axis=1)
        out["eta_hat"] = float(-np.max(ratio))
        out["eta_argmax"] = Y.reshape(-1, dim)[flat]
        out["eta_pass"] = out["eta_hat"] > 0
    return out


def verify_c1_c2(cert: LyapunovCertificate, drift: Callable, radii=(5.0, 10.0, 20.0, 50.0), z_grid=None,
                 n_angles: int = 720, k2_scales=(1.0, 0.1, 0.01, 0.001)) -> dict:
    """Sup over the z-grid and each sphere of the two envelope expressions.

    ``c1[R] = sup |<grad log V(y), l(z, y) / k1(z)>|`` and
    ``c2[R] = sup <grad log V, a(y) - (dPhi/dy)^{-1} a(Phi(z, y))> / (|<grad log V, a>| k2(z))``.
    ``k2`` is also evaluated along ``scale * unit`` for each scale.
    """
    fm = cert.flow_map
    m = fm.n_noise
    if z_grid is None:
        mags = np.geomspace(1e-3, 10.0, 17)
        ang = np.linspace(0, 2 * np.pi, 24, endpoint=False) if m == 2 else None
        if m == 2:
            z_grid = np.concatenate([np.stack([s * np.cos(ang), s * np.sin(ang)], axis=-1) for s in mags])
        else:
            z_grid = np.concatenate([mags[:, None] * e for e in np.vstack([np.eye(m), -np.eye(m)])])
    z_grid = np.atleast_2d(np.asarray(z_grid, dtype=float))
    z_grid = z_grid[np.linalg.norm(z_grid, axis=1) > 0]
    k1v = np.array([cert.k1(z) for z in z_grid])
    if np.any(k1v <= 0):
        raise ParameterError("k1 must be positive away from z = 0")
    k2v = np.array([cert.k2(z) for z in z_grid])
    c1, c2 = {}, {}
    for R in radii:
        Y = annulus_points([R], n_angles, fm.dim)[0]
        gV = cert.grad_V(Y)
        V = cert.V(Y)
        glog = gV / V[:, None]
        base_inner = np.sum(glog * drift(Y), axis=-1)
        s1 = s2 = -np.inf
        for z, k1, k2 in zip(z_grid, k1v, k2v):
            lv = cert.l_field(z, Y)
            s1 = max(s1, float(np.max(np.abs(np.sum(glog * lv, axis=-1)) / k1)))
            P = fm.phi(z, Y)
            pulled = np.linalg.solve(fm.jac(z, Y), drift(P)[..., None])[..., 0]
            num = np.sum(glog * (drift(Y) - pulled), axis=-1)
            s2 = max(s2, float(np.max(num / (np.abs(base_inner) * k2))))
        c1[float(R)] = s1
        c2[float(R)] = s2
    unit = np.ones(m) / math.sqrt(m)
    k2_seq = [float(cert.k2(s * unit)) for s in k2_scales]
    c1_vals = [c1[float(R)] for R in radii]
    return {
        "c1": c1,
        "c2": c2,
        "c1_monotone": bool(np.all(np.diff(c1_vals) < 0)),
        "k2_sequence": k2_seq,
        "k2_to_zero": bool(np.all(np.diff(k2_seq) < 0) and k2_seq[-1] < 10 * k2_scales[-1] * max(1.0, k2_seq[0])),
    }


# ---------------------------------------------------------------------------
# Duffing-van der Pol


def duffing_drift(gamma1: float, gamma2: float) -> Callable:
    def a(y):
        y1, y2 = y[..., 0], y[..., 1]
        return np.stack([gamma2 * y1 - y1**3 / 3 + y2, gamma1 * y1 - y1**3], axis=-1)

    return a


def duffing_drift_jac(gamma1: float, gamma2: float) -> Callable:
    def J(y):
        y1 = y[..., 0]
        one = np.ones_like(y1)
        return np.stack(
            [np.stack([gamma2 - y1**2, one], axis=-1), np.stack([gamma1 - 3 * y1**2, 0 * one], axis=-1)], axis=-2
        )

    return J


def duffing_V(y):
    y1, y2 = y[..., 0], y[..., 1]
    return 7 / 24 * y1**4 + 0.25 * y1**2 + 0.25 * y2**2 + 0.5 * (y1 - y2) ** 2


def duffing_grad_V(y):
    y1, y2 = y[..., 0], y[..., 1]
    return np.stack([7 / 6 * y1**3 + 1.5 * y1 - y2, 1.5 * y2 - y1], axis=-1)


def duffing_kappa(y):
    return y[..., 0] ** 6 + y[..., 1] ** 2


def duffing_k2(gamma2: float, sigma1: float, sigma2: float) -> Callable:
    def k2(z):
        n = float(np.linalg.norm(z))
        s1, s2 = abs(sigma1), abs(sigma2)
        return (math.sqrt(2) + abs(gamma2) + s1 * n) * s1 * n + (1 + s1 * n) * s2 * n + s1 * n

    return k2


def duffing_van_der_pol_system(gamma1: float, gamma2: float, sigma1: float, sigma2: float,
                               k1_constant: float = 1.0):
    """Transformed Duffing-van der Pol system and its certificate.

    The state is ``(x1, x2 - gamma2 x1 + x1^3 / 3)``; noise fields are
    ``sigma_1 (0, y1)`` and the constant ``(0, sigma_2)``.
    """
    mats = np.array([[[0.0, 0.0], [sigma1, 0.0]], np.zeros((2, 2))])
    offsets = np.array([[0.0, 0.0], [0.0, sigma2]])
    fm = FlowMap.closed_form_linear(mats, offsets)
    system = MarcusSystem(duffing_drift(gamma1, gamma2), duffing_drift_jac(gamma1, gamma2), fm,
                          name="duffing-van-der-pol")
    cert = LyapunovCertificate(
        V=duffing_V,
        grad_V=duffing_grad_V,
        kappa=duffing_kappa,
        k1=lambda z: k1_constant * float(np.linalg.norm(z)),
        k2=duffing_k2(gamma2, sigma1, sigma2),
        flow_map=fm,
    )
    return system, cert


def to_transformed(x, gamma2: float) -> np.ndarray:
    """Original coordinates ``(x1, x2)`` to the transformed state."""
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 0], x[..., 1] - gamma2 * x[..., 0] + x[..., 0] ** 3 / 3], axis=-1)


def from_transformed(y, gamma2: float) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return np.stack([y[..., 0], y[..., 1] + gamma2 * y[..., 0] - y[..., 0] ** 3 / 3], axis=-1)


def duffing_symbolic_inner():
    """``<grad V, a>`` expanded symbolically, with ``V`` differentiated by sympy.

    Returns ``(expr, coeffs)`` where ``coeffs`` maps ``(i, j)`` to the
    coefficient of ``y1^i y2^j``.
    """
    y1, y2, g1, g2 = sp.symbols("y1 y2 gamma1 gamma2")
    V = sp.Rational(7, 24) * y1**4 + sp.Rational(1, 4) * y1**2 + sp.Rational(1, 4) * y2**2 + sp.Rational(1, 2) * (y1 - y2) ** 2
    a = sp.Matrix([g2 * y1 - y1**3 / 3 + y2, g1 * y1 - y1**3])
    grad = sp.Matrix([sp.diff(V, y1), sp.diff(V, y2)])
    expr = sp.expand((grad.T * a)[0])
    poly = sp.Poly(expr, y1, y2)
    coeffs = {mon: sp.simplify(c) for mon, c in zip(poly.monoms(), poly.coeffs())}
    return expr, coeffs, (y1, y2, g1, g2), grad
