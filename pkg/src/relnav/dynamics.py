"""Coupled spacecraft/asteroid relative equations of motion, their noise
diffusion matrix, and the 12x12 linearization.

All quantities are expressed in the asteroid-fixed G frame unless noted:
state x = (Q, w, r, v) with Q = R_GS; inputs are the star-tracker inertial
attitude R_hat = R_IS, the rate-gyro body rate s_hat (S coords), the asteroid
external torque tau_hat (G coords, zero in every nominal scenario) and the
specific thrust f_hat (S coords).  Parameters carry the asteroid gravity
mu_a, solar gravity mu_sun, the COM offset c = r_AG^G, the principal-axis
alignment C = R_GA, the inertia A (A coords), with M = C A C^T cached.

Units are carried by the configuration (km/s/rad in orbital scenarios,
m/s/rad in lab-scale ones); the formulas are unit-agnostic.

The drift core is batched: Q stacked (B,3,3) and vectors (B,3) evaluate in
one call, which the integrator and the finite-difference factor Jacobians
rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, SingularRadiusError
from .liegroup import hat, is_rotation
from .stochastic import NoiseSpec

DEFAULT_EXCLUSION_RADIUS = 1e-6  # length units; fail loudly near the point-mass singularity


@dataclass(frozen=True)
class SrpModel:
    """Solar-radiation-pressure acceleration on the spacecraft.

    kind="none" disables it; kind="cannonball" gives an attitude-independent
    inverse-square law: coefficient * (d0_ref/||d||)^2 along +d (anti-sunward,
    d pointing Sun -> asteroid), with coefficient in accel units at the
    reference distance d0_ref.
    """

    kind: str = "none"
    coefficient: float = 0.0
    d0_ref: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "cannonball"):
            raise NumericalError(f"SrpModel: unknown kind {self.kind!r}")
        if self.coefficient < 0.0:
            raise NumericalError("SrpModel: coefficient must be nonnegative")


@dataclass(frozen=True)
class Ephemeris:
    """Sun-to-asteroid vector d(t) = r_AO^I: fixed, or linear in t."""

    kind: str = "fixed"
    d0: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    d_rate: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in ("fixed", "linear"):
            raise NumericalError(f"Ephemeris: unknown kind {self.kind!r}")
        object.__setattr__(self, "d0", np.asarray(self.d0, dtype=float).reshape(3))
        object.__setattr__(self, "d_rate", np.asarray(self.d_rate, dtype=float).reshape(3))


def ephemeris_eval(e: Ephemeris, t: float) -> np.ndarray:
    if not np.isfinite(t):
        raise NumericalError("ephemeris_eval: time must be finite")
    d = e.d0 if e.kind == "fixed" else e.d0 + e.d_rate * t
    if np.linalg.norm(d) <= 0.0:
        raise NumericalError("ephemeris_eval: zero-norm sun-to-asteroid vector")
    return d


def srp_accel(d, model: SrpModel) -> np.ndarray:
    d = np.asarray(d, dtype=float).reshape(3)
    if model.kind == "none":
        return np.zeros(3)
    nd = np.linalg.norm(d)
    if nd <= 0.0:
        raise NumericalError("srp_accel: zero-norm distance vector")
    return model.coefficient * (model.d0_ref / nd) ** 2 * (d / nd)


@dataclass(frozen=True)
class Input:
    """Measured input tuple u_hat = (R_hat, s_hat, tau_hat, f_hat)."""

    R_hat: np.ndarray = field(default_factory=lambda: np.eye(3))
    s_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tau_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    f_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R_hat", np.asarray(self.R_hat, dtype=float))
        for name in ("s_hat", "tau_hat", "f_hat"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))


@dataclass(frozen=True)
class DynamicsParams:
    """Immutable parameter bundle; M = C A C^T and its inverse are cached."""

    mu_a: float
    mu_sun: float = 0.0
    c: np.ndarray = field(default_factory=lambda: np.zeros(3))
    C: np.ndarray = field(default_factory=lambda: np.eye(3))
    A: np.ndarray = field(default_factory=lambda: np.eye(3))
    m_s: float = 1.0
    srp: SrpModel = field(default_factory=SrpModel)
    ephemeris: Ephemeris = field(default_factory=Ephemeris)
    r_min: float = DEFAULT_EXCLUSION_RADIUS

    def __post_init__(self):
        if not self.mu_a > 0.0:
            raise NumericalError("DynamicsParams: mu_a must be positive")
        if self.mu_sun < 0.0 or self.m_s <= 0.0:
            raise NumericalError("DynamicsParams: mu_sun >= 0 and m_s > 0 required")
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float).reshape(3))
        A = np.asarray(self.A, dtype=float)
        if np.linalg.norm(A - A.T) > 1e-9 * max(1.0, np.linalg.norm(A)):
            raise NumericalError("DynamicsParams: inertia A must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0.0:
            raise NumericalError("DynamicsParams: inertia A must be positive definite")
        object.__setattr__(self, "A", A)
        C = np.asarray(self.C, dtype=float)
        if not is_rotation(C):
            raise NumericalError("DynamicsParams: C must be a rotation")
        object.__setattr__(self, "C", C)
        M = C @ A @ C.T
        object.__setattr__(self, "_M", (M + M.T) / 2.0)
        object.__setattr__(self, "_M_inv", np.linalg.inv(self._M))

    @property
    def M(self) -> np.ndarray:
        return self._M

    @property
    def M_inv(self) -> np.ndarray:
        return self._M_inv


@dataclass(frozen=True)
class DriftValue:
    """Tangent-space drift: dQ = Q hat(f_Q) dt plus the three vector rates."""

    f_Q: np.ndarray
    f_w: np.ndarray
    f_r: np.ndarray
    f_v: np.ndarray

    def stack(self) -> np.ndarray:
        return np.concatenate([self.f_Q, self.f_w, self.f_r, self.f_v])


def _sun_terms(u: Input, p: DynamicsParams, t: float):
    """Common per-(u,p,t) quantities: d, mu_sun/||d||^3, and R_hat^T g(d)."""
    if p.mu_sun > 0.0 or p.srp.kind != "none":
        d = ephemeris_eval(p.ephemeris, t)
        nd3 = np.linalg.norm(d) ** 3
        sun_grav = p.mu_sun / nd3 if p.mu_sun > 0.0 else 0.0
        g = srp_accel(d, p.srp)
    else:
        sun_grav = 0.0
        g = np.zeros(3)
    g_body = u.R_hat.T @ g  # SRP acceleration expressed in the S frame
    return sun_grav, g_body


def _cross(a, b):
    """Row-wise cross product without np.cross's axis-juggling overhead."""
    out = np.empty(np.broadcast(a, b).shape)
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def drift_batch(Q, w, r, v, u: Input, p: DynamicsParams, t: float):
    """Vectorized drift over a batch: Q (B,3,3), w/r/v (B,3) -> four (B,3)."""
    Q = np.asarray(Q, dtype=float)
    w = np.asarray(w, dtype=float)
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)

    z = r - p.c
    nz = np.sqrt((z * z).sum(axis=-1))
    if np.any(nz <= p.r_min):
        raise SingularRadiusError(
            f"drift: |r - c| = {nz.min():.3e} inside exclusion radius {p.r_min:.3e}")

    sun_grav, g_body = _sun_terms(u, p, t)
    M, Minv = p.M, p.M_inv

    QT_w = np.einsum("...ji,...j->...i", Q, w)
    f_Q = u.s_hat - QT_w

    Mw = w @ M.T
    f_w = (u.tau_hat - _cross(w, Mw)) @ Minv.T

    f_r = v - _cross(w, r)

    gamma = (p.mu_a / nz**3 + sun_grav)[..., None]
    accel_body = g_body + u.f_hat
    c_b = np.broadcast_to(p.c, w.shape)
    f_v = (_cross(w, _cross(w, c_b))
           + _cross(f_w, c_b)
           - _cross(w, v)
           - gamma * z
           + np.einsum("...ij,j->...i", Q, accel_body))
    return f_Q, f_w, f_r, f_v


def eval_drift(x, u: Input, p: DynamicsParams, t: float = 0.0) -> DriftValue:
    """Drift of the relative equations of motion at a single state."""
    f_Q, f_w, f_r, f_v = drift_batch(x.Q, x.w, x.r, x.v, u, p, t)
    return DriftValue(f_Q=f_Q, f_w=f_w, f_r=f_r, f_v=f_v)


def eval_diffusion(x, u: Input, p: DynamicsParams, noise: NoiseSpec, t: float = 0.0) -> np.ndarray:
    """12x12 diffusion matrix L(x, u, p): row blocks (kappa, w, r, v) by noise
    columns (eps_R, eps_s, eps_tau, eps_f)."""
    _, g_body = _sun_terms(u, p, t)
    L = np.zeros((12, 12))
    L[0:3, 3:6] = noise.L_s
    L[3:6, 6:9] = p.M_inv @ noise.L_tau
    L[9:12, 0:3] = x.Q @ hat(g_body) @ noise.L_R
    L[9:12, 6:9] = -hat(p.c) @ p.M_inv @ noise.L_tau
    L[9:12, 9:12] = x.Q @ noise.L_f
    return L


def eval_jacobian(x, u: Input, p: DynamicsParams, t: float = 0.0) -> np.ndarray:
    """12x12 drift Jacobian in the (kappa, w, r, v) tangent layout.

    Rotation-block derivatives are taken against the right-multiplicative
    perturbation Q·exp(hat(kappa)), matching the numeric-difference
    convention used everywhere else in the toolkit.
    """
    z = x.r - p.c
    nz = np.linalg.norm(z)
    if nz <= p.r_min:
        raise SingularRadiusError(
            f"jacobian: |r - c| = {nz:.3e} inside exclusion radius {p.r_min:.3e}")
    sun_grav, g_body = _sun_terms(u, p, t)
    M, Minv = p.M, p.M_inv

    F = np.zeros((12, 12))
    QT_w = x.Q.T @ x.w
    F[0:3, 0:3] = -hat(QT_w)
    F[0:3, 3:6] = -x.Q.T

    dfw_dw = Minv @ (hat(M @ x.w) - hat(x.w) @ M)
    F[3:6, 3:6] = dfw_dw

    F[6:9, 3:6] = hat(x.r)
    F[6:9, 6:9] = -hat(x.w)
    F[6:9, 9:12] = np.eye(3)

    F[9:12, 0:3] = -x.Q @ hat(g_body + u.f_hat)
    F[9:12, 3:6] = (-hat(p.c) @ dfw_dw - hat(x.w) @ hat(p.c)
                    - hat(np.cross(x.w, p.c)) + hat(x.v))
    F[9:12, 6:9] = (p.mu_a / nz**5) * (3.0 * np.outer(z, z) - nz**2 * np.eye(3)) \
        - sun_grav * np.eye(3)
    F[9:12, 9:12] = -hat(x.w)
    return F
