"""Factor residuals and noise models: dynamics-prior (propagation) factors,
pinhole projection, pose/vector priors, and loop-closure relative poses.

Residuals are raw (unwhitened); every factor also supplies its covariance so
the solver can whiten with a Cholesky factor.  Jacobians default to central
finite differences on manifold tangent coordinates (rotation blocks perturb
through Q·exp(delta), everything else additively); analytic expressions are
provided for projection and vector priors and must agree with the numeric
path (enforced in tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .dynamics import DynamicsParams, eval_diffusion, eval_jacobian
from .errors import CheiralityError, NumericalError
from .integrator import (CG3, ButcherTable, PropagationResult, as_stream,
                         propagate_batch, propagate_interval)
from .liegroup import Pose, State, hat, se3_log, so3_log
from .stochastic import NoiseSpec, regularize_covariance, van_loan

FD_STEP = 1e-6
DEPTH_MIN = 1e-9
HUBER_DELTA = 1.345  # whitened units


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise NumericalError("CameraIntrinsics: focal lengths must be positive")
        if not (0.0 < self.cx < self.width and 0.0 < self.cy < self.height):
            raise NumericalError("CameraIntrinsics: principal point must lie inside the image")


@dataclass(frozen=True)
class PriorPoseMeasurement:
    """Absolute pose measurement with separate rotation/translation covariances."""

    T_meas: Pose
    Sigma_R_m: np.ndarray
    Sigma_r_m: np.ndarray

    def __post_init__(self):
        for name in ("Sigma_R_m", "Sigma_r_m"):
            S = np.asarray(getattr(self, name), dtype=float)
            if S.shape != (3, 3) or np.linalg.norm(S - S.T) > 1e-12 * max(1.0, np.linalg.norm(S)):
                raise NumericalError(f"{name}: expected symmetric 3x3")
            if np.linalg.eigvalsh(S).min() <= 0.0:
                raise NumericalError(f"{name}: expected positive definite")
            object.__setattr__(self, name, S)


# ---------------------------------------------------------------------------
# residual kernels
# ---------------------------------------------------------------------------

def prior_vec_residual(v, v_prior) -> np.ndarray:
    return np.asarray(v, dtype=float) - np.asarray(v_prior, dtype=float)


def prior_pose_residual(T: Pose, m: PriorPoseMeasurement, R_ctx):
    """6-vector [rotation; translation] log error and the composed covariance.

    Sigma_T = J_R Sigma_R J_R^T + J_r(R_ctx) Sigma_r J_r(R_ctx)^T with
    J_R = [I; 0] and J_r(R) = [0; R^T]; R_ctx is the measured relative
    rotation entering the translation channel.
    """
    res = se3_log(T.inverse().compose(m.T_meas))
    R_ctx = np.asarray(R_ctx, dtype=float)
    Sigma = np.zeros((6, 6))
    Sigma[:3, :3] = m.Sigma_R_m
    Sigma[3:, 3:] = R_ctx.T @ m.Sigma_r_m @ R_ctx
    return res, Sigma


def pinhole_project(r_C, K: CameraIntrinsics):
    """Project camera-frame points (...,3) to pixels (...,2); depth unchecked."""
    r_C = np.asarray(r_C, dtype=float)
    z = r_C[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * r_C[..., 0] / z + K.cx
        v = K.fy * r_C[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def projection_residual(T_GS: Pose, ell, y_meas, K: CameraIntrinsics,
                        T_SC: Pose | None = None, depth_min: float = DEPTH_MIN) -> np.ndarray:
    """Pixel residual y_meas - project(landmark) through T_CG = (T_GS T_SC)^-1."""
    T_SC = T_SC or Pose.identity()
    T_GC = T_GS.compose(T_SC)
    r_C = T_GC.rot.T @ (np.asarray(ell, dtype=float) - T_GC.trans)
    y_pred, z = pinhole_project(r_C, K)
    if z <= depth_min:
        raise CheiralityError(f"projection: depth {z:.3e} <= {depth_min:.3e}")
    return np.asarray(y_meas, dtype=float) - y_pred


def reldyn_interval_covariance(x_k: State, interval: "RelDynInterval") -> np.ndarray:
    """Process-noise covariance of the propagation residual, evaluated at the
    interval's start state (piecewise-constant F, L assumption)."""
    u0 = as_stream(interval.inputs).at(interval.t_k)
    F = eval_jacobian(x_k, u0, interval.params, interval.t_k)
    L = eval_diffusion(x_k, u0, interval.params, interval.noise, interval.t_k)
    dn = van_loan(F, L, interval.t_k1 - interval.t_k, method=interval.discretization)
    return regularize_covariance(dn.P, interval.cov_floor)


def reldyn_residual(x_k: State, x_k1: State, interval: "RelDynInterval"):
    """Propagation residual (12,) in (kappa, w, r, v) order, plus its
    process-noise covariance.

    Rotation block is log((Q_k^T Q_k1)^T Omega_prop); the sign convention is
    fixed as written (flipping it only negates the block)."""
    prop = propagate_interval(x_k, interval.inputs, interval.params,
                              interval.t_k, interval.t_k1, interval.n_sub,
                              interval.table)
    rot = so3_log((x_k.Q.T @ x_k1.Q).T @ prop.omega_prop)
    res = np.concatenate([rot,
                          x_k1.w - x_k.w - prop.dw,
                          x_k1.r - x_k.r - prop.dr,
                          x_k1.v - x_k.v - prop.dv])
    P = reldyn_interval_covariance(x_k, interval)
    return res, P


def loop_similarity(v_i, v_j) -> float:
    """Appearance similarity in [0, 1]: 1 - 0.5*|vi/|vi| - vj/|vj||, all in
    the L1 norm (bag-of-words convention).  Identical directions give 1,
    opposite or disjoint-support unit vectors give 0."""
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    n_i = np.abs(v_i).sum()
    n_j = np.abs(v_j).sum()
    if n_i <= 0.0 or n_j <= 0.0:
        raise NumericalError("loop_similarity: zero-norm descriptor")
    s = 1.0 - 0.5 * np.abs(v_i / n_i - v_j / n_j).sum()
    return float(min(max(s, 0.0), 1.0))


def huber_weight(norm_white: float, delta: float = HUBER_DELTA) -> float:
    """Scale on a whitened residual block implementing the Huber loss."""
    if norm_white <= delta or norm_white == 0.0:
        return 1.0
    return float(np.sqrt(delta * (2.0 * norm_white - delta)) / norm_white)


# ---------------------------------------------------------------------------
# factor classes
# ---------------------------------------------------------------------------

class Factor:
    """Tagged residual unit over an ordered tuple of variable keys."""

    kind: str = "base"

    def __init__(self, variables):
        self.variables = tuple(variables)

    def dim(self) -> int:
        raise NotImplementedError

    def residual(self, values) -> np.ndarray:
        raise NotImplementedError

    def covariance(self, values) -> np.ndarray:
        raise NotImplementedError

    def is_valid(self, values) -> bool:
        return True


class PriorPoseFactor(Factor):
    kind = "PriorPose"

    def __init__(self, key, measurement: PriorPoseMeasurement, R_ctx=None):
        super().__init__((key,))
        self.measurement = measurement
        self.R_ctx = (np.asarray(R_ctx, dtype=float) if R_ctx is not None
                      else measurement.T_meas.rot)
        _, self._Sigma = prior_pose_residual(measurement.T_meas, measurement, self.R_ctx)

    def dim(self):
        return 6

    def residual(self, values):
        res, _ = prior_pose_residual(values[self.variables[0]], self.measurement, self.R_ctx)
        return res

    def covariance(self, values):
        return self._Sigma


class PriorVec3Factor(Factor):
    kind = "PriorVec3"

    def __init__(self, key, v_prior, Sigma):
        super().__init__((key,))
        self.v_prior = np.asarray(v_prior, dtype=float).reshape(3)
        self.Sigma = np.asarray(Sigma, dtype=float).reshape(3, 3)

    def dim(self):
        return 3

    def residual(self, values):
        return prior_vec_residual(values[self.variables[0]], self.v_prior)

    def covariance(self, values):
        return self.Sigma

    def analytic_jacobian(self, values):
        return {self.variables[0]: np.eye(3)}


class ProjectionFactor(Factor):
    kind = "Projection"

    def __init__(self, pose_key, landmark_key, y_meas, K: CameraIntrinsics,
                 T_SC: Pose | None = None, sigma_px: float = 1.0,
                 robust: bool = False, depth_min: float = DEPTH_MIN):
        super().__init__((pose_key, landmark_key))
        self.y_meas = np.asarray(y_meas, dtype=float).reshape(2)
        self.K = K
        self.T_SC = T_SC or Pose.identity()
        if sigma_px <= 0.0:
            raise NumericalError("ProjectionFactor: sigma_px must be positive")
        self.sigma_px = float(sigma_px)
        self.robust = bool(robust)
        self.depth_min = float(depth_min)

    def dim(self):
        return 2

    def _camera_point(self, values):
        T_GC = values[self.variables[0]].compose(self.T_SC)
        return T_GC.rot.T @ (values[self.variables[1]] - T_GC.trans)

    def residual(self, values):
        return projection_residual(values[self.variables[0]], values[self.variables[1]],
                                   self.y_meas, self.K, self.T_SC, self.depth_min)

    def covariance(self, values):
        return self.sigma_px ** 2 * np.eye(2)

    def is_valid(self, values):
        return self._camera_point(values)[2] > self.depth_min

    def analytic_jacobian(self, values):
        """Closed-form pinhole derivative against [kappa; dt] and landmark."""
        T_GS = values[self.variables[0]]
        ell = values[self.variables[1]]
        R_SC, t_SC = self.T_SC.rot, self.T_SC.trans
        u_s = T_GS.rot.T @ (ell - T_GS.trans)          # landmark from S origin, S coords
        r_C = R_SC.T @ (u_s - t_SC)
        x, y, z = r_C
        if z <= self.depth_min:
            raise CheiralityError("projection jacobian: point behind camera")
        Ppx = np.array([[self.K.fx / z, 0.0, -self.K.fx * x / z**2],
                        [0.0, self.K.fy / z, -self.K.fy * y / z**2]])
        R_GC = T_GS.rot @ R_SC
        J_pose = np.hstack([R_SC.T @ hat(u_s), -R_GC.T])
        return {self.variables[0]: -Ppx @ J_pose,
                self.variables[1]: -Ppx @ R_GC.T}


@dataclass(frozen=True)
class RelDynInterval:
    """Propagation context between two keyframes: the measured input stream
    over [t_k, t_k1], the dynamics parameters, and the noise intensities."""

    t_k: float
    t_k1: float
    inputs: object
    params: DynamicsParams
    noise: NoiseSpec
    n_sub: int = 4
    table: ButcherTable = CG3
    discretization: str = "van_loan"
    cov_floor: float = 1e-12

    def __post_init__(self):
        if self.t_k1 <= self.t_k:
            raise NumericalError("RelDynInterval: t_k1 must exceed t_k")


class RelDynFactor(Factor):
    """Binary dynamics prior linking the (pose, angular velocity, velocity)
    triples of two consecutive keyframes; six variable keys total."""

    kind = "RelDyn"

    def __init__(self, keys, interval: RelDynInterval):
        if len(keys) != 6:
            raise NumericalError("RelDynFactor: expected (T,w,v) keys at both endpoints")
        super().__init__(keys)
        self.interval = interval

    def dim(self):
        return 12

    def states(self, values):
        kT0, kw0, kv0, kT1, kw1, kv1 = self.variables
        T0, T1 = values[kT0], values[kT1]
        x_k = State(Q=T0.rot, w=values[kw0], r=T0.trans, v=values[kv0])
        x_k1 = State(Q=T1.rot, w=values[kw1], r=T1.trans, v=values[kv1])
        return x_k, x_k1

    def residual(self, values):
        x_k, x_k1 = self.states(values)
        res, _ = reldyn_residual(x_k, x_k1, self.interval)
        return res

    def covariance(self, values):
        x_k, _ = self.states(values)
        return reldyn_interval_covariance(x_k, self.interval)

    def residual_and_covariance(self, values):
        x_k, x_k1 = self.states(values)
        return reldyn_residual(x_k, x_k1, self.interval)

    def linearize_fd(self, values, step: float = FD_STEP):
        """Central differences over the 24 endpoint tangent coordinates.

        The 24 perturbed start states and the unperturbed one propagate as a
        single batch; end-state perturbations reuse the center propagation
        (the residual depends on x_k1 only algebraically).  Arithmetic is
        identical to the generic per-coordinate path.
        """
        x_k, x_k1 = self.states(values)
        iv = self.interval

        def assemble(Qk, wk, rk, vk, omega, dw, dr, dv):
            rot = so3_log((Qk.T @ x_k1.Q).T @ omega)
            return np.concatenate([rot, x_k1.w - wk - dw, x_k1.r - rk - dr,
                                   x_k1.v - vk - dv])

        # batch: 24 perturbed start states (+/- per tangent dim) + the center
        Qs = np.empty((25, 3, 3))
        ws = np.empty((25, 3))
        rs = np.empty((25, 3))
        vs = np.empty((25, 3))
        for d in range(12):
            for s_i, sgn in enumerate((1.0, -1.0)):
                dx = np.zeros(12)
                dx[d] = sgn * step
                xp = x_k.retract(dx)
                b = 2 * d + s_i
                Qs[b], ws[b], rs[b], vs[b] = xp.Q, xp.w, xp.r, xp.v
        Qs[24], ws[24], rs[24], vs[24] = x_k.Q, x_k.w, x_k.r, x_k.v
        omegas, dws, drs, dvs = propagate_batch(Qs, ws, rs, vs, iv.inputs,
                                                iv.params, iv.t_k, iv.t_k1,
                                                iv.n_sub, iv.table)
        prop = PropagationResult(
            omega_prop=omegas[24], dw=dws[24], dr=drs[24], dv=dvs[24],
            x_end=State(Q=x_k.Q @ omegas[24], w=x_k.w + dws[24],
                        r=x_k.r + drs[24], v=x_k.v + dvs[24]),
            steps_used=iv.n_sub)
        res0 = assemble(x_k.Q, x_k.w, x_k.r, x_k.v,
                        prop.omega_prop, prop.dw, prop.dr, prop.dv)

        J_k = np.empty((12, 12))
        for d in range(12):
            rp = assemble(Qs[2 * d], ws[2 * d], rs[2 * d], vs[2 * d],
                          omegas[2 * d], dws[2 * d], drs[2 * d], dvs[2 * d])
            rm = assemble(Qs[2 * d + 1], ws[2 * d + 1], rs[2 * d + 1], vs[2 * d + 1],
                          omegas[2 * d + 1], dws[2 * d + 1], drs[2 * d + 1], dvs[2 * d + 1])
            J_k[:, d] = (rp - rm) / (2.0 * step)

        def assemble_end(xe):
            return np.concatenate([
                so3_log((x_k.Q.T @ xe.Q).T @ prop.omega_prop),
                xe.w - x_k.w - prop.dw,
                xe.r - x_k.r - prop.dr,
                xe.v - x_k.v - prop.dv])

        J_k1 = np.empty((12, 12))
        for d in range(12):
            dx = np.zeros(12)
            dx[d] = step
            rp = assemble_end(x_k1.retract(dx))
            rm = assemble_end(x_k1.retract(-dx))
            J_k1[:, d] = (rp - rm) / (2.0 * step)

        # reshuffle state-tangent columns (kappa, w, r, v) into per-key blocks
        def split(J):
            pose_cols = np.hstack([J[:, 0:3], J[:, 6:9]])
            return pose_cols, J[:, 3:6], J[:, 9:12]

        pk0, wk0, vk0 = split(J_k)
        pk1, wk1, vk1 = split(J_k1)
        kT0, kw0, kv0, kT1, kw1, kv1 = self.variables
        jac = {kT0: pk0, kw0: wk0, kv0: vk0, kT1: pk1, kw1: wk1, kv1: vk1}
        return res0, jac


class LoopClosureFactor(Factor):
    """Relative-pose constraint between two (non-adjacent) keyframe poses."""

    kind = "LoopClosure"

    def __init__(self, key_i, key_j, T_rel_meas: Pose, Sigma):
        super().__init__((key_i, key_j))
        self.T_rel_meas = T_rel_meas
        self.Sigma = np.asarray(Sigma, dtype=float).reshape(6, 6)

    def dim(self):
        return 6

    def residual(self, values):
        T_i = values[self.variables[0]]
        T_j = values[self.variables[1]]
        rel = T_i.inverse().compose(T_j)
        return se3_log(rel.inverse().compose(self.T_rel_meas))

    def covariance(self, values):
        return self.Sigma


FACTOR_ARITY = {"PriorPose": 1, "PriorVec3": 1, "Projection": 2,
                "RelDyn": 6, "LoopClosure": 2}


# ---------------------------------------------------------------------------
# generic numeric Jacobian
# ---------------------------------------------------------------------------

def _tangent_dim(value) -> int:
    return 6 if isinstance(value, Pose) else np.asarray(value).size


def _retract(value, delta):
    if isinstance(value, Pose):
        return value.retract(delta)
    return np.asarray(value, dtype=float) + delta


def numeric_jacobian(factor: Factor, values, step: float = FD_STEP):
    """Central-difference Jacobian blocks of the raw residual, keyed by
    variable; rows follow the factor's residual layout."""
    jac = {}
    for key in factor.variables:
        if key in jac:  # repeated key: accumulate through a combined pass
            continue
        base = values[key]
        dim = _tangent_dim(base)
        J = np.empty((factor.dim(), dim))
        for d in range(dim):
            delta = np.zeros(dim)
            delta[d] = step
            vp = dict(values)
            vp[key] = _retract(base, delta)
            rp = factor.residual(vp)
            vp[key] = _retract(base, -delta)
            rm = factor.residual(vp)
            J[:, d] = (rp - rm) / (2.0 * step)
        jac[key] = J
    return jac


def whiten(residual, Sigma):
    """chol(Sigma)^-1 residual; also returns the Cholesky factor."""
    Lc = np.linalg.cholesky(np.asarray(Sigma, dtype=float))
    return solve_triangular(Lc, np.asarray(residual, dtype=float), lower=True), Lc
