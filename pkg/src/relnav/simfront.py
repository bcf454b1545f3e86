"""Synthetic world and front-end.

Replaces a pixel-level feature pipeline with a controlled equivalent:
procedural landmarks on a triaxial ellipsoid, a center-pointing reference
trajectory around the body, visibility-aware noisy pixel observations
(front-facing, illuminated, unoccluded, in-bounds), descriptor vectors for
loop-closure candidates, and an incremental session generator that emits
factors and warm-start guesses frame by frame.

Data association is ground-truth-id based with optional mismatch injection;
pixel outliers are injected at a configurable rate and carry a hidden
ground-truth flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import DynamicsParams, ephemeris_eval
from .errors import DegenerateGeometryError, InitializationError, NumericalError
from .factors import (CameraIntrinsics, LoopClosureFactor, PriorPoseFactor,
                      PriorPoseMeasurement, PriorVec3Factor, ProjectionFactor,
                      RelDynFactor, RelDynInterval, loop_similarity,
                      pinhole_project)
from .integrator import SampledInputs, default_substeps, propagate_interval
from .liegroup import Pose, State, ensure_rotation, hat, so3_exp
from .solver import Values, angvel_key, landmark_key, pose_key, vel_key
from .stochastic import NoiseSpec, sample_increments


@dataclass(frozen=True)
class Landmark:
    id: int
    pos_G: np.ndarray
    normal_G: np.ndarray


@dataclass(frozen=True)
class Observation:
    frame: int
    landmark: int
    y: np.ndarray
    is_outlier: bool  # ground-truth flag, hidden from the solver


@dataclass
class AsteroidConfig:
    semi_axes: np.ndarray          # (a, b, c) in scenario length units
    landmark_count: int = 200
    surface_noise: float = 0.0

    def __post_init__(self):
        self.semi_axes = np.asarray(self.semi_axes, dtype=float).reshape(3)
        if np.any(self.semi_axes <= 0.0):
            raise NumericalError("AsteroidConfig: semi-axes must be positive")


@dataclass
class Schedule:
    t0: float
    dt_frame: float
    n_frames: int

    def __post_init__(self):
        if self.dt_frame <= 0.0 or self.n_frames < 1:
            raise NumericalError("Schedule: dt_frame > 0 and n_frames >= 1 required")

    def times(self):
        return self.t0 + self.dt_frame * np.arange(self.n_frames)


@dataclass
class ObsNoise:
    sigma_px: float = 1.0
    outlier_rate: float = 0.0
    outlier_px: float = 30.0
    illumination_cos_min: float = 0.05
    mismatch_rate: float = 0.0
    reprojection_gate_sigma: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.outlier_rate < 1.0:
            raise NumericalError("ObsNoise: outlier_rate must be in [0, 1)")


@dataclass
class MeasNoise:
    """Initialization measurement sigmas (pose priors and kinematic priors)."""

    sigma_R_m: float = 1e-5
    sigma_r_m: float = 0.05
    sigma_w0: float = 1e-8
    sigma_v0: float = 1e-6


@dataclass
class LoopClosureConfig:
    enabled: bool = True
    eta: float = 0.6
    min_frame_gap: int = 10
    inlier_ratio: float = 0.7
    descriptor_bins: int = 64
    sigma_R: float = 8e-3
    sigma_r_rel: float = 8e-3     # translation sigma as a fraction of range
    min_shared: int = 8
    chi2_gate_per_dof: float = 16.0  # consistency gate against the current guesses


@dataclass
class SolveSettings:
    max_substep: float = 60.0
    min_substeps: int = 4
    noise_discretization: str = "van_loan"
    cov_floor: float = 1e-12
    strategy: str = "batch"        # batch | incremental
    robust_projection: bool = False
    fixed_lag: int | None = None
    max_iters: int = 100
    lambda0: float = 1e-4
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10


@dataclass
class Scenario:
    """Full synthetic-world description; built from a config file."""

    name: str
    params: DynamicsParams
    noise: NoiseSpec
    camera: CameraIntrinsics
    T_SC: Pose
    asteroid: AsteroidConfig
    schedule: Schedule
    obs_noise: ObsNoise
    meas: MeasNoise
    loop: LoopClosureConfig
    solve: SolveSettings
    r0_I: np.ndarray               # initial spacecraft position rel. asteroid COM, I coords
    v0_I: np.ndarray               # initial inertial relative velocity, I coords
    omega_A: np.ndarray            # asteroid body rate in principal axes (constant)
    R_IA0: np.ndarray              # asteroid attitude at t0
    seed: int = 0
    input_sample_dt: float | None = None
    inject_input_noise: bool = False

    def __post_init__(self):
        self.r0_I = np.asarray(self.r0_I, dtype=float).reshape(3)
        self.v0_I = np.asarray(self.v0_I, dtype=float).reshape(3)
        self.omega_A = np.asarray(self.omega_A, dtype=float).reshape(3)
        self.R_IA0 = ensure_rotation(self.R_IA0)

    def spin_axis_I(self) -> np.ndarray:
        w_I = self.R_IA0 @ self.omega_A
        n = np.linalg.norm(w_I)
        return w_I / n if n > 0 else np.array([0.0, 0.0, 1.0])

    def R_IG0(self) -> np.ndarray:
        return spin_pole_frame(self.spin_axis_I(), self.r0_I)

    def T_GA(self) -> Pose:
        R_AG = self.R_IA0.T @ self.R_IG0()
        return Pose(R_AG.T, self.params.c)


# ---------------------------------------------------------------------------
# world construction
# ---------------------------------------------------------------------------

def spin_pole_frame(g3_I, r_S0G_I) -> np.ndarray:
    """Asteroid-fixed frame from the spin pole and the initial relative
    position: g2 = normalize(g3 x r_hat), g1 = g2 x g3; returns R_IG0 with
    columns [g1, g2, g3]."""
    g3 = np.asarray(g3_I, dtype=float).reshape(3)
    g3 = g3 / np.linalg.norm(g3)
    r = np.asarray(r_S0G_I, dtype=float).reshape(3)
    nr = np.linalg.norm(r)
    if nr <= 0.0:
        raise DegenerateGeometryError("spin_pole_frame: zero-norm position")
    r_hat = r / nr
    g2 = np.cross(g3, r_hat)
    n2 = np.linalg.norm(g2)
    if n2 < 1e-6:
        raise DegenerateGeometryError(
            "spin_pole_frame: position coincides with the spin axis")
    g2 = g2 / n2
    g1 = np.cross(g2, g3)
    R = np.column_stack([g1, g2, g3])
    return ensure_rotation(R)


def generate_asteroid(cfg: AsteroidConfig, rng: np.random.Generator,
                      T_GA: Pose | None = None) -> list[Landmark]:
    """Area-uniform landmarks on the ellipsoid (rejection sampling on sphere
    directions), radially perturbed by surface_noise; normals along the
    outward ellipsoid gradient.  Positions/normals are returned in G."""
    if cfg.landmark_count < 8:
        raise NumericalError("generate_asteroid: need at least 8 landmarks")
    T_GA = T_GA or Pose.identity()
    a, b, c = cfg.semi_axes
    w_scale = max(b * c, a * c, a * b)
    pts = []
    while len(pts) < cfg.landmark_count:
        n = 2 * (cfg.landmark_count - len(pts)) + 16
        u = rng.standard_normal((n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        w = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2
                    + (a * b * u[:, 2]) ** 2) / w_scale
        keep = rng.uniform(size=n) < w
        pts.extend(u[keep])
    pts = np.asarray(pts[: cfg.landmark_count])
    p_A = pts * cfg.semi_axes
    if cfg.surface_noise > 0.0:
        radial = p_A / np.linalg.norm(p_A, axis=1, keepdims=True)
        p_A = p_A + radial * rng.uniform(-cfg.surface_noise, cfg.surface_noise,
                                         size=(cfg.landmark_count, 1))
    grad = pts / cfg.semi_axes  # outward level-set gradient at the surface point
    n_A = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    out = []
    for i in range(cfg.landmark_count):
        out.append(Landmark(id=i, pos_G=T_GA.apply(p_A[i]),
                            normal_G=T_GA.rot @ n_A[i]))
    return out


@dataclass
class ReferenceTrajectory:
    times: np.ndarray              # frame times (N,)
    states: list                   # truth State per frame (G coords)
    R_IS: np.ndarray               # (N,3,3) true spacecraft inertial attitude
    R_IG: np.ndarray               # (N,3,3)
    stream: SampledInputs          # dense measured-input stream
    T_GA: Pose
    R_IG0: np.ndarray
    sun_dir_I: np.ndarray          # unit vector from asteroid toward the Sun


def _orbit_accel(rho, t, p: DynamicsParams):
    """Inertial relative acceleration of the unforced orbit (thrust = 0)."""
    gamma = p.mu_a / np.linalg.norm(rho) ** 3
    g = np.zeros(3)
    if p.mu_sun > 0.0 or p.srp.kind != "none":
        d = ephemeris_eval(p.ephemeris, t)
        gamma = gamma + p.mu_sun / np.linalg.norm(d) ** 3
        from .dynamics import srp_accel
        g = srp_accel(d, p.srp)
    return -gamma * rho + g


def _center_pointing(rho, nu, acc):
    """Camera frame axes and inertial angular velocity from the orbit state:
    boresight e3 toward the body, e2 along the orbit normal."""
    nrho = np.linalg.norm(rho)
    e3 = -rho / nrho
    h = np.cross(rho, nu)
    nh = np.linalg.norm(h)
    if nh <= 0.0:
        raise DegenerateGeometryError("center pointing undefined: r parallel to v")
    e2 = h / nh
    e1 = np.cross(e2, e3)
    R_IE = np.column_stack([e1, e2, e3])

    de3 = -(np.eye(3) - np.outer(rho, rho) / nrho**2) @ nu / nrho
    dh = np.cross(rho, acc)
    de2 = (np.eye(3) - np.outer(e2, e2)) @ dh / nh
    de1 = np.cross(de2, e3) + np.cross(e2, de3)
    dR = np.column_stack([de1, de2, de3])
    Om = dR @ R_IE.T
    omega_I = np.array([Om[2, 1] - Om[1, 2], Om[0, 2] - Om[2, 0],
                        Om[1, 0] - Om[0, 1]]) / 2.0
    return R_IE, omega_I


def generate_reference_trajectory(s: Scenario, rng: np.random.Generator | None = None
                                  ) -> ReferenceTrajectory:
    """Truth states, attitudes, and the measured-input stream.

    The unforced orbit integrates through the geometric integrator (expressed
    as a zero-spin, zero-offset instance of the relative dynamics, which
    reduces exactly to the inertial two-body-plus-perturbations system); the
    attitude follows the center-pointing construction at every sample.
    """
    p = s.params
    times = s.schedule.times()
    dt_in = s.input_sample_dt or min(s.schedule.dt_frame / 4.0, 60.0)
    per_frame = max(int(np.ceil(s.schedule.dt_frame / dt_in)), 1)
    # every frame time is exactly an input-sample time (index k*per_frame)
    offsets = np.arange(per_frame) / per_frame
    sample_t = (times[:-1, None] + offsets[None, :] * s.schedule.dt_frame).ravel() \
        if len(times) > 1 else times[:1]
    sample_t = np.append(sample_t, times[-1])
    n_samples = sample_t.size

    # inertial orbit as a degenerate instance of the relative dynamics
    p_orbit = DynamicsParams(mu_a=p.mu_a, mu_sun=p.mu_sun, c=np.zeros(3),
                             C=np.eye(3), A=np.eye(3), m_s=p.m_s, srp=p.srp,
                             ephemeris=p.ephemeris, r_min=p.r_min)
    from .dynamics import Input
    u_zero = Input()

    omega_I_ast = s.R_IA0 @ s.omega_A          # constant: torque-free single-axis rotator
    R_IG0 = s.R_IG0()
    T_GA = s.T_GA()
    sun_d0 = ephemeris_eval(p.ephemeris, times[0])
    sun_dir_I = -sun_d0 / np.linalg.norm(sun_d0)

    # dense orbit states at the input sample times
    rho = s.r0_I.copy()
    nu = s.v0_I.copy()
    rho_s = np.empty((n_samples, 3))
    nu_s = np.empty((n_samples, 3))
    rho_s[0], nu_s[0] = rho, nu
    state = State(Q=np.eye(3), w=np.zeros(3), r=rho, v=nu)
    for k in range(1, n_samples):
        n_sub = default_substeps(sample_t[k - 1], sample_t[k],
                                 max_substep=s.solve.max_substep, min_substeps=1)
        state = propagate_interval(state, u_zero, p_orbit, sample_t[k - 1],
                                   sample_t[k], n_sub).x_end
        rho_s[k], nu_s[k] = state.r, state.v

    # attitudes and gyro stream at the sample times
    R_IS_s = np.empty((n_samples, 3, 3))
    s_gyro = np.empty((n_samples, 3))
    R_SC = s.T_SC.rot
    for k in range(n_samples):
        acc = _orbit_accel(rho_s[k], sample_t[k], p_orbit)
        R_IC, omega_I = _center_pointing(rho_s[k], nu_s[k], acc)
        R_IS = R_IC @ R_SC.T
        R_IS_s[k] = R_IS
        s_gyro[k] = R_IS.T @ omega_I

    f_zero = np.zeros((n_samples, 3))
    if s.inject_input_noise and rng is not None:
        # zero-order-held white noise with the spec'd intensity: nu = d_eps/dt
        dts = np.empty(n_samples)
        if n_samples > 1:
            dts[1:] = np.diff(sample_t)
            dts[0] = dts[1]
        else:
            dts[:] = 1.0
        for k in range(n_samples):
            dt_k = max(dts[k], 1e-12)
            de_R, de_s, _, de_f = sample_increments(s.noise, dt_k, rng)
            R_IS_s[k] = R_IS_s[k] @ so3_exp(de_R / dt_k)
            s_gyro[k] = s_gyro[k] + de_s / dt_k
            f_zero[k] = de_f / dt_k
    stream = SampledInputs(sample_t, R_IS_s, s_gyro, f_zero)

    # truth states at the frame times (exact G-frame conversion)
    w_G = R_IG0.T @ omega_I_ast
    states = []
    R_IS_f = np.empty((len(times), 3, 3))
    R_IG_f = np.empty((len(times), 3, 3))
    for k, t in enumerate(times):
        i = min(k * per_frame, n_samples - 1) if len(times) > 1 else 0
        R_IG = R_IG0 @ so3_exp(w_G * (t - times[0]))
        R_IG_f[k] = R_IG
        R_IS_f[k] = R_IS_s[i]
        Q = R_IG.T @ R_IS_s[i]
        r = R_IG.T @ rho_s[i] + p.c
        v = R_IG.T @ nu_s[i] + np.cross(w_G, p.c)
        states.append(State(Q=Q, w=w_G, r=r, v=v))
    return ReferenceTrajectory(times=times, states=states, R_IS=R_IS_f,
                               R_IG=R_IG_f, stream=stream, T_GA=T_GA,
                               R_IG0=R_IG0, sun_dir_I=sun_dir_I)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

def _ray_ellipsoid_entry(origin_A, target_A, semi_axes):
    """Fraction of the [origin, target] chord at which the ray first enters
    the ellipsoid, or None if it misses.  Coordinates in the body frame."""
    o = origin_A / semi_axes
    d = (target_A - origin_A) / semi_axes
    a = d @ d
    b = 2.0 * o @ d
    c = o @ o - 1.0
    disc = b * b - 4.0 * a * c
    if disc <= 0.0 or a == 0.0:
        return None
    sq = np.sqrt(disc)
    t1 = (-b - sq) / (2.0 * a)
    t2 = (-b + sq) / (2.0 * a)
    if t2 < 0.0:
        return None
    return t1


def observe(T_GS: Pose, landmarks, s: Scenario, sun_dir_G, rng: np.random.Generator,
            frame: int = 0) -> list[Observation]:
    """Visibility-gated noisy pixel observations for one pose.

    A landmark is emitted iff it has positive camera depth, projects in
    bounds, faces the camera, is illuminated (normal toward the Sun above
    the terminator threshold), and is not occluded by the ellipsoid body.
    """
    K = s.camera
    T_GC = T_GS.compose(s.T_SC)
    cam_G = T_GC.trans
    pos = np.stack([lm.pos_G for lm in landmarks])
    nrm = np.stack([lm.normal_G for lm in landmarks])
    ids = np.array([lm.id for lm in landmarks])

    r_C = np.einsum("ji,nj->ni", T_GC.rot, pos - cam_G)
    y_true, depth = pinhole_project(r_C, K)
    ok = depth > 1e-9
    ok &= (y_true[:, 0] >= 0.0) & (y_true[:, 0] < K.width) \
        & (y_true[:, 1] >= 0.0) & (y_true[:, 1] < K.height)
    ok &= np.einsum("ni,ni->n", nrm, cam_G - pos) > 0.0
    sun = np.asarray(sun_dir_G, dtype=float)
    sun = sun / np.linalg.norm(sun)
    ok &= nrm @ sun > s.obs_noise.illumination_cos_min

    # occlusion: body-frame ray test against the ellipsoid
    T_AG = s.T_GA().inverse()
    cam_A = T_AG.apply(cam_G)
    margin = max(5.0 * s.asteroid.surface_noise, 1e-7 * float(np.median(np.linalg.norm(pos - cam_G, axis=1))))
    for i in np.nonzero(ok)[0]:
        p_A = T_AG.apply(pos[i])
        entry = _ray_ellipsoid_entry(cam_A, p_A, s.asteroid.semi_axes)
        if entry is not None:
            dist = np.linalg.norm(pos[i] - cam_G)
            if entry * dist < dist - margin:
                ok[i] = False

    out = []
    for i in np.nonzero(ok)[0]:
        noisy = y_true[i] + rng.standard_normal(2) * s.obs_noise.sigma_px
        is_outlier = False
        if s.obs_noise.outlier_rate > 0.0 and rng.uniform() < s.obs_noise.outlier_rate:
            noisy = y_true[i] + rng.uniform(-s.obs_noise.outlier_px,
                                            s.obs_noise.outlier_px, size=2)
            is_outlier = True
        noisy = np.clip(noisy, [0.0, 0.0], [K.width - 1e-9, K.height - 1e-9])
        out.append(Observation(frame=frame, landmark=int(ids[i]), y=noisy,
                               is_outlier=is_outlier))
    return out


def inject_mismatches(observations: list[Observation], rate: float,
                      rng: np.random.Generator) -> list[Observation]:
    """Swap landmark ids of random observation pairs within a frame,
    reproducing incorrect data association at a controlled rate."""
    if rate <= 0.0 or len(observations) < 2:
        return observations
    obs = list(observations)
    n = len(obs)
    for i in range(n):
        if rng.uniform() < rate:
            j = int(rng.integers(0, n - 1))
            if j >= i:
                j += 1
            oi, oj = obs[i], obs[j]
            obs[i] = Observation(oi.frame, oj.landmark, oi.y, True)
            obs[j] = Observation(oj.frame, oi.landmark, oj.y, True)
    return obs


def frame_descriptor(observations, n_bins: int) -> np.ndarray:
    """Bag-of-words-style appearance vector: L1-normalized histogram of the
    visible landmark ids hashed into n_bins."""
    v = np.zeros(n_bins)
    for o in observations:
        v[(o.landmark * 2654435761) % n_bins] += 1.0
    total = v.sum()
    if total > 0:
        v /= total
    return v


# ---------------------------------------------------------------------------
# two-view geometry
# ---------------------------------------------------------------------------

def _normalized_coords(y, K: CameraIntrinsics):
    y = np.asarray(y, dtype=float)
    return np.stack([(y[..., 0] - K.cx) / K.fx, (y[..., 1] - K.cy) / K.fy,
                     np.ones(y.shape[:-1])], axis=-1)


def _hartley_normalization(x):
    """Zero-mean, sqrt(2)-RMS conditioning transform on homogeneous plane
    coordinates; returns (T, T @ x rows)."""
    mean = x[:, :2].mean(axis=0)
    rms = np.sqrt(((x[:, :2] - mean) ** 2).sum(axis=1).mean())
    s = np.sqrt(2.0) / max(rms, 1e-12)
    T = np.array([[s, 0.0, -s * mean[0]],
                  [0.0, s, -s * mean[1]],
                  [0.0, 0.0, 1.0]])
    return T, x @ T.T


def estimate_essential(corr_a, corr_b, K: CameraIntrinsics) -> np.ndarray:
    """Least-squares essential matrix from >=8 correspondences, projected to
    the essential manifold; x_b^T E x_a = 0.  Coordinates are conditioned
    with the standard zero-mean/sqrt(2) normalization before the linear
    solve."""
    xa = _normalized_coords(corr_a, K)
    xb = _normalized_coords(corr_b, K)
    Ta, xan = _hartley_normalization(xa)
    Tb, xbn = _hartley_normalization(xb)
    A = np.einsum("ni,nj->nij", xbn, xan).reshape(len(xa), 9)
    _, sv, vt = np.linalg.svd(A)
    if len(sv) < 8 or sv[7] < 1e-10 * sv[0]:
        raise DegenerateGeometryError("eight-point: rank-deficient correspondences")
    En = vt[-1].reshape(3, 3)
    E = Tb.T @ En @ Ta
    u, se, vt2 = np.linalg.svd(E)
    sm = (se[0] + se[1]) / 2.0
    return u @ np.diag([sm, sm, 0.0]) @ vt2


def _triangulate_two_view(x_a, x_b, R, t):
    """Depths (lam_a, lam_b) minimizing the midpoint criterion for rays
    x_a (cam a) and x_b (cam b) with p_b = R p_a + t."""
    da = R @ x_a
    db = x_b
    A = np.column_stack([da, -db])
    rhs = -t
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return sol[0], sol[1]


def _sampson_residuals(xa, xb, R, t):
    E = hat(t) @ R
    Exa = xa @ E.T
    Etxb = xb @ E
    num = np.einsum("ni,ni->n", xb, Exa)
    den = np.sqrt(Exa[:, 0] ** 2 + Exa[:, 1] ** 2 + Etxb[:, 0] ** 2 + Etxb[:, 1] ** 2)
    return num / np.maximum(den, 1e-300)


def refine_relative_pose(xa, xb, R0, t0, iters: int = 20):
    """Gauss-Newton refinement of (R, t-direction) on the Sampson error.

    The linear eight-point estimate degrades when the shared points are
    nearly coplanar (small surface patches); this recovers noise-limited
    accuracy.  t stays on the unit sphere (2-dof basis orthogonal to t).
    """
    R = R0.copy()
    t = t0 / np.linalg.norm(t0)
    h = 1e-7
    for _ in range(iters):
        # orthonormal basis of the tangent plane at t
        b1 = np.cross(t, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(b1) < 1e-6:
            b1 = np.cross(t, np.array([0.0, 1.0, 0.0]))
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(t, b1)
        res = _sampson_residuals(xa, xb, R, t)
        J = np.empty((len(res), 5))
        for d in range(3):
            e = np.zeros(3)
            e[d] = h
            J[:, d] = (_sampson_residuals(xa, xb, R @ so3_exp(e), t)
                       - _sampson_residuals(xa, xb, R @ so3_exp(-e), t)) / (2 * h)
        for d, b in enumerate((b1, b2)):
            tp = t + h * b
            tm = t - h * b
            J[:, 3 + d] = (_sampson_residuals(xa, xb, R, tp / np.linalg.norm(tp))
                           - _sampson_residuals(xa, xb, R, tm / np.linalg.norm(tm))) / (2 * h)
        H = J.T @ J + 1e-12 * np.eye(5)
        try:
            delta = np.linalg.solve(H, -J.T @ res)
        except np.linalg.LinAlgError:
            break
        R = R @ so3_exp(delta[:3])
        t = t + delta[3] * b1 + delta[4] * b2
        t /= np.linalg.norm(t)
        if np.linalg.norm(delta) < 1e-12:
            break
    return R, t


def eight_point_init(corr, K: CameraIntrinsics):
    """Relative camera pose from 2D-2D correspondences.

    corr: sequence of (y_a, y_b) pixel pairs (same point seen in camera a
    then camera b).  Returns dict with R_guess (R such that p_b = R p_a + t)
    and t_dir (unit translation, scale unobservable).  Raises on fewer than
    8 pairs, rank-deficient configurations, and translation-free geometry.
    """
    if len(corr) < 8:
        raise DegenerateGeometryError("eight-point: need at least 8 correspondences")
    ya = np.stack([np.asarray(c[0], dtype=float) for c in corr])
    yb = np.stack([np.asarray(c[1], dtype=float) for c in corr])
    E = estimate_essential(ya, yb, K)
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    xa = _normalized_coords(ya, K)
    xb = _normalized_coords(yb, K)
    best = None
    for R in (u @ W @ vt, u @ W.T @ vt):
        for t in (u[:, 2], -u[:, 2]):
            npos = 0
            for i in range(len(xa)):
                la, lb = _triangulate_two_view(xa[i], xb[i], R, t)
                if la > 0 and lb > 0:
                    npos += 1
            if best is None or npos > best[0]:
                best = (npos, R, t)
    npos, R, t = best
    if npos < max(2, int(0.5 * len(xa))):
        raise DegenerateGeometryError("eight-point: no cheirality-consistent decomposition")
    R, t = refine_relative_pose(xa, xb, R, t)
    # translation observability: parallax of the triangulated rays
    parallax = []
    for i in range(min(len(xa), 32)):
        da = R @ xa[i] / np.linalg.norm(xa[i])
        db = xb[i] / np.linalg.norm(xb[i])
        parallax.append(np.arccos(np.clip(abs(da @ db) / np.linalg.norm(da) / np.linalg.norm(db), -1, 1)))
    if np.median(parallax) < 1e-8:
        raise DegenerateGeometryError("eight-point: translation unobservable (pure rotation)")
    return {"R_guess": R, "t_dir": t / np.linalg.norm(t)}


def triangulate(T_GC_a: Pose, T_GC_b: Pose, y_a, y_b, K: CameraIntrinsics) -> np.ndarray:
    """Midpoint of the common perpendicular of the two back-projected rays,
    in G coordinates.  Rays must be non-parallel and depths positive."""
    xa = _normalized_coords(np.asarray(y_a, dtype=float), K)
    xb = _normalized_coords(np.asarray(y_b, dtype=float), K)
    da = T_GC_a.rot @ xa
    db = T_GC_b.rot @ xb
    da = da / np.linalg.norm(da)
    db = db / np.linalg.norm(db)
    cross = np.cross(da, db)
    if np.linalg.norm(cross) < 1e-6:
        raise DegenerateGeometryError("triangulate: parallel rays")
    oa, ob = T_GC_a.trans, T_GC_b.trans
    A = np.column_stack([da, -db])
    sol, *_ = np.linalg.lstsq(A, ob - oa, rcond=None)
    la, lb = sol
    if la <= 0.0 or lb <= 0.0:
        raise DegenerateGeometryError("triangulate: negative depth")
    pa = oa + la * da
    pb = ob + lb * db
    return (pa + pb) / 2.0


# ---------------------------------------------------------------------------
# world + session
# ---------------------------------------------------------------------------

@dataclass
class PriorDraws:
    """Measured initialization quantities (drawn once per world)."""

    T0_meas: Pose
    T1_meas: Pose
    w0_mean: np.ndarray
    v0_mean: np.ndarray


@dataclass
class World:
    scenario: Scenario
    landmarks: list
    ref: ReferenceTrajectory
    observations: list             # list per frame
    descriptors: np.ndarray        # (n_frames, bins)
    priors: PriorDraws


def build_world(s: Scenario) -> World:
    """Deterministic world: landmarks, truth, inputs, observations, priors."""
    ss = np.random.SeedSequence(s.seed)
    rng_ast, rng_traj, rng_obs, rng_meas, rng_assoc = \
        [np.random.default_rng(c) for c in ss.spawn(5)]

    ref = generate_reference_trajectory(s, rng_traj)
    landmarks = generate_asteroid(s.asteroid, rng_ast, ref.T_GA)

    observations = []
    descriptors = np.zeros((s.schedule.n_frames, s.loop.descriptor_bins))
    for k in range(s.schedule.n_frames):
        xk = ref.states[k]
        T_GS = Pose(xk.Q, xk.r)
        sun_dir_G = ref.R_IG[k].T @ ref.sun_dir_I
        obs = observe(T_GS, landmarks, s, sun_dir_G, rng_obs, frame=k)
        obs = inject_mismatches(obs, s.obs_noise.mismatch_rate, rng_assoc)
        observations.append(obs)
        descriptors[k] = frame_descriptor(obs, s.loop.descriptor_bins)

    m = s.meas
    draws = []
    for k in (0, 1 if s.schedule.n_frames > 1 else 0):
        xk = ref.states[k]
        R_IG = ref.R_IG[k]
        R_IS_m = ref.R_IS[k] @ so3_exp(rng_meas.standard_normal(3) * m.sigma_R_m)
        r_I_m = R_IG @ xk.r + rng_meas.standard_normal(3) * m.sigma_r_m
        draws.append(Pose(R_IG.T @ R_IS_m, R_IG.T @ r_I_m))
    w0_mean = ref.states[0].w + rng_meas.standard_normal(3) * m.sigma_w0
    v0_mean = ref.states[0].v + rng_meas.standard_normal(3) * m.sigma_v0
    priors = PriorDraws(T0_meas=draws[0], T1_meas=draws[-1],
                        w0_mean=w0_mean, v0_mean=v0_mean)
    return World(scenario=s, landmarks=landmarks, ref=ref,
                 observations=observations, descriptors=descriptors, priors=priors)


@dataclass
class FrameBundle:
    """One front-end step: everything the back-end needs for this frame."""

    frame: int
    t: float
    new_factors: list
    new_values: Values
    observations: list
    guess_state: State
    loop_pairs: list = field(default_factory=list)


def _loop_closure_factor(world: World, i: int, j: int, guess_values: Values,
                         landmark_ids_in_map: set):
    """Geometric check + relative-pose measurement between frames i and j."""
    s = world.scenario
    obs_i = {o.landmark: o.y for o in world.observations[i]}
    obs_j = {o.landmark: o.y for o in world.observations[j]}
    shared = sorted((set(obs_i) & set(obs_j)) & landmark_ids_in_map)
    if len(shared) < s.loop.min_shared:
        return None
    ya = np.stack([obs_i[l] for l in shared])
    yb = np.stack([obs_j[l] for l in shared])
    try:
        two_view = eight_point_init(list(zip(ya, yb)), s.camera)
    except DegenerateGeometryError:
        return None
    R, t_dir = two_view["R_guess"], two_view["t_dir"]
    # geometric check: Sampson residuals of the induced essential constraint
    xa = _normalized_coords(ya, s.camera)
    xb = _normalized_coords(yb, s.camera)
    resid = np.abs(_sampson_residuals(xa, xb, R, t_dir))
    thresh = 3.0 * s.obs_noise.sigma_px / s.camera.fx
    if np.mean(resid < thresh) < s.loop.inlier_ratio:
        return None
    # metric scale: depths of the shared mapped landmarks seen from camera i
    T_GCi = guess_values[pose_key(i)].compose(s.T_SC)
    lam_tv, lam_map = [], []
    xa_n = _normalized_coords(ya, s.camera)
    xb_n = _normalized_coords(yb, s.camera)
    for n, lid in enumerate(shared):
        la, lb = _triangulate_two_view(xa_n[n], xb_n[n], R, t_dir)
        if la > 0:
            p_Ci = T_GCi.rot.T @ (guess_values[landmark_key(lid)] - T_GCi.trans)
            if p_Ci[2] > 0:
                lam_tv.append(la * xa_n[n][2])
                lam_map.append(p_Ci[2])
    if len(lam_tv) < 3:
        return None
    scale = float(np.median(np.asarray(lam_map) / np.asarray(lam_tv)))
    if scale <= 0:
        return None
    T_CjCi = Pose(R, t_dir * scale)
    T_meas = s.T_SC.compose(T_CjCi.inverse()).compose(s.T_SC.inverse())
    rng_dist = float(np.median(lam_map))
    Sigma = np.zeros((6, 6))
    Sigma[:3, :3] = s.loop.sigma_R**2 * np.eye(3)
    Sigma[3:, 3:] = (s.loop.sigma_r_rel * rng_dist)**2 * np.eye(3)
    return LoopClosureFactor(pose_key(i), pose_key(j), T_meas, Sigma)


def _loop_factor_consistent(lf, guess_values: Values, gate_per_dof: float) -> bool:
    """Chi-square-style sanity gate: the measured relative pose must agree
    with the current guesses to within the factor's own noise model."""
    from .factors import whiten
    vals = {key: guess_values[key] for key in lf.variables}
    res = lf.residual(vals)
    rw, _ = whiten(res, lf.covariance(vals))
    return bool(rw @ rw < gate_per_dof * res.size)


def build_session(world: World, include_reldyn: bool = True):
    """Incremental front-end generator.

    Yields a FrameBundle per frame; the driver may `.send()` back a Values
    with the latest solved estimates, which re-anchors the motion-model
    prediction for subsequent guesses.  Landmarks co-visible in frames 0-1
    initialize the map; later landmarks are inserted once seen 3 times.
    """
    s = world.scenario
    ref = world.ref
    times = ref.times
    gate = s.obs_noise.reprojection_gate_sigma * s.obs_noise.sigma_px
    inserted: set[int] = set()
    pending: dict[int, list] = {}
    guess_values = Values()
    prev_state: State | None = None
    estimates: Values | None = None

    def motion_guess(k: int, base: State) -> State:
        n_sub = default_substeps(times[k - 1], times[k],
                                 max_substep=s.solve.max_substep,
                                 min_substeps=s.solve.min_substeps)
        return propagate_interval(base, ref.stream, s.params, times[k - 1],
                                  times[k], n_sub).x_end

    def project_guess(T_GS: Pose, lid: int):
        T_GC = T_GS.compose(s.T_SC)
        p_C = T_GC.rot.T @ (guess_values[landmark_key(lid)] - T_GC.trans)
        if p_C[2] <= 1e-9:
            return None
        y, _ = pinhole_project(p_C, s.camera)
        return y

    for k in range(s.schedule.n_frames):
        new_factors = []
        new_values = Values()
        obs_k = world.observations[k]
        loop_pairs = []

        if k == 0:
            x0 = State(Q=world.priors.T0_meas.rot, w=world.priors.w0_mean,
                       r=world.priors.T0_meas.trans, v=world.priors.v0_mean)
            guess_state = x0
            m = s.meas
            meas0 = PriorPoseMeasurement(world.priors.T0_meas,
                                         m.sigma_R_m**2 * np.eye(3),
                                         m.sigma_r_m**2 * np.eye(3))
            new_factors.append(PriorPoseFactor(pose_key(0), meas0))
            new_factors.append(PriorVec3Factor(angvel_key(0), world.priors.w0_mean,
                                               m.sigma_w0**2 * np.eye(3)))
            new_factors.append(PriorVec3Factor(vel_key(0), world.priors.v0_mean,
                                               m.sigma_v0**2 * np.eye(3)))
            new_values[pose_key(0)] = Pose(x0.Q, x0.r)
            new_values[angvel_key(0)] = x0.w
            new_values[vel_key(0)] = x0.v
        else:
            base = prev_state
            if estimates is not None and pose_key(k - 1) in estimates:
                T_prev = estimates[pose_key(k - 1)]
                w_prev = estimates[angvel_key(k - 1)] if angvel_key(k - 1) in estimates else prev_state.w
                v_prev = estimates[vel_key(k - 1)] if vel_key(k - 1) in estimates else prev_state.v
                base = State(Q=T_prev.rot, w=w_prev, r=T_prev.trans, v=v_prev)
            guess_state = motion_guess(k, base)
            new_values[pose_key(k)] = Pose(guess_state.Q, guess_state.r)
            if include_reldyn:
                new_values[angvel_key(k)] = guess_state.w
                new_values[vel_key(k)] = guess_state.v
                iv = RelDynInterval(
                    t_k=float(times[k - 1]), t_k1=float(times[k]),
                    inputs=ref.stream.window(times[k - 1], times[k]),
                    params=s.params, noise=s.noise,
                    n_sub=default_substeps(times[k - 1], times[k],
                                           max_substep=s.solve.max_substep,
                                           min_substeps=s.solve.min_substeps),
                    discretization=s.solve.noise_discretization,
                    cov_floor=s.solve.cov_floor)
                new_factors.append(RelDynFactor(
                    (pose_key(k - 1), angvel_key(k - 1), vel_key(k - 1),
                     pose_key(k), angvel_key(k), vel_key(k)), iv))
            if k == 1:
                m = s.meas
                meas1 = PriorPoseMeasurement(world.priors.T1_meas,
                                             m.sigma_R_m**2 * np.eye(3),
                                             m.sigma_r_m**2 * np.eye(3))
                new_factors.append(PriorPoseFactor(pose_key(1), meas1))

        guess_values.update(new_values)
        T_GS_guess = Pose(guess_state.Q, guess_state.r)

        # observations of mapped landmarks: reprojection-gated projection factors
        for o in obs_k:
            if o.landmark in inserted:
                y_hat = project_guess(T_GS_guess, o.landmark)
                if y_hat is None or np.linalg.norm(o.y - y_hat) > gate:
                    continue
                new_factors.append(ProjectionFactor(
                    pose_key(o.frame), landmark_key(o.landmark), o.y, s.camera,
                    s.T_SC, s.obs_noise.sigma_px, robust=s.solve.robust_projection))
            else:
                pending.setdefault(o.landmark, []).append(o)

        # map initialization at frame 1, threshold-3 insertion afterwards
        def try_insert(lid: int, min_views: int) -> bool:
            views = pending.get(lid, [])
            if len(views) < min_views:
                return False
            va, vb = views[0], views[-1]
            Ta = guess_values[pose_key(va.frame)].compose(s.T_SC)
            Tb = guess_values[pose_key(vb.frame)].compose(s.T_SC)
            try:
                point = triangulate(Ta, Tb, va.y, vb.y, s.camera)
            except DegenerateGeometryError:
                return False
            new_values[landmark_key(lid)] = point
            guess_values[landmark_key(lid)] = point
            inserted.add(lid)
            for o in views:
                y_hat = project_guess(guess_values[pose_key(o.frame)], lid)
                if y_hat is None or np.linalg.norm(o.y - y_hat) > gate:
                    continue
                new_factors.append(ProjectionFactor(
                    pose_key(o.frame), landmark_key(lid), o.y, s.camera,
                    s.T_SC, s.obs_noise.sigma_px, robust=s.solve.robust_projection))
            del pending[lid]
            return True

        if k == 1:
            n_init = 0
            for lid in sorted(list(pending.keys())):
                if try_insert(lid, min_views=2):
                    n_init += 1
            if n_init < 8:
                raise InitializationError(
                    f"map init: only {n_init} co-visible landmarks triangulated (need 8)")
        elif k >= 2:
            for lid in sorted(list(pending.keys())):
                try_insert(lid, min_views=3)

        # loop closure against frames at least min_frame_gap older
        if s.loop.enabled and k >= s.loop.min_frame_gap:
            sims = [loop_similarity(world.descriptors[k], world.descriptors[j])
                    if world.descriptors[j].sum() > 0 else 0.0
                    for j in range(0, k - s.loop.min_frame_gap + 1)]
            if sims:
                jbest = int(np.argmax(sims))
                if sims[jbest] > s.loop.eta:
                    lf = _loop_closure_factor(world, jbest, k, guess_values, inserted)
                    if lf is not None and _loop_factor_consistent(lf, guess_values,
                                                                 s.loop.chi2_gate_per_dof):
                        new_factors.append(lf)
                        loop_pairs.append((jbest, k))

        prev_state = guess_state
        fed = yield FrameBundle(frame=k, t=float(times[k]), new_factors=new_factors,
                                new_values=new_values, observations=obs_k,
                                guess_state=guess_state, loop_pairs=loop_pairs)
        if fed is not None:
            estimates = fed
