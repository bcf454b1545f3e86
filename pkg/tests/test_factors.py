import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_input, random_params, random_state, rk4_manifold
from relnav.errors import CheiralityError, NumericalError
from relnav.factors import (CameraIntrinsics, LoopClosureFactor, PriorPoseFactor,
                            PriorPoseMeasurement, PriorVec3Factor, ProjectionFactor,
                            RelDynFactor, RelDynInterval, huber_weight,
                            loop_similarity, numeric_jacobian, prior_pose_residual,
                            prior_vec_residual, projection_residual, reldyn_residual,
                            whiten)
from relnav.integrator import propagate_interval
from relnav.liegroup import Pose, State, se3_exp, so3_exp
from relnav.solver import angvel_key, landmark_key, pose_key, vel_key
from relnav.stochastic import NoiseSpec

K = CameraIntrinsics(fx=1000.0, fy=1100.0, cx=320.0, cy=240.0, width=640, height=480)


def make_interval(rng, dt=300.0, n_sub=4):
    return RelDynInterval(t_k=0.0, t_k1=dt, inputs=random_input(rng),
                          params=random_params(rng), noise=NoiseSpec.from_sigmas(
                              1e-6, 1e-8, 1e3, 1e-10), n_sub=n_sub)


# --- RelDyn -------------------------------------------------------------------

def test_reldyn_self_consistency(rng):
    iv = make_interval(rng)
    x0 = random_state(rng)
    prop = propagate_interval(x0, iv.inputs, iv.params, iv.t_k, iv.t_k1, iv.n_sub)
    res, P = reldyn_residual(x0, prop.x_end, iv)
    assert np.abs(res).max() < 1e-10
    assert np.abs(P - P.T).max() <= 1e-12 * np.abs(P).max()


def test_reldyn_w_perturbation_isolated(rng):
    iv = make_interval(rng)
    x0 = random_state(rng)
    x1 = propagate_interval(x0, iv.inputs, iv.params, iv.t_k, iv.t_k1, iv.n_sub).x_end
    delta = np.array([1e-5, -2e-5, 3e-5])
    x1p = State(Q=x1.Q, w=x1.w + delta, r=x1.r, v=x1.v)
    res, _ = reldyn_residual(x0, x1p, iv)
    assert np.allclose(res[3:6], delta)
    assert np.abs(res[:3]).max() < 1e-10
    assert np.abs(res[6:]).max() < 1e-10


def test_reldyn_vs_fine_rk4_oracle(rng):
    # prediction against a 100x finer independent RK4-on-manifold reference
    iv = make_interval(rng, dt=200.0, n_sub=96)
    x0 = random_state(rng)
    x1 = rk4_manifold(x0, iv.inputs, iv.params, iv.t_k, iv.t_k1, 9600)
    res, _ = reldyn_residual(x0, x1, iv)
    assert np.abs(res).max() < 1e-6


def test_reldyn_subinterval_composition(rng):
    # residual over [t0,t2] vanishes when x2 chains two sub-propagations
    for _ in range(10):
        iv = make_interval(rng, dt=400.0, n_sub=4)
        x0 = random_state(rng)
        mid = propagate_interval(x0, iv.inputs, iv.params, 0.0, 200.0, 2).x_end
        x2 = propagate_interval(mid, iv.inputs, iv.params, 200.0, 400.0, 2).x_end
        res, _ = reldyn_residual(x0, x2, iv)
        assert np.abs(res).max() < 1e-9


def test_reldyn_factor_batched_fd_matches_generic(rng):
    iv = make_interval(rng)
    x0 = random_state(rng)
    x1 = propagate_interval(x0, iv.inputs, iv.params, iv.t_k, iv.t_k1,
                            iv.n_sub).x_end
    x1 = x1.retract(rng.normal(size=12) * 1e-4)
    keys = (pose_key(0), angvel_key(0), vel_key(0),
            pose_key(1), angvel_key(1), vel_key(1))
    f = RelDynFactor(keys, iv)
    values = {pose_key(0): Pose(x0.Q, x0.r), angvel_key(0): x0.w, vel_key(0): x0.v,
              pose_key(1): Pose(x1.Q, x1.r), angvel_key(1): x1.w, vel_key(1): x1.v}
    res_b, jac_b = f.linearize_fd(values)
    jac_g = numeric_jacobian(f, values)
    assert np.allclose(res_b, f.residual(values), atol=1e-12)
    # batched evaluation is the same arithmetic but not bitwise identical
    for key in keys:
        denom = 1.0 + np.abs(jac_g[key]).max()
        assert np.abs(jac_b[key] - jac_g[key]).max() / denom < 1e-7


# --- projection ---------------------------------------------------------------

def test_projection_on_axis():
    T = Pose.identity()
    res = projection_residual(T, [0.0, 0.0, 5.0], [K.cx, K.cy], K)
    assert np.abs(res).max() < 1e-12


def test_projection_x_offset():
    res = projection_residual(Pose.identity(), [2.0, 0.0, 10.0],
                              [K.fx * 0.2 + K.cx, K.cy], K)
    assert np.abs(res).max() < 1e-12


def test_projection_cheirality():
    with pytest.raises(CheiralityError):
        projection_residual(Pose.identity(), [0.0, 0.0, -5.0], [0.0, 0.0], K)


def test_projection_round_trip_through_simulator(small_world):
    # zero-measurement-noise consistency: re-projecting the truth gives the
    # noiseless pixел back
    w = small_world
    s = w.scenario
    k = 3
    xk = w.ref.states[k]
    T_GS = Pose(xk.Q, xk.r)
    lm = {l.id: l.pos_G for l in w.landmarks}
    for o in w.observations[k][:20]:
        res = projection_residual(T_GS, lm[o.landmark], o.y, s.camera, s.T_SC)
        assert np.linalg.norm(res) < 8.0 * s.obs_noise.sigma_px + s.obs_noise.outlier_px


def test_projection_scale_invariance(rng):
    # monocular gauge: scaling all translations and landmarks leaves pixels
    T = Pose(so3_exp(rng.normal(size=3) * 0.2), rng.normal(size=3) * 5)
    ell = T.trans + T.rot @ np.array([0.3, -0.2, 8.0])
    y = np.array([300.0, 250.0])
    for lam in (0.5, 2.0, 7.3):
        r1 = projection_residual(T, ell, y, K)
        r2 = projection_residual(Pose(T.rot, lam * T.trans), lam * ell, y, K)
        assert np.abs(r1 - r2).max() < 1e-9


def test_projection_analytic_jacobian_matches_numeric(rng):
    for _ in range(25):
        T_GS = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 2)
        T_SC = Pose(so3_exp(rng.normal(size=3) * 0.1), rng.normal(size=3) * 0.05)
        p_C = np.array([rng.normal() * 0.5, rng.normal() * 0.5, rng.uniform(4, 20)])
        T_GC = T_GS.compose(T_SC)
        ell = T_GC.apply(p_C)
        f = ProjectionFactor(pose_key(0), landmark_key(0),
                             rng.normal(size=2) * 2 + [K.cx, K.cy], K, T_SC)
        values = {pose_key(0): T_GS, landmark_key(0): ell}
        jn = numeric_jacobian(f, values)
        ja = f.analytic_jacobian(values)
        for key in f.variables:
            denom = 1.0 + np.abs(jn[key]).max()
            assert np.abs(ja[key] - jn[key]).max() / denom < 1e-5


# --- priors ------------------------------------------------------------------

def test_prior_pose_zero_residual(rng):
    T = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    m = PriorPoseMeasurement(T, 1e-6 * np.eye(3), 1e-4 * np.eye(3))
    res, _ = prior_pose_residual(T, m, np.eye(3))
    assert np.abs(res).max() < 1e-12


def test_prior_pose_covariance_blockdiag():
    m = PriorPoseMeasurement(Pose.identity(), 2.0 * np.eye(3), 3.0 * np.eye(3))
    _, Sigma = prior_pose_residual(Pose.identity(), m, np.eye(3))
    expected = np.zeros((6, 6))
    expected[:3, :3] = 2.0 * np.eye(3)
    expected[3:, 3:] = 3.0 * np.eye(3)
    assert np.array_equal(Sigma, expected)


def test_prior_pose_mission_sigma_values():
    sigma_R, sigma_r = 1e-5, 0.05
    m = PriorPoseMeasurement(Pose.identity(), sigma_R**2 * np.eye(3),
                             sigma_r**2 * np.eye(3))
    R_ctx = so3_exp(np.array([0.3, -0.2, 0.5]))
    _, Sigma = prior_pose_residual(Pose.identity(), m, R_ctx)
    assert np.allclose(Sigma[:3, :3], 1e-10 * np.eye(3))
    assert np.allclose(Sigma[3:, 3:], 2.5e-3 * np.eye(3))


def test_prior_vec_examples():
    assert np.array_equal(prior_vec_residual([1.0, 2, 3], [1.0, 2, 3]), np.zeros(3))
    assert np.array_equal(prior_vec_residual([1.0, 2, 3], np.zeros(3)), [1.0, 2, 3])


def test_prior_vec_whitened_norm_is_mahalanobis(rng):
    Sigma = np.diag([4.0, 9.0, 16.0])
    v = rng.normal(size=3)
    res = prior_vec_residual(v, np.zeros(3))
    rw, _ = whiten(res, Sigma)
    assert abs(rw @ rw - res @ np.linalg.inv(Sigma) @ res) < 1e-10


# --- loop similarity -----------------------------------------------------------

def test_similarity_self():
    v = np.array([0.2, 0.0, 0.8, 0.1])
    assert loop_similarity(v, v) == 1.0


def test_similarity_opposite():
    v = np.array([0.5, -0.25, 0.25])
    assert loop_similarity(v, -v) == 0.0


def test_similarity_disjoint_support():
    a = np.array([0.5, 0.5, 0.0, 0.0])
    b = np.array([0.0, 0.0, 0.7, 0.3])
    assert loop_similarity(a, b) == 0.0


def test_similarity_zero_norm_rejected():
    with pytest.raises(NumericalError):
        loop_similarity(np.zeros(3), np.ones(3))


@given(st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
       st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4))
@settings(max_examples=50, deadline=None)
def test_similarity_symmetric_and_bounded(a, b):
    va, vb = np.asarray(a), np.asarray(b)
    s_ab = loop_similarity(va, vb)
    assert s_ab == loop_similarity(vb, va)
    assert 0.0 <= s_ab <= 1.0


# --- numeric jacobian / whitening ----------------------------------------------

def test_numeric_jacobian_prior_vec():
    f = PriorVec3Factor(vel_key(0), np.zeros(3), np.eye(3))
    J = numeric_jacobian(f, {vel_key(0): np.array([1.0, 2.0, 3.0])})
    assert np.abs(J[vel_key(0)] - np.eye(3)).max() < 1e-9


def test_reldyn_jacobian_smoke_sweep(rng):
    # finite rows, no NaN, across seeded instances
    for _ in range(20):
        iv = make_interval(rng, dt=150.0, n_sub=3)
        x0 = random_state(rng)
        x1 = propagate_interval(x0, iv.inputs, iv.params, iv.t_k, iv.t_k1,
                                iv.n_sub).x_end.retract(rng.normal(size=12) * 1e-5)
        keys = (pose_key(0), angvel_key(0), vel_key(0),
                pose_key(1), angvel_key(1), vel_key(1))
        f = RelDynFactor(keys, iv)
        values = {pose_key(0): Pose(x0.Q, x0.r), angvel_key(0): x0.w,
                  vel_key(0): x0.v, pose_key(1): Pose(x1.Q, x1.r),
                  angvel_key(1): x1.w, vel_key(1): x1.v}
        _, jac = f.linearize_fd(values)
        for J in jac.values():
            assert np.isfinite(J).all()


def test_whitening_consistency_all_kinds(rng):
    # r^T Sigma^-1 r == |chol(Sigma)^-1 r|^2 for every factor kind
    iv = make_interval(rng)
    x0 = random_state(rng)
    x1 = propagate_interval(x0, iv.inputs, iv.params, iv.t_k, iv.t_k1,
                            iv.n_sub).x_end.retract(rng.normal(size=12) * 1e-4)
    T0, T1 = Pose(x0.Q, x0.r), Pose(x1.Q, x1.r)
    ell = T0.apply(np.array([0.1, -0.2, 30.0]))
    values = {pose_key(0): T0, angvel_key(0): x0.w, vel_key(0): x0.v,
              pose_key(1): T1, angvel_key(1): x1.w, vel_key(1): x1.v,
              landmark_key(0): ell}
    factors = [
        PriorPoseFactor(pose_key(0), PriorPoseMeasurement(
            T1, 1e-6 * np.eye(3), 1e-2 * np.eye(3))),
        PriorVec3Factor(angvel_key(0), x0.w + 1e-5, np.diag([1e-6, 2e-6, 3e-6])),
        ProjectionFactor(pose_key(0), landmark_key(0), [K.cx + 3, K.cy - 2], K,
                         sigma_px=1.5),
        RelDynFactor((pose_key(0), angvel_key(0), vel_key(0), pose_key(1),
                      angvel_key(1), vel_key(1)), iv),
        LoopClosureFactor(pose_key(0), pose_key(1),
                          T0.inverse().compose(T1).compose(se3_exp(
                              rng.normal(size=6) * 1e-3)), 1e-4 * np.eye(6)),
    ]
    for f in factors:
        res = f.residual(values)
        Sigma = f.covariance(values)
        rw, _ = whiten(res, Sigma)
        direct = res @ np.linalg.solve(Sigma, res)
        assert abs(rw @ rw - direct) <= 1e-10 * max(1.0, abs(direct))


def test_huber_weight_properties():
    assert huber_weight(0.5) == 1.0
    assert huber_weight(1.345) == 1.0
    n = 10.0
    w = huber_weight(n)
    assert (w * n) ** 2 == pytest.approx(1.345 * (2 * n - 1.345))


def test_camera_intrinsics_validation():
    with pytest.raises(NumericalError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=1.0, cy=1.0, width=10, height=10)
    with pytest.raises(NumericalError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=20.0, cy=1.0, width=10, height=10)
