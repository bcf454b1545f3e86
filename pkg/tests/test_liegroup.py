import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relnav.errors import LogBranchError, NumericalError
from relnav.liegroup import (Pose, State, hat, is_rotation, project_rotation,
                             se3_exp, se3_log, so3_exp, so3_log, state_delta, vee)


def test_hat_definition():
    assert np.array_equal(hat([1.0, 2.0, 3.0]),
                          np.array([[0, -3, 2], [3, 0, -1], [-2, 1, 0.0]]))


def test_hat_zero():
    assert np.array_equal(hat(np.zeros(3)), np.zeros((3, 3)))


def test_vee_round_trip():
    x = np.array([0.1, -0.2, 0.3])
    assert np.array_equal(vee(hat(x)), x)


def test_vee_rejects_asymmetric():
    m = np.eye(3) * 1e-6
    with pytest.raises(NumericalError):
        vee(m)


def test_exp_identity():
    assert np.allclose(so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_x():
    # Rodrigues-formula oracle for a 90 degree rotation about x
    expected = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0.0]])
    assert np.abs(so3_exp([np.pi / 2, 0, 0]) - expected).max() < 1e-15


def test_exp_inverse(rng):
    for _ in range(50):
        x = rng.normal(size=3)
        x *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(x)
        assert np.abs(so3_exp(x) @ so3_exp(-x) - np.eye(3)).max() < 1e-14


def test_exp_log_round_trip_sweep():
    # module invariant: 1e4 seeded tangent vectors, max error < 1e-9
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10_000):
        x = rng.normal(size=3)
        x *= rng.uniform(1e-12, np.pi - 0.01) / np.linalg.norm(x)
        worst = max(worst, np.abs(so3_log(so3_exp(x)) - x).max())
    assert worst < 1e-9


def test_log_small_angle_branch():
    x = np.array([1e-9, -2e-9, 3e-10])
    assert np.abs(so3_log(so3_exp(x)) - x).max() < 1e-18


def test_log_rejects_near_pi():
    with pytest.raises(LogBranchError):
        so3_log(so3_exp([np.pi - 1e-12, 0, 0]))


def test_exp_batched_shape(rng):
    xs = rng.normal(size=(17, 3)) * 0.3
    Rs = so3_exp(xs)
    assert Rs.shape == (17, 3, 3)
    for i in range(17):
        assert np.allclose(Rs[i], so3_exp(xs[i]))


def test_se3_log_identity():
    assert np.array_equal(se3_log(Pose.identity()), np.zeros(6))


def test_se3_exp_pure_translation():
    t = np.array([1.0, -2.0, 0.5])
    T = se3_exp(np.concatenate([np.zeros(3), t]))
    assert np.allclose(T.rot, np.eye(3)) and np.allclose(T.trans, t)


def test_se3_round_trip_sweep():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        phi = rng.normal(size=3)
        phi *= rng.uniform(1e-9, np.pi - 0.01) / np.linalg.norm(phi)
        xi = np.concatenate([phi, rng.normal(size=3) * 5.0])
        worst = max(worst, np.abs(se3_log(se3_exp(xi)) - xi).max())
    assert worst < 1e-9


def test_pose_compose_identity(rng):
    T = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    TI = T.compose(Pose.identity())
    assert np.array_equal(TI.rot, T.rot) and np.array_equal(TI.trans, T.trans)


def test_pose_inverse_cancels(rng):
    T1 = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    T2 = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    prod = T1.compose(T2).compose(T2.inverse()).compose(T1.inverse())
    assert np.abs(prod.as_matrix() - np.eye(4)).max() < 1e-9


def test_pose_chain_matches_matrix_product():
    rng = np.random.default_rng(3)
    T_GS = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 10)
    T_SC = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    direct = T_GS.as_matrix() @ T_SC.as_matrix()
    chained = T_GS.compose(T_SC).as_matrix()
    assert np.abs(direct - chained).max() < 1e-12


def test_state_delta_zero(rng):
    x = State(Q=so3_exp(rng.normal(size=3)), w=rng.normal(size=3),
              r=rng.normal(size=3), v=rng.normal(size=3))
    assert np.array_equal(state_delta(x, x), np.zeros(12))


def test_state_delta_rotation_block(rng):
    x1 = State(Q=so3_exp(rng.normal(size=3)), w=np.zeros(3), r=np.zeros(3),
               v=np.zeros(3))
    kappa = np.array([0.05, -0.02, 0.01])
    x2 = State(Q=x1.Q @ so3_exp(kappa), w=x1.w, r=x1.r, v=x1.v)
    d = state_delta(x1, x2)
    assert np.abs(d[:3] - kappa).max() < 1e-12
    assert np.array_equal(d[3:], np.zeros(9))


def test_state_delta_velocity_block():
    x1 = State(Q=np.eye(3), w=np.zeros(3), r=np.zeros(3), v=np.zeros(3))
    x2 = State(Q=np.eye(3), w=np.zeros(3), r=np.zeros(3), v=np.array([1.0, 0, 0]))
    assert np.array_equal(state_delta(x1, x2)[9:], np.array([1.0, 0, 0]))


def test_orthonormality_drift_and_reprojection():
    # invariant: 1e4 composed exp rotations stay within 1e-6; re-projection
    # brings the product below 1e-12
    rng = np.random.default_rng(5)
    R = np.eye(3)
    for _ in range(10_000):
        R = R @ so3_exp(rng.normal(size=3) * 0.03)
    drift = np.linalg.norm(R @ R.T - np.eye(3))
    assert drift < 1e-6
    Rp = project_rotation(R)
    assert np.linalg.norm(Rp @ Rp.T - np.eye(3)) < 1e-12
    assert is_rotation(Rp, tol=1e-12)


def test_rotation_conjugation_identity():
    # R exp(x) R^T == exp(R x) within 1e-12 on seeded samples
    rng = np.random.default_rng(9)
    for _ in range(200):
        R = so3_exp(rng.normal(size=3))
        x = rng.normal(size=3)
        lhs = R @ so3_exp(x) @ R.T
        rhs = so3_exp(R @ x)
        assert np.abs(lhs - rhs).max() < 1e-12


@given(st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3))
@settings(max_examples=60, deadline=None)
def test_hat_vee_property(coords):
    x = np.asarray(coords)
    m = hat(x)
    assert np.array_equal(m, -m.T)
    assert np.array_equal(vee(m), x)


@given(st.lists(st.floats(-0.9, 0.9), min_size=3, max_size=3))
@settings(max_examples=60, deadline=None)
def test_exp_log_property(coords):
    x = np.asarray(coords)
    assert np.abs(so3_log(so3_exp(x)) - x).max() < 1e-10
