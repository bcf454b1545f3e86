import numpy as np
import pytest

from helpers import random_input, random_params, random_state
from relnav.dynamics import (DynamicsParams, Ephemeris, Input, SrpModel,
                             ephemeris_eval, eval_diffusion, eval_drift,
                             eval_jacobian, srp_accel)
from relnav.errors import NumericalError, SingularRadiusError
from relnav.liegroup import State, so3_exp
from relnav.stochastic import NoiseSpec


def bare_params(**kw):
    defaults = dict(mu_a=1.0, mu_sun=0.0, c=np.zeros(3), C=np.eye(3),
                    A=np.eye(3), m_s=1.0)
    defaults.update(kw)
    return DynamicsParams(**defaults)


def test_drift_transport_term():
    # w = z_hat, r = x_hat, all forces off: rdot = -w x r = -y_hat
    p = bare_params(mu_a=1e-30)
    x = State(Q=np.eye(3), w=[0, 0, 1.0], r=[1.0, 0, 0], v=np.zeros(3))
    d = eval_drift(x, Input(), p)
    assert np.allclose(d.f_r, [0.0, -1.0, 0.0], atol=1e-30)


def test_drift_principal_axis_spin():
    p = bare_params(A=np.diag([1.0, 2.0, 3.0]))
    x = State(Q=np.eye(3), w=[0, 0, 0.5], r=[10.0, 0, 0], v=np.zeros(3))
    d = eval_drift(x, Input(), p)
    assert np.array_equal(d.f_w, np.zeros(3))


def test_drift_unit_two_body():
    p = bare_params(mu_a=1.0)
    x = State(Q=np.eye(3), w=np.zeros(3), r=[1.0, 0, 0], v=np.zeros(3))
    d = eval_drift(x, Input(), p)
    assert np.allclose(d.f_v, [-1.0, 0, 0], atol=1e-30)


def test_two_body_reduction_is_exact():
    # with c=0, w=0, no sun/srp/thrust the formulas collapse bitwise to
    # rdot = v, vdot = -mu r / |r|^3
    rng = np.random.default_rng(2)
    p = bare_params(mu_a=17.28)
    for _ in range(20):
        r = rng.normal(size=3) * 1000
        v = rng.normal(size=3)
        x = State(Q=so3_exp(rng.normal(size=3)), w=np.zeros(3), r=r, v=v)
        d = eval_drift(x, Input(), p)
        expected = -17.28 * r / np.linalg.norm(r) ** 3
        assert np.array_equal(d.f_r, v)
        assert np.abs(d.f_v - expected).max() <= 1e-15 * np.abs(expected).max()


def test_drift_singular_radius():
    p = bare_params(r_min=1e-3)
    x = State(Q=np.eye(3), w=np.zeros(3), r=[1e-4, 0, 0], v=np.zeros(3))
    with pytest.raises(SingularRadiusError):
        eval_drift(x, Input(), p)


def test_drift_gyro_coupling(rng):
    x = random_state(rng)
    u = random_input(rng)
    p = random_params(rng)
    d = eval_drift(x, u, p, 0.0)
    assert np.allclose(d.f_Q, u.s_hat - x.Q.T @ x.w)


# --- diffusion ---------------------------------------------------------------

def test_diffusion_zero_noise(rng):
    x = random_state(rng)
    L = eval_diffusion(x, random_input(rng), random_params(rng), NoiseSpec())
    assert np.array_equal(L, np.zeros((12, 12)))


def test_diffusion_gyro_row_only():
    x = State(Q=np.eye(3), w=np.zeros(3), r=[10.0, 0, 0], v=np.zeros(3))
    p = bare_params()
    L = eval_diffusion(x, Input(), p, NoiseSpec(L_s=np.eye(3)))
    expected = np.zeros((12, 12))
    expected[0:3, 3:6] = np.eye(3)
    assert np.array_equal(L, expected)


def test_diffusion_srp_off_kills_attitude_column(rng):
    x = random_state(rng)
    p = random_params(rng, srp=False, mu_sun=0.0)
    L = eval_diffusion(x, random_input(rng), p, NoiseSpec(L_R=np.eye(3)))
    assert np.array_equal(L[9:12, 0:3], np.zeros((3, 3)))


def test_diffusion_psd(rng):
    ns = NoiseSpec.from_sigmas(1e-6, 1e-7, 1e3, 1e-9)
    for _ in range(20):
        x = random_state(rng)
        L = eval_diffusion(x, random_input(rng), random_params(rng), ns)
        W = L @ L.T
        assert np.linalg.eigvalsh(W).min() >= -1e-12


# --- jacobian -----------------------------------------------------------------

def fd_jacobian(x, u, p, t, h=1e-6):
    F = np.zeros((12, 12))
    for d in range(12):
        dx = np.zeros(12)
        dx[d] = h
        fp = eval_drift(x.retract(dx), u, p, t).stack()
        fm = eval_drift(x.retract(-dx), u, p, t).stack()
        F[:, d] = (fp - fm) / (2 * h)
    return F


def test_jacobian_matches_finite_differences():
    # module invariant: 100 seeded points, rel error < 1e-5
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(100):
        x = random_state(rng)
        u = random_input(rng)
        p = random_params(rng)
        F = eval_jacobian(x, u, p, 0.0)
        Ffd = fd_jacobian(x, u, p, 0.0)
        worst = max(worst, np.abs(F - Ffd).max() / (1.0 + np.abs(Ffd).max()))
    assert worst < 1e-5


def test_jacobian_transport_blocks():
    p = bare_params(mu_a=17.28)
    x = State(Q=np.eye(3), w=np.zeros(3), r=[123.0, -4.0, 5.0], v=[0.1, 0, 0])
    F = eval_jacobian(x, Input(), p)
    assert np.array_equal(F[6:9, 6:9], np.zeros((3, 3)))  # -hat(0)
    assert np.array_equal(F[6:9, 9:12], np.eye(3))


def test_jacobian_singular_radius():
    p = bare_params(r_min=1.0)
    x = State(Q=np.eye(3), w=np.zeros(3), r=[0.5, 0, 0], v=np.zeros(3))
    with pytest.raises(SingularRadiusError):
        eval_jacobian(x, Input(), p)


# --- srp / ephemeris ----------------------------------------------------------

def test_srp_none():
    assert np.array_equal(srp_accel([1e8, 0, 0], SrpModel()), np.zeros(3))


def test_srp_reference_distance():
    m = SrpModel("cannonball", coefficient=3.0, d0_ref=100.0)
    assert np.allclose(srp_accel([100.0, 0, 0], m), [3.0, 0, 0])


def test_srp_inverse_square_slope():
    m = SrpModel("cannonball", coefficient=1.0, d0_ref=1.0)
    rng = np.random.default_rng(4)
    dists = np.exp(rng.uniform(0.0, 8.0, size=40))
    mags = np.array([np.linalg.norm(srp_accel([d, 0, 0], m)) for d in dists])
    slope = np.polyfit(np.log(dists), np.log(mags), 1)[0]
    assert abs(slope + 2.0) < 1e-6


def test_ephemeris_fixed():
    e = Ephemeris("fixed", d0=[1.5e8, 0, 0])
    assert np.array_equal(ephemeris_eval(e, 12345.0), [1.5e8, 0, 0])


def test_ephemeris_linear():
    e = Ephemeris("linear", d0=[1.5e8, 0, 0], d_rate=[1.0, 0, 0])
    assert np.allclose(ephemeris_eval(e, 10.0), [1.5e8 + 10.0, 0, 0])


def test_ephemeris_zero_norm_rejected():
    e = Ephemeris("fixed", d0=[1.0, 0, 0], d_rate=[0, 0, 0])
    ez = Ephemeris("linear", d0=[1.0, 0, 0], d_rate=[-1.0, 0, 0])
    with pytest.raises(NumericalError):
        ephemeris_eval(ez, 1.0)
    assert np.linalg.norm(ephemeris_eval(e, 0.0)) > 0


def test_params_validation():
    with pytest.raises(NumericalError):
        DynamicsParams(mu_a=-1.0)
    with pytest.raises(NumericalError):
        DynamicsParams(mu_a=1.0, A=np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(NumericalError):
        DynamicsParams(mu_a=1.0, A=np.array([[1, 0.5, 0], [0, 1, 0], [0, 0, 1.0]]))
