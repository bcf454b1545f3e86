"""Shared test oracles, independent of the production integration paths."""

import numpy as np

from relnav.dynamics import DynamicsParams, Ephemeris, Input, SrpModel, drift_batch
from relnav.integrator import as_stream
from relnav.liegroup import State, hat, project_rotation, so3_exp


def rk4_manifold(x: State, u_of_t, p: DynamicsParams, t0: float, t1: float,
                 n: int) -> State:
    """Classic RK4 on the embedded rotation coordinates with per-step polar
    re-projection; independent of the Crouch-Grossman code path."""
    stream = as_stream(u_of_t)
    h = (t1 - t0) / n
    Q = x.Q.copy()
    y = np.concatenate([x.w, x.r, x.v])

    def f(Qc, yc, t):
        u = stream.at(t)
        fQ, fw, fr, fv = drift_batch(Qc, yc[:3], yc[3:6], yc[6:9], u, p, t)
        return Qc @ hat(fQ), np.concatenate([fw, fr, fv])

    for k in range(n):
        t = t0 + k * h
        k1Q, k1y = f(Q, y, t)
        k2Q, k2y = f(Q + h / 2 * k1Q, y + h / 2 * k1y, t + h / 2)
        k3Q, k3y = f(Q + h / 2 * k2Q, y + h / 2 * k2y, t + h / 2)
        k4Q, k4y = f(Q + h * k3Q, y + h * k3y, t + h)
        Q = project_rotation(Q + h / 6 * (k1Q + 2 * k2Q + 2 * k3Q + k4Q))
        y = y + h / 6 * (k1y + 2 * k2y + 2 * k3y + k4y)
    return State(Q=Q, w=y[:3], r=y[3:6], v=y[6:9])


def lyapunov_rk4(F, L, dt: float, n: int = 10_000):
    """Integrate Pdot = F P + P F^T + L L^T from zero; Van Loan oracle."""
    LLT = L @ L.T
    P = np.zeros_like(F)
    h = dt / n

    def rate(Pc):
        return F @ Pc + Pc @ F.T + LLT

    for _ in range(n):
        k1 = rate(P)
        k2 = rate(P + h / 2 * k1)
        k3 = rate(P + h / 2 * k2)
        k4 = rate(P + h * k3)
        P = P + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return P


def random_params(rng, mu_sun=1.327e11, srp=True, c_scale=0.2) -> DynamicsParams:
    return DynamicsParams(
        mu_a=17.28,
        mu_sun=mu_sun,
        c=rng.normal(size=3) * c_scale,
        C=so3_exp(rng.normal(size=3) * 0.5),
        A=np.diag([1.0, 1.6, 2.2]) * 1e9,
        m_s=1000.0,
        srp=SrpModel("cannonball", 2e-11, 1.496e8) if srp else SrpModel(),
        ephemeris=Ephemeris("fixed", np.array([-3.5e8, 1.0e8, -0.4e8])))


def random_state(rng, radius=5480.0) -> State:
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return State(Q=so3_exp(rng.normal(size=3)),
                 w=rng.normal(size=3) * 3e-4,
                 r=direction * radius * (1.0 + 0.1 * rng.uniform()),
                 v=rng.normal(size=3) * 0.05)


def random_input(rng, thrust=True) -> Input:
    return Input(R_hat=so3_exp(rng.normal(size=3)),
                 s_hat=rng.normal(size=3) * 1e-3,
                 tau_hat=np.zeros(3),
                 f_hat=rng.normal(size=3) * 1e-7 if thrust else np.zeros(3))


def circular_orbit_state(mu: float, radius: float, theta: float):
    """Analytic planar circular orbit: position and velocity at phase theta."""
    om = np.sqrt(mu / radius**3)
    r = radius * np.array([np.cos(theta), np.sin(theta), 0.0])
    v = radius * om * np.array([-np.sin(theta), np.cos(theta), 0.0])
    return r, v, om
