"""Explicit Crouch-Grossman geometric integration of the mixed SO(3) x R^9
state.

The rotation block advances through ordered products of exponentials so the
iterate never leaves the manifold; the vector blocks follow the same Butcher
tableau as a classic explicit Runge-Kutta.  The per-interval rotation
increment (the product of all sub-step stage exponentials) is exposed because
the dynamics-prior residual consumes it directly.

Default tableau is the 3-stage 3rd-order scheme:

    c = (0, 3/4, 17/24),  a21 = 3/4,  a31 = 119/216,  a32 = 17/108,
    b = (13/51, -2/3, 24/17).

Inputs between samples are zero-order held.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import DynamicsParams, Input, drift_batch
from .errors import NumericalError
from .liegroup import State, _orthonormalize_step, so3_exp


@dataclass(frozen=True)
class ButcherTable:
    """Explicit tableau: a strictly lower triangular, sum(b) = 1."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        c = np.asarray(self.c, dtype=float).reshape(-1)
        s = b.size
        if a.shape != (s, s) or c.size != s:
            raise NumericalError("ButcherTable: inconsistent stage counts")
        if np.abs(np.triu(a)).max() > 0.0:
            raise NumericalError("ButcherTable: a must be strictly lower triangular")
        if abs(b.sum() - 1.0) > 1e-12:
            raise NumericalError("ButcherTable: weights must sum to 1")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def stages(self) -> int:
        return self.b.size


CG3 = ButcherTable(
    a=np.array([[0.0, 0.0, 0.0],
                [3.0 / 4.0, 0.0, 0.0],
                [119.0 / 216.0, 17.0 / 108.0, 0.0]]),
    b=np.array([13.0 / 51.0, -2.0 / 3.0, 24.0 / 17.0]),
    c=np.array([0.0, 3.0 / 4.0, 17.0 / 24.0]),
)

CG2 = ButcherTable(
    a=np.array([[0.0, 0.0],
                [0.5, 0.0]]),
    b=np.array([0.0, 1.0]),
    c=np.array([0.0, 0.5]),
)


class ConstantInput:
    """Time-independent input stream."""

    def __init__(self, u: Input):
        self._u = u

    def at(self, t: float) -> Input:
        return self._u


class SampledInputs:
    """Zero-order-hold stream over sorted sample times.

    Queries before the first sample return the first sample; queries at or
    after a sample time return that sample.
    """

    def __init__(self, times, R, s, f, tau=None):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        if np.any(np.diff(self.times) <= 0.0):
            raise NumericalError("SampledInputs: times must be strictly increasing")
        n = self.times.size
        self.R = np.asarray(R, dtype=float).reshape(n, 3, 3)
        self.s = np.asarray(s, dtype=float).reshape(n, 3)
        self.f = np.asarray(f, dtype=float).reshape(n, 3)
        self.tau = (np.zeros((n, 3)) if tau is None
                    else np.asarray(tau, dtype=float).reshape(n, 3))

    def at(self, t: float) -> Input:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        i = min(max(i, 0), self.times.size - 1)
        return Input(R_hat=self.R[i], s_hat=self.s[i], tau_hat=self.tau[i], f_hat=self.f[i])

    def window(self, t0: float, t1: float) -> "SampledInputs":
        """Samples covering [t0, t1] including the one at or before t0."""
        lo = max(int(np.searchsorted(self.times, t0, side="right")) - 1, 0)
        hi = int(np.searchsorted(self.times, t1, side="right"))
        sl = slice(lo, max(hi, lo + 1))
        return SampledInputs(self.times[sl], self.R[sl], self.s[sl], self.f[sl], self.tau[sl])


def as_stream(u):
    """Accept an Input, a stream object, or a callable t -> Input."""
    if isinstance(u, Input):
        return ConstantInput(u)
    if hasattr(u, "at"):
        return u
    if callable(u):
        class _Wrapped:
            def __init__(self, fn):
                self._fn = fn

            def at(self, t):
                return self._fn(t)
        return _Wrapped(u)
    raise NumericalError("unsupported input stream type")


@dataclass(frozen=True)
class PropagationResult:
    """Increments over [t0, t1]: x_end.Q = x_start.Q @ omega_prop and the
    vector blocks advance by (dw, dr, dv)."""

    omega_prop: np.ndarray
    dw: np.ndarray
    dr: np.ndarray
    dv: np.ndarray
    x_end: State
    steps_used: int


def default_substeps(t0: float, t1: float, max_substep: float = 60.0,
                     min_substeps: int = 4) -> int:
    """Sub-step count keeping h <= min(max_substep, (t1-t0)/min_substeps)."""
    dt = t1 - t0
    if dt <= 0.0:
        raise NumericalError("default_substeps: t1 must exceed t0")
    return max(min_substeps, int(math.ceil(dt / max_substep)))


def _step_batch(Q, w, r, v, stream, p, t, h, table):
    """One Crouch-Grossman step for a batch; returns (omega_step, w, r, v)."""
    s = table.stages
    a, b, c = table.a, table.b, table.c
    fQ = [None] * s
    fw = [None] * s
    fr = [None] * s
    fv = [None] * s
    for i in range(s):
        Qi, wi, ri, vi = Q, w, r, v
        for j in range(i):
            if a[i, j] != 0.0:
                Qi = Qi @ so3_exp(a[i, j] * h * fQ[j])
                wi = wi + a[i, j] * h * fw[j]
                ri = ri + a[i, j] * h * fr[j]
                vi = vi + a[i, j] * h * fv[j]
        u_i = stream.at(t + c[i] * h)
        fQ[i], fw[i], fr[i], fv[i] = drift_batch(Qi, wi, ri, vi, u_i, p, t + c[i] * h)
    omega = so3_exp(b[0] * h * fQ[0])
    for i in range(1, s):
        omega = omega @ so3_exp(b[i] * h * fQ[i])
    omega = _orthonormalize_step(omega)
    w_new = w + h * sum(b[i] * fw[i] for i in range(s))
    r_new = r + h * sum(b[i] * fr[i] for i in range(s))
    v_new = v + h * sum(b[i] * fv[i] for i in range(s))
    return omega, w_new, r_new, v_new


def cg_step(x: State, u_of_t, p: DynamicsParams, t: float, h: float,
            table: ButcherTable = CG3) -> State:
    """Advance a single state by one step of size h > 0."""
    if h <= 0.0:
        raise NumericalError("cg_step: step size must be positive")
    stream = as_stream(u_of_t)
    omega, w, r, v = _step_batch(x.Q, x.w, x.r, x.v, stream, p, t, h, table)
    return State(Q=x.Q @ omega, w=w, r=r, v=v)


def propagate_batch(Q0, w0, r0, v0, u_of_t, p: DynamicsParams, t0: float,
                    t1: float, n_sub: int, table: ButcherTable = CG3):
    """Propagate a batch over [t0, t1] in n_sub equal sub-steps.

    Returns (omega_prop, dw, dr, dv) with omega_prop accumulated as the
    ordered product of per-step rotation increments.
    """
    if t1 <= t0:
        raise NumericalError("propagate: t1 must exceed t0")
    if n_sub < 1:
        raise NumericalError("propagate: n_sub must be >= 1")
    stream = as_stream(u_of_t)
    Q0 = np.asarray(Q0, dtype=float)
    h = (t1 - t0) / n_sub
    omega_acc = np.broadcast_to(np.eye(3), Q0.shape).copy()
    w, r, v = (np.asarray(a, dtype=float).copy() for a in (w0, r0, v0))
    w_start, r_start, v_start = w.copy(), r.copy(), v.copy()
    for k in range(n_sub):
        t = t0 + k * h
        Q = Q0 @ omega_acc
        omega, w, r, v = _step_batch(Q, w, r, v, stream, p, t, h, table)
        omega_acc = _orthonormalize_step(omega_acc @ omega)
    return omega_acc, w - w_start, r - r_start, v - v_start


def propagate_interval(x: State, u_of_t, p: DynamicsParams, t0: float, t1: float,
                       n_sub: int | None = None, table: ButcherTable = CG3,
                       max_substep: float = 60.0) -> PropagationResult:
    """Propagate one state over [t0, t1]; n_sub defaults to default_substeps."""
    if n_sub is None:
        n_sub = default_substeps(t0, t1, max_substep=max_substep)
    omega, dw, dr, dv = propagate_batch(x.Q, x.w, x.r, x.v, u_of_t, p, t0, t1,
                                        n_sub, table)
    x_end = State(Q=x.Q @ omega, w=x.w + dw, r=x.r + dr, v=x.v + dv)
    return PropagationResult(omega_prop=omega, dw=dw, dr=dr, dv=dv,
                             x_end=x_end, steps_used=n_sub)
