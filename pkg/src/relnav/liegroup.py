"""SO(3)/SE(3) primitives and the 12-dof manifold state error.

Conventions
-----------
Rotations are plain 3x3 numpy arrays (row i, column j).  R_XY maps
coordinates expressed in frame Y to frame X and composes as
R_XZ = R_XY @ R_YZ.  Tangent coordinates use the hat map
hat(x) @ y == cross(x, y); SE(3) tangents are ordered
[rotation(3); translation(3)].

``hat`` and ``so3_exp`` broadcast over leading axes so hot paths can push
batches of rotations through a single call.  Logarithms are restricted to
rotation angles below pi - 1e-9; the branch at pi is rejected rather than
resolved by convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LogBranchError, NumericalError

# Numerical-stability thresholds, not model parameters.
SMALL_ANGLE = 1e-6         # Taylor branch for exp/log and SO(3) Jacobians
LOG_DOMAIN_MARGIN = 1e-9   # reject log of rotations within this of angle pi
NEAR_PI = 1e-2             # switch to the symmetric-part axis extraction
ORTHONORMAL_TOL = 1e-9     # rotation validity tolerance (Frobenius)


def hat(x):
    """Skew matrix of x, broadcasting over leading axes: hat(x) @ y = x × y."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (3, 3))
    out[..., 0, 1] = -x[..., 2]
    out[..., 0, 2] = x[..., 1]
    out[..., 1, 0] = x[..., 2]
    out[..., 1, 2] = -x[..., 0]
    out[..., 2, 0] = -x[..., 1]
    out[..., 2, 1] = x[..., 0]
    return out


def vee(m, tol: float = ORTHONORMAL_TOL):
    """Coordinates of a skew-symmetric matrix; rejects asymmetric input."""
    m = np.asarray(m, dtype=float)
    asym = np.abs(m + np.swapaxes(m, -1, -2)).max()
    if asym > tol:
        raise NumericalError(f"vee: input not skew-symmetric (asymmetry {asym:.3e})")
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _vee_unchecked(m):
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def so3_exp(x):
    """Rodrigues exponential map, broadcasting over leading axes.

    Uses a 4th-order Taylor branch below SMALL_ANGLE to avoid 0/0.
    """
    x = np.asarray(x, dtype=float)
    th = np.linalg.norm(x, axis=-1)
    K = hat(x)
    KK = K @ K
    th2 = th * th
    small = th < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - th2 / 6.0 + th2 * th2 / 120.0, np.sin(th) / np.where(small, 1.0, th))
        b = np.where(small, 0.5 - th2 / 24.0 + th2 * th2 / 720.0,
                     (1.0 - np.cos(th)) / np.where(small, 1.0, th2))
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * KK


def so3_log(r):
    """Inverse of so3_exp for a single rotation; angle must be < pi - 1e-9."""
    r = np.asarray(r, dtype=float)
    ensure_rotation(r)
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(c)
    if th >= np.pi - LOG_DOMAIN_MARGIN:
        raise LogBranchError(f"so3_log: rotation angle {th:.12f} within margin of pi")
    if th < SMALL_ANGLE:
        # log(R) ≈ (R - R^T)/2 with a curvature correction
        return _vee_unchecked((r - r.T) / 2.0) * (1.0 + th * th / 6.0)
    if th > np.pi - NEAR_PI:
        # Near pi the antisymmetric part is tiny; recover the axis from the
        # symmetric part and fix its sign from the antisymmetric part.
        s = (r + r.T) / 2.0
        nnt = (s - c * np.eye(3)) / (1.0 - c)
        i = int(np.argmax(np.diag(nnt)))
        n = nnt[:, i] / np.sqrt(max(nnt[i, i], np.finfo(float).tiny))
        w = _vee_unchecked(r - r.T)  # = 2 sin(th) * n
        if np.dot(w, n) < 0.0:
            n = -n
        return th * n
    return th / (2.0 * np.sin(th)) * _vee_unchecked(r - r.T)


def is_rotation(r, tol: float = ORTHONORMAL_TOL) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.isfinite(r).all():
        return False
    if np.linalg.norm(r @ r.T - np.eye(3)) > tol:
        return False
    return abs(np.linalg.det(r) - 1.0) <= tol


def ensure_rotation(r, tol: float = ORTHONORMAL_TOL):
    if not is_rotation(r, tol):
        raise NumericalError("matrix is not a valid rotation within tolerance")
    return np.asarray(r, dtype=float)


def project_rotation(m):
    """Closest rotation in Frobenius norm (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.linalg.det(u @ vt)
    return u @ np.diag([1.0, 1.0, np.sign(d)]) @ vt


def _orthonormalize_step(r):
    """One Newton-Schulz sweep; quadratically contracts small orthogonality drift."""
    return 1.5 * r - 0.5 * (r @ np.swapaxes(r, -1, -2) @ r)


def so3_left_jacobian(x):
    """Left Jacobian J_l of SO(3): exp(hat(x + dx)) ≈ exp(hat(J_l dx)) exp(hat(x))."""
    x = np.asarray(x, dtype=float)
    th = np.linalg.norm(x)
    K = hat(x)
    if th < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    th2 = th * th
    return (np.eye(3) + (1.0 - np.cos(th)) / th2 * K
            + (th - np.sin(th)) / (th2 * th) * (K @ K))


def so3_left_jacobian_inv(x):
    x = np.asarray(x, dtype=float)
    th = np.linalg.norm(x)
    K = hat(x)
    if th < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    cot_term = 1.0 / (th * th) - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th))
    return np.eye(3) - 0.5 * K + cot_term * (K @ K)


@dataclass(frozen=True)
class Pose:
    """Rigid transform T_XY = (R_XY, r_YX^X): rot maps Y-coords to X-coords,
    trans is the position of Y's origin expressed in X."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rot @ other.rot, self.trans + self.rot @ other.trans)

    def inverse(self) -> "Pose":
        rt = self.rot.T
        return Pose(rt, -rt @ self.trans)

    def apply(self, p) -> np.ndarray:
        """Map point coordinates from the Y frame into the X frame."""
        return self.rot @ np.asarray(p, dtype=float) + self.trans

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rot
        m[:3, 3] = self.trans
        return m

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, :3], m[:3, 3])

    def retract(self, xi) -> "Pose":
        """Rotation right-multiplicative exp update, translation additive."""
        xi = np.asarray(xi, dtype=float).reshape(6)
        return Pose(self.rot @ so3_exp(xi[:3]), self.trans + xi[3:])

    def is_valid(self, tol: float = ORTHONORMAL_TOL) -> bool:
        return is_rotation(self.rot, tol) and bool(np.isfinite(self.trans).all())


def pose_compose(t1: Pose, t2: Pose) -> Pose:
    return t1.compose(t2)


def pose_inverse(t: Pose) -> Pose:
    return t.inverse()


def se3_exp(xi) -> Pose:
    """Exponential at identity; xi = [rotation(3); translation(3)]."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    phi, rho = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(t: Pose):
    """Inverse of se3_exp; same angle-pi branch restriction as so3_log."""
    phi = so3_log(t.rot)
    rho = so3_left_jacobian_inv(phi) @ t.trans
    return np.concatenate([phi, rho])


@dataclass(frozen=True)
class State:
    """Smoothed per-keyframe state: relative attitude Q = R_GS, asteroid
    inertial angular rate w (G coords, rad/s), spacecraft position r from the
    G origin (G coords), and inertial relative velocity v (G coords)."""

    Q: np.ndarray
    w: np.ndarray
    r: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        for name in ("w", "r", "v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    def retract(self, dx) -> "State":
        """Right-multiplicative update on Q, additive on the vector blocks."""
        dx = np.asarray(dx, dtype=float).reshape(12)
        return State(self.Q @ so3_exp(dx[0:3]), self.w + dx[3:6],
                     self.r + dx[6:9], self.v + dx[9:12])

    def is_valid(self) -> bool:
        return (is_rotation(self.Q)
                and all(np.isfinite(getattr(self, n)).all() for n in ("w", "r", "v")))


def state_delta(x1: State, x2: State):
    """12-vector manifold error centered at x1, block order (kappa, w, r, v):
    [vee(log(Q1^T Q2)); w2-w1; r2-r1; v2-v1]."""
    kappa = so3_log(x1.Q.T @ x2.Q)
    return np.concatenate([kappa, x2.w - x1.w, x2.r - x1.r, x2.v - x1.v])
