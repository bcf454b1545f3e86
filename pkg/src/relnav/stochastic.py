"""Process-noise discretization, the noise-controllability rank test, and
Wiener-increment sampling for simulation.

The four noise channels enter through the input tuple (attitude reference,
body rate, external torque, specific force); each channel's strength is a
3x3 lower-triangular factor L_* with W_* = L_* L_*^T as the white-noise
intensity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import NumericalError


def _check_lower_cholesky(L, name: str):
    L = np.asarray(L, dtype=float)
    if L.shape != (3, 3) or not np.isfinite(L).all():
        raise NumericalError(f"{name}: expected finite 3x3 factor")
    if np.abs(np.triu(L, 1)).max() > 0.0:
        raise NumericalError(f"{name}: factor must be lower-triangular")
    if np.diag(L).min() < 0.0:
        raise NumericalError(f"{name}: factor diagonal must be nonnegative")
    return L


@dataclass(frozen=True)
class NoiseSpec:
    """Lower-triangular Cholesky factors of the channel intensities
    (W_R, W_s, W_tau, W_f); units follow the channel per sqrt(s)."""

    L_R: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    L_s: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    L_tau: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    L_f: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        for name in ("L_R", "L_s", "L_tau", "L_f"):
            object.__setattr__(self, name, _check_lower_cholesky(getattr(self, name), name))

    @staticmethod
    def from_sigmas(sigma_R=0.0, sigma_s=0.0, sigma_tau=0.0, sigma_f=0.0) -> "NoiseSpec":
        """Isotropic channels: L_* = sigma_* I."""
        mk = lambda s: float(s) * np.eye(3)
        return NoiseSpec(mk(sigma_R), mk(sigma_s), mk(sigma_tau), mk(sigma_f))


@dataclass(frozen=True)
class DiscreteNoise:
    """Discretized linear propagation over one interval: state-transition
    matrix Phi and process-noise covariance P."""

    Phi: np.ndarray
    P: np.ndarray
    dt: float


def symmetrize(P):
    return (P + P.T) / 2.0


def regularize_covariance(P, floor_scale: float = 1e-12):
    """Clamp eigenvalues below floor_scale*trace to that floor.

    Keeps the discrete-noise Gaussian non-degenerate ahead of whitening even
    when a channel is switched off.
    """
    P = symmetrize(np.asarray(P, dtype=float))
    w, V = np.linalg.eigh(P)
    floor = floor_scale * max(np.trace(P), 0.0)
    if floor <= 0.0:
        floor = floor_scale
    if w.min() >= floor:
        return P
    w = np.maximum(w, floor)
    return symmetrize(V @ np.diag(w) @ V.T)


def van_loan(F, L, dt: float, method: str = "van_loan") -> DiscreteNoise:
    """Discretize (F, L) over dt.

    method="van_loan" (canonical): exponentiate the 2n x 2n block matrix
    [[F, LL^T], [0, -F^T]]*dt and extract Phi (top-left) and Gamma
    (top-right); P = Gamma Phi^T, symmetrized.

    method="integral": the simpler piecewise-constant form P = LL^T*dt with
    Phi = expm(F*dt), kept for comparison runs.
    """
    F = np.asarray(F, dtype=float)
    L = np.asarray(L, dtype=float)
    n = F.shape[0]
    if F.shape != (n, n) or L.shape[0] != n:
        raise NumericalError("van_loan: F must be square and L row-conformal")
    if dt <= 0.0 or not np.isfinite(dt):
        raise NumericalError("van_loan: dt must be positive and finite")
    if not (np.isfinite(F).all() and np.isfinite(L).all()):
        raise NumericalError("van_loan: non-finite inputs")

    LLT = L @ L.T
    if method == "integral":
        Phi = expm(F * dt)
        P = symmetrize(LLT * dt)
    elif method == "van_loan":
        big = np.zeros((2 * n, 2 * n))
        big[:n, :n] = F
        big[:n, n:] = LLT
        big[n:, n:] = -F.T
        E = expm(big * dt)
        if not np.isfinite(E).all():
            raise NumericalError("van_loan: matrix exponential overflowed")
        Phi = E[:n, :n]
        Gamma = E[:n, n:]
        P = symmetrize(Gamma @ Phi.T)
    else:
        raise NumericalError(f"van_loan: unknown method {method!r}")
    if not np.isfinite(Phi).all():
        raise NumericalError("van_loan: non-finite state-transition matrix")
    return DiscreteNoise(Phi=Phi, P=P, dt=float(dt))


def pbh_rank_test(F, L):
    """Noise-controllability (smoothability) test.

    For each eigenvalue lambda of F, ranks [F - lambda I, L] by SVD with
    tolerance sigma_max * n * eps * 1e3.  The pair is smoothable iff every
    eigenvalue passes at full rank.
    Returns dict with keys: smoothable (bool), deficient_eigenvalues (list),
    ranks (list of (eigenvalue, rank)).
    """
    F = np.asarray(F, dtype=float)
    L = np.asarray(L, dtype=float)
    n = F.shape[0]
    eigs = np.linalg.eigvals(F)
    ranks = []
    deficient = []
    for lam in eigs:
        M = np.hstack([F - lam * np.eye(n), L]).astype(complex)
        s = np.linalg.svd(M, compute_uv=False)
        tol = s[0] * n * np.finfo(float).eps * 1e3 if s[0] > 0 else np.finfo(float).eps
        rank = int((s > tol).sum())
        ranks.append((lam, rank))
        if rank < n:
            deficient.append(lam)
    return {
        "smoothable": len(deficient) == 0,
        "deficient_eigenvalues": deficient,
        "ranks": ranks,
    }


def sample_increments(noise: NoiseSpec, dt: float, rng: np.random.Generator):
    """Wiener increments over dt for the four channels, E[de de^T] = W dt.

    Draw order is fixed (R, s, tau, f) so a seeded generator reproduces the
    same stream regardless of caller.
    """
    if dt <= 0.0:
        raise NumericalError("sample_increments: dt must be positive")
    sq = np.sqrt(dt)
    de_R = noise.L_R @ rng.standard_normal(3) * sq
    de_s = noise.L_s @ rng.standard_normal(3) * sq
    de_tau = noise.L_tau @ rng.standard_normal(3) * sq
    de_f = noise.L_f @ rng.standard_normal(3) * sq
    return de_R, de_s, de_tau, de_f
