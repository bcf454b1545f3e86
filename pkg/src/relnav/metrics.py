"""Trajectory and map error metrics.

Position errors are resolved in the local-horizontal-local-vertical frame of
the true orbit (radial along the position vector, cross-track along the
orbital angular momentum, along-track completing the triad) and reported in
(along-track, cross-track, radial) order.  Pose errors use the SE(3)
logarithm between the true and estimated body-frame poses.  Landmark map
quality is the distance of each estimated landmark to the nearest
ground-truth vertex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError, NumericalError
from .liegroup import Pose, ensure_rotation, se3_log

BRUTE_FORCE_PAIR_LIMIT = 100_000


def lvlh_frame(r, v) -> np.ndarray:
    """R_AL with columns [l1, l2, l3]: l3 = r_hat, l2 = (r x v)_hat,
    l1 = l2 x l3 (along-track)."""
    r = np.asarray(r, dtype=float).reshape(3)
    v = np.asarray(v, dtype=float).reshape(3)
    nr = np.linalg.norm(r)
    if nr <= 0.0:
        raise DegenerateGeometryError("lvlh_frame: zero position")
    l3 = r / nr
    h = np.cross(r, v)
    nh = np.linalg.norm(h)
    if nh <= 1e-12 * nr * max(np.linalg.norm(v), 1e-300):
        raise DegenerateGeometryError("lvlh_frame: r and v parallel")
    l2 = h / nh
    l1 = np.cross(l2, l3)
    return ensure_rotation(np.column_stack([l1, l2, l3]))


@dataclass(frozen=True)
class TrajectoryRecord:
    t: float
    T_GS: Pose
    w: np.ndarray
    v: np.ndarray
    source: str = "truth"


@dataclass
class ErrorReport:
    t: np.ndarray                  # (N,)
    dr_lvlh: np.ndarray            # (N,3) along-track, cross-track, radial
    pose_err: np.ndarray           # (N,6) SE(3) log [rotation; translation]
    dv_lvlh: np.ndarray            # (N,3)
    dw: np.ndarray                 # (N,3)
    summary: dict = field(default_factory=dict)
    landmark_distances: np.ndarray | None = None

    def component(self, name: str) -> np.ndarray:
        idx = {"along": 0, "cross": 1, "radial": 2}[name]
        return self.dr_lvlh[:, idx]


def _summaries(report: ErrorReport) -> dict:
    out = {}
    comp = {"along": report.dr_lvlh[:, 0], "cross": report.dr_lvlh[:, 1],
            "radial": report.dr_lvlh[:, 2],
            "norm": np.linalg.norm(report.dr_lvlh, axis=1),
            "rot": np.linalg.norm(report.pose_err[:, :3], axis=1),
            "trans": np.linalg.norm(report.pose_err[:, 3:], axis=1),
            "vel": np.linalg.norm(report.dv_lvlh, axis=1),
            "angvel": np.linalg.norm(report.dw, axis=1)}
    for name, x in comp.items():
        out[f"mean_{name}"] = float(np.mean(np.abs(x)))
        out[f"max_{name}"] = float(np.max(np.abs(x)))
        out[f"rmse_{name}"] = float(np.sqrt(np.mean(x * x)))
    return out


def trajectory_errors(truth, est, T_GA: Pose) -> ErrorReport:
    """Per-frame errors of `est` against `truth` (exact timestamp match).

    Estimates are mapped into the body principal-axis frame through the known
    fixed T_GA, position errors resolved in the LVLH frame of the true
    relative orbit, orientation errors via the SE(3) log.
    """
    if len(truth) != len(est):
        raise NumericalError("trajectory_errors: series lengths differ")
    t_t = np.array([rec.t for rec in truth])
    t_e = np.array([rec.t for rec in est])
    if not np.array_equal(t_t, t_e):
        raise NumericalError("trajectory_errors: timestamps do not match exactly")
    if np.any(np.diff(t_t) <= 0.0):
        raise NumericalError("trajectory_errors: timestamps must strictly increase")

    R_GA, c = T_GA.rot, T_GA.trans
    T_AG = T_GA.inverse()
    n = len(truth)
    dr = np.empty((n, 3))
    dv = np.empty((n, 3))
    dw = np.empty((n, 3))
    perr = np.empty((n, 6))
    for k in range(n):
        tr, es = truth[k], est[k]
        r_t = R_GA.T @ (tr.T_GS.trans - c)
        r_e = R_GA.T @ (es.T_GS.trans - c)
        v_t = R_GA.T @ (tr.v - np.cross(tr.w, c))
        v_e = R_GA.T @ (es.v - np.cross(es.w, c))
        R_AL = lvlh_frame(r_t, v_t)
        dr[k] = R_AL.T @ (r_e - r_t)
        dv[k] = R_AL.T @ (v_e - v_t)
        dw[k] = es.w - tr.w
        T_AS_t = T_AG.compose(tr.T_GS)
        T_AS_e = T_AG.compose(es.T_GS)
        perr[k] = se3_log(T_AS_t.inverse().compose(T_AS_e))
    # columns are (along-track, cross-track, radial) by the R_AL column order
    report = ErrorReport(t=t_t, dr_lvlh=dr, pose_err=perr, dv_lvlh=dv, dw=dw)
    report.summary = _summaries(report)
    return report


def _brute_force_min_dist(est, verts, chunk: int = 256) -> np.ndarray:
    out = np.empty(len(est))
    for i0 in range(0, len(est), chunk):
        blk = est[i0:i0 + chunk]
        d2 = ((blk[:, None, :] - verts[None, :, :]) ** 2).sum(axis=2)
        out[i0:i0 + chunk] = np.sqrt(d2.min(axis=1))
    return out


def landmark_distance(est_landmarks, truth_vertices, bins: int = 20):
    """Distance of every estimated landmark to its nearest truth vertex.

    Brute force (the oracle path) up to 1e5 pairs; above that a KD-tree
    accelerates the same exact nearest-neighbor query.  Returns
    (distances, (hist_counts, hist_edges)).
    """
    est = np.asarray(est_landmarks, dtype=float).reshape(-1, 3)
    verts = np.asarray(truth_vertices, dtype=float).reshape(-1, 3)
    if est.size == 0 or verts.size == 0:
        raise NumericalError("landmark_distance: empty input set")
    if est.shape[0] * verts.shape[0] <= BRUTE_FORCE_PAIR_LIMIT:
        d = _brute_force_min_dist(est, verts)
    else:
        tree = cKDTree(verts)
        d, _ = tree.query(est, k=1)
    hist = np.histogram(d, bins=bins)
    return d, hist
