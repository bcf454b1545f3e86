"""Factor-graph container and sparse Levenberg-Marquardt smoothing with
on-manifold updates.

Variables are keyed by (kind, index) with kinds PoseT / AngVelW / VelV /
Landmark.  The normal equations are damped with lambda*I in the whitened
tangent space and solved by eliminating the landmark block first (its Hessian
is exactly 3x3 block diagonal because no factor couples two landmarks), then
a dense Cholesky of the reduced camera/state system.

Incremental operation is a warm-started re-solve of the grown graph; an
optional fixed-lag window freezes frame-indexed variables older than the
window.  All evaluation orders are deterministic, so identical inputs produce
identical iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import GraphError, SolverError
from .factors import (FACTOR_ARITY, HUBER_DELTA, Factor, PriorVec3Factor,
                      ProjectionFactor, RelDynFactor, huber_weight, numeric_jacobian)
from .liegroup import Pose, so3_exp

POSE = "PoseT"
ANGVEL = "AngVelW"
VEL = "VelV"
LANDMARK = "Landmark"
_KIND_RANK = {POSE: 0, ANGVEL: 1, VEL: 2}


class VariableKey(NamedTuple):
    kind: str
    index: int


def pose_key(i: int) -> VariableKey:
    return VariableKey(POSE, i)


def angvel_key(i: int) -> VariableKey:
    return VariableKey(ANGVEL, i)


def vel_key(i: int) -> VariableKey:
    return VariableKey(VEL, i)


def landmark_key(i: int) -> VariableKey:
    return VariableKey(LANDMARK, i)


class Values:
    """Assignment of variable keys to Pose or 3-vector values."""

    def __init__(self, data=None):
        self._data = dict(data) if data else {}

    def __getitem__(self, key):
        return self._data[key]

    def __setitem__(self, key, value):
        if isinstance(value, Pose):
            self._data[key] = value
        else:
            self._data[key] = np.asarray(value, dtype=float).reshape(3)

    def __contains__(self, key):
        return key in self._data

    def __len__(self):
        return len(self._data)

    def keys(self):
        return self._data.keys()

    def items(self):
        return self._data.items()

    def copy(self) -> "Values":
        return Values(self._data)

    def update(self, other: "Values"):
        self._data.update(other._data)

    def as_dict(self):
        return self._data


class Graph:
    """Bipartite factor/variable container; grows monotonically."""

    def __init__(self):
        self.factors: list[Factor] = []
        self.variables: set[VariableKey] = set()
        self.guesses = Values()
        self._layout_cache = None  # invalidated on insert

    def insert(self, new_factors, new_values: Values | None = None) -> "Graph":
        new_values = new_values or Values()
        for key in new_values.keys():
            if key in self.variables:
                raise GraphError(f"duplicate variable key {key}")
        known = self.variables | set(new_values.keys())
        for f in new_factors:
            arity = FACTOR_ARITY.get(f.kind)
            if arity is not None and len(f.variables) != arity:
                raise GraphError(f"{f.kind} factor has {len(f.variables)} keys, expected {arity}")
            for key in f.variables:
                if key not in known:
                    raise GraphError(f"factor references missing variable {key}")
        for key, val in new_values.items():
            self.variables.add(key)
            self.guesses[key] = val
        self.factors.extend(new_factors)
        self._layout_cache = None
        return self


def graph_insert(g: Graph, new_factors, new_values: Values | None = None) -> Graph:
    return g.insert(new_factors, new_values)


@dataclass
class OptimizerConfig:
    max_iters: int = 100
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e12
    abs_tol: float = 1e-10        # on the update norm
    rel_tol: float = 1e-8         # on |delta cost| / cost
    fd_step: float = 1e-6
    jacobian_mode: str = "numeric"  # "numeric" (canonical) or "analytic" where available
    verbose: bool = False


@dataclass
class SolveStats:
    iterations: int = 0
    accepted_steps: int = 0
    cost_trace: list = field(default_factory=list)
    initial_cost: float = 0.0
    final_cost: float = 0.0
    termination: str = ""
    invalid_projections: int = 0
    cost_by_kind: dict = field(default_factory=dict)


class _Layout:
    """Deterministic column layout: frame variables first, landmarks last."""

    def __init__(self, keys, frozen=frozenset()):
        nonland = sorted([k for k in keys if k.kind != LANDMARK and k not in frozen],
                         key=lambda k: (k.index, _KIND_RANK[k.kind]))
        lands = sorted([k for k in keys if k.kind == LANDMARK and k not in frozen],
                       key=lambda k: k.index)
        self.keys = nonland + lands
        self.offsets = {}
        off = 0
        for k in nonland:
            self.offsets[k] = off
            off += 6 if k.kind == POSE else 3
        self.n_nonland = off
        for k in lands:
            self.offsets[k] = off
            off += 3
        self.n_cols = off
        self.n_landmarks = len(lands)
        self.frozen = frozenset(frozen)

    def dim(self, key) -> int:
        return 6 if key.kind == POSE else 3


def _retract_values(values: Values, delta, layout: _Layout) -> Values:
    out = values.copy()
    for key in layout.keys:
        off = layout.offsets[key]
        d = layout.dim(key)
        step = delta[off:off + d]
        cur = values[key]
        if key.kind == POSE:
            out[key] = cur.retract(step)
        else:
            out[key] = cur + step
    return out


class _Linearization:
    def __init__(self):
        self.rows = []      # triplet buffers
        self.cols = []
        self.data = []
        self.resid = []
        self.row_off = 0
        self.cost = 0.0
        self.kind_cost = {}
        self.invalid_idx = set()  # factors inactive at this linearization point
        self.frozen_chol = {}     # factor index -> Cholesky factor of its covariance

    def add_block(self, res_w, jac_w, layout):
        m = res_w.size
        self.resid.append(res_w)
        for key, J in jac_w.items():
            if key in layout.frozen or key not in layout.offsets:
                continue
            off = layout.offsets[key]
            d = J.shape[1]
            self.rows.append(np.repeat(np.arange(self.row_off, self.row_off + m), d))
            self.cols.append(np.tile(np.arange(off, off + d), m))
            self.data.append(np.asarray(J, dtype=float).ravel())
        self.row_off += m

    def finish(self, n_cols):
        if self.rows:
            rows = np.concatenate(self.rows)
            cols = np.concatenate(self.cols)
            data = np.concatenate(self.data)
        else:
            rows = cols = np.zeros(0, dtype=int)
            data = np.zeros(0)
        J = sp.csr_matrix((data, (rows, cols)), shape=(self.row_off, n_cols))
        r = np.concatenate(self.resid) if self.resid else np.zeros(0)
        return J, r


def _whiten_block(res, Sigma, J=None):
    Lc = np.linalg.cholesky(Sigma)
    res_w = solve_triangular(Lc, res, lower=True)
    if J is None:
        return res_w, Lc
    Jw = {k: solve_triangular(Lc, v, lower=True) for k, v in J.items()}
    return res_w, Jw, Lc


def _projection_arrays(factors, values):
    R = np.stack([values[f.variables[0]].rot for f in factors])
    t = np.stack([values[f.variables[0]].trans for f in factors])
    ell = np.stack([values[f.variables[1]] for f in factors])
    y = np.stack([f.y_meas for f in factors])
    return R, t, ell, y


def _projection_batch_res(K, R_SC, t_SC, y, Rb, tb, eb):
    R_GC = Rb @ R_SC
    cam = tb + np.einsum("nij,j->ni", Rb, t_SC)
    r_C = np.einsum("nji,nj->ni", R_GC, eb - cam)
    z = r_C[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * r_C[:, 0] / z + K.cx
        v = K.fy * r_C[:, 1] / z + K.cy
    return y - np.stack([u, v], axis=1), z


def _linearize_projection_batch(factors, indices, values, cfg, lin, layout):
    """Vectorized residuals + central-difference Jacobians for one camera
    group (shared intrinsics/extrinsics/sigma)."""
    f0 = factors[0]
    K, T_SC = f0.K, f0.T_SC
    n = len(factors)
    R, t, ell, y = _projection_arrays(factors, values)
    R_SC, t_SC = T_SC.rot, T_SC.trans

    def batch_res(Rb, tb, eb):
        return _projection_batch_res(K, R_SC, t_SC, y, Rb, tb, eb)

    res0, z0 = batch_res(R, t, ell)
    valid = z0 > f0.depth_min

    if cfg.jacobian_mode == "analytic":
        u_s = np.einsum("nji,nj->ni", R, ell - t)
        r_C = np.einsum("ji,nj->ni", R_SC, u_s - t_SC)
        z = r_C[:, 2]
        Ppx = np.zeros((n, 2, 3))
        Ppx[:, 0, 0] = K.fx / z
        Ppx[:, 0, 2] = -K.fx * r_C[:, 0] / z**2
        Ppx[:, 1, 1] = K.fy / z
        Ppx[:, 1, 2] = -K.fy * r_C[:, 1] / z**2
        hat_u = np.zeros((n, 3, 3))
        hat_u[:, 0, 1] = -u_s[:, 2]
        hat_u[:, 0, 2] = u_s[:, 1]
        hat_u[:, 1, 0] = u_s[:, 2]
        hat_u[:, 1, 2] = -u_s[:, 0]
        hat_u[:, 2, 0] = -u_s[:, 1]
        hat_u[:, 2, 1] = u_s[:, 0]
        R_GC = R @ R_SC
        J_kappa = -np.einsum("nij,jk,nkl->nil", Ppx, R_SC.T, hat_u)
        J_trans = np.einsum("nij,nkj->nik", Ppx, R_GC)  # -Ppx @ (-R_GC^T)
        J_land = -np.einsum("nij,nkj->nik", Ppx, R_GC)
        Jfull = np.concatenate([J_kappa, J_trans, J_land], axis=2)
    else:
        h = cfg.fd_step
        Jfull = np.empty((n, 2, 9))
        for d in range(9):
            if d < 3:
                e = np.zeros(3)
                e[d] = h
                dR = so3_exp(e)
                rp, zp = batch_res(R @ dR, t, ell)
                rm, zm = batch_res(R @ dR.T, t, ell)
            elif d < 6:
                dt = np.zeros(3)
                dt[d - 3] = h
                rp, zp = batch_res(R, t + dt, ell)
                rm, zm = batch_res(R, t - dt, ell)
            else:
                de = np.zeros(3)
                de[d - 6] = h
                rp, zp = batch_res(R, t, ell + de)
                rm, zm = batch_res(R, t, ell - de)
            valid &= (zp > f0.depth_min) & (zm > f0.depth_min)
            Jfull[:, :, d] = (rp - rm) / (2.0 * h)

    sigma = f0.sigma_px
    for i, f in enumerate(factors):
        if not valid[i]:
            lin.invalid_idx.add(indices[i])
            continue
        res_w = res0[i] / sigma
        Jp = Jfull[i, :, 0:6] / sigma
        Jl = Jfull[i, :, 6:9] / sigma
        scale = 1.0
        if f.robust:
            # rows scaled so the weighted square equals the Huber objective
            scale = huber_weight(float(np.linalg.norm(res_w)))
        c = float(res_w @ res_w) * scale * scale
        lin.cost += c
        lin.kind_cost["Projection"] = lin.kind_cost.get("Projection", 0.0) + c
        lin.add_block(res_w * scale, {f.variables[0]: Jp * scale,
                                      f.variables[1]: Jl * scale}, layout)


def _linearize(graph: Graph, values: Values, cfg: OptimizerConfig, layout: _Layout):
    lin = _Linearization()
    proj_groups: dict[tuple, tuple[list, list]] = {}
    for idx, f in enumerate(graph.factors):
        if isinstance(f, ProjectionFactor):
            gkey = (id(f.K), id(f.T_SC), f.sigma_px, f.robust)
            proj_groups.setdefault(gkey, ([], []))[0].append(f)
            proj_groups[gkey][1].append(idx)
            continue
        if isinstance(f, RelDynFactor):
            res, jac = f.linearize_fd(values, cfg.fd_step)
            Sigma = f.covariance(values)
            res_w, jac_w, Lc = _whiten_block(res, Sigma, jac)
            lin.frozen_chol[idx] = Lc
        else:
            res = f.residual(values)
            if isinstance(f, PriorVec3Factor):
                jac = f.analytic_jacobian(values)
            else:
                jac = numeric_jacobian(f, values, cfg.fd_step)
            Sigma = f.covariance(values)
            res_w, jac_w, Lc = _whiten_block(res, Sigma, jac)
        c = float(res_w @ res_w)
        lin.cost += c
        lin.kind_cost[f.kind] = lin.kind_cost.get(f.kind, 0.0) + c
        lin.add_block(res_w, jac_w, layout)
    for gkey, (fs, idxs) in proj_groups.items():
        _linearize_projection_batch(fs, idxs, values, cfg, lin, layout)
    J, r = lin.finish(layout.n_cols)
    return J, r, lin


def _evaluate_cost(graph: Graph, values: Values, frozen_chol=None,
                   skip_idx=frozenset(), invalid_action: str = "skip") -> tuple[float, dict]:
    """Cost at `values`.

    frozen_chol holds Cholesky factors from the last linearization for
    state-dependent covariances (absent entries are recomputed at `values`).
    Factors in skip_idx contribute nothing; any other newly invalid
    projection either contributes nothing ("skip") or vetoes the candidate
    ("reject" -> +inf), which keeps step comparisons consistent with the
    factor set that was actually linearized.
    """
    frozen_chol = frozen_chol or {}
    total = 0.0
    by_kind: dict[str, float] = {}
    proj_groups: dict[tuple, list] = {}
    for idx, f in enumerate(graph.factors):
        if idx in skip_idx:
            continue
        if isinstance(f, ProjectionFactor):
            gkey = (id(f.K), id(f.T_SC), f.sigma_px, f.robust)
            proj_groups.setdefault(gkey, []).append(f)
            continue
        res = f.residual(values)
        if idx in frozen_chol:
            res_w = solve_triangular(frozen_chol[idx], res, lower=True)
        else:
            res_w, _ = _whiten_block(res, f.covariance(values))
        c = float(res_w @ res_w)
        total += c
        by_kind[f.kind] = by_kind.get(f.kind, 0.0) + c
    for (_, _, sigma, robust), fs in proj_groups.items():
        f0 = fs[0]
        R, t, ell, y = _projection_arrays(fs, values)
        res, z = _projection_batch_res(f0.K, f0.T_SC.rot, f0.T_SC.trans, y, R, t, ell)
        valid = z > f0.depth_min
        if invalid_action == "reject" and not valid.all():
            return np.inf, by_kind
        res_w2 = (res[valid] ** 2).sum(axis=1) / sigma**2
        if robust:
            nrm = np.sqrt(res_w2)
            big = nrm > HUBER_DELTA
            res_w2[big] = HUBER_DELTA * (2.0 * nrm[big] - HUBER_DELTA)
        c = float(res_w2.sum())
        total += c
        by_kind["Projection"] = by_kind.get("Projection", 0.0) + c
    return total, by_kind


def _extract_landmark_blocks(H, n_p, n_l):
    """3x3 diagonal blocks of the landmark-landmark part of H (exactly block
    diagonal: no factor couples two landmarks)."""
    blocks = np.zeros((n_l, 3, 3))
    Hll = H[n_p:, n_p:].tocoo()
    bi = Hll.row // 3
    ri = Hll.row % 3
    ci = Hll.col % 3
    same = (Hll.col // 3) == bi
    np.add.at(blocks, (bi[same], ri[same], ci[same]), Hll.data[same])
    return blocks


def _solve_damped(H, b, lam, n_p, n_l):
    """(H + lam I) delta = b via landmark Schur elimination + dense Cholesky.

    Raises np.linalg.LinAlgError if the damped reduced system is not positive
    definite.
    """
    n = H.shape[0]
    if n_l == 0:
        Hd = H.toarray() + lam * np.eye(n)
        cf = cho_factor(Hd, lower=True)
        return cho_solve(cf, b)
    blocks = _extract_landmark_blocks(H, n_p, n_l)
    blocks[:, np.arange(3), np.arange(3)] += lam
    binv = np.linalg.inv(blocks)
    Hpl = H[:n_p, n_p:].toarray().reshape(n_p, n_l, 3)
    bp = b[:n_p]
    bl = b[n_p:].reshape(n_l, 3)
    X = np.einsum("pnk,nkl->pnl", Hpl, binv)
    S = H[:n_p, :n_p].toarray() + lam * np.eye(n_p) - np.einsum("pnl,qnl->pq", X, Hpl)
    rhs = bp - np.einsum("pnl,nl->p", X, bl)
    cf = cho_factor(S, lower=True)
    dp = cho_solve(cf, rhs)
    dl = np.einsum("nkl,nl->nk", binv, bl - np.einsum("pnk,p->nk", Hpl, dp))
    return np.concatenate([dp, dl.ravel()])


def optimize(graph: Graph, init: Values | None = None,
             cfg: OptimizerConfig | None = None,
             frozen=frozenset()) -> tuple[Values, SolveStats]:
    """Levenberg-Marquardt over the whole graph.

    Damping inflates by lambda_up on rejected steps and deflates on accepted
    ones; accepted costs are compared under the step's frozen noise models,
    so the accepted sequence is non-increasing by construction (asserted).
    """
    cfg = cfg or OptimizerConfig()
    values = (init or graph.guesses).copy()
    for key in graph.variables:
        if key not in values:
            raise GraphError(f"initial values missing variable {key}")
    layout = _Layout(graph.variables, frozen)
    stats = SolveStats()
    if layout.n_cols == 0 or not graph.factors:
        cost, by_kind = _evaluate_cost(graph, values)
        stats.final_cost = stats.initial_cost = cost
        stats.cost_by_kind = by_kind
        stats.termination = "empty"
        return values, stats

    J, r, lin = _linearize(graph, values, cfg, layout)
    cost = lin.cost
    stats.initial_cost = cost
    stats.cost_trace.append(cost)
    stats.invalid_projections = len(lin.invalid_idx)
    if not np.isfinite(cost):
        raise SolverError("initial cost is not finite")

    lam = cfg.lambda0
    n_p, n_l = layout.n_nonland, layout.n_landmarks
    termination = "max_iters"
    H = (J.T @ J).tocsr()
    g = J.T @ r
    for it in range(cfg.max_iters):
        stats.iterations = it + 1
        if np.abs(g).max() < 1e-15:
            termination = "gradient"
            break
        accepted = False
        while True:
            try:
                delta = _solve_damped(H, -g, lam, n_p, n_l)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                if lam > cfg.lambda_max:
                    raise SolverError(
                        f"normal equations indefinite at lambda={lam:.3e} "
                        f"(iteration {it}, cost {cost:.6e})")
                continue
            candidate = _retract_values(values, delta, layout)
            new_cost, _ = _evaluate_cost(graph, candidate, lin.frozen_chol,
                                         lin.invalid_idx, invalid_action="reject")
            if new_cost < cost:
                assert new_cost <= cost, "accepted step must not increase cost"
                accepted = True
                break
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                break
        if not accepted:
            termination = "lambda_limit"
            break
        values = candidate
        stats.accepted_steps += 1
        lam = max(lam / cfg.lambda_down, 1e-15)
        prev_cost = cost
        J, r, lin = _linearize(graph, values, cfg, layout)
        cost = lin.cost
        stats.cost_trace.append(cost)
        stats.invalid_projections = len(lin.invalid_idx)
        H = (J.T @ J).tocsr()
        g = J.T @ r
        if np.linalg.norm(delta) < cfg.abs_tol:
            termination = "update_norm"
            break
        if prev_cost > 0 and abs(prev_cost - new_cost) / max(prev_cost, 1e-300) < cfg.rel_tol:
            termination = "cost_change"
            break
        if cfg.verbose:
            print(f"  lm iter {it}: cost {cost:.6e} lambda {lam:.2e}")
    stats.termination = termination
    stats.final_cost, stats.cost_by_kind = _evaluate_cost(graph, values, lin.frozen_chol)
    return values, stats


def incremental_update(graph: Graph, new_factors, new_values: Values,
                       prev_solution: Values | None,
                       cfg: OptimizerConfig | None = None,
                       fixed_lag: int | None = None) -> tuple[Values, SolveStats]:
    """Insert and re-solve with a warm start.

    New variables start from the supplied guesses, old ones from the previous
    solution.  With fixed_lag = N, frame-indexed variables older than the
    newest frame minus N are frozen (landmarks stay free).
    """
    graph.insert(new_factors, new_values)
    init = graph.guesses.copy()
    if prev_solution is not None:
        for key in graph.variables:
            if key in prev_solution:
                init[key] = prev_solution[key]
    for key, val in new_values.items():
        init[key] = val
    frozen = frozenset()
    if fixed_lag is not None:
        frames = [k.index for k in graph.variables if k.kind == POSE]
        if frames:
            cutoff = max(frames) - int(fixed_lag)
            frozen = frozenset(k for k in graph.variables
                               if k.kind in _KIND_RANK and k.index <= cutoff)
    return optimize(graph, init, cfg, frozen=frozen)


def marginal_cost_report(graph: Graph, values: Values) -> dict:
    """Whitened squared residual totals by factor kind; 'total' matches the
    optimizer's reported cost at the same values."""
    total, by_kind = _evaluate_cost(graph, values)
    report = dict(by_kind)
    report["total"] = total
    return report
