"""End-to-end pipeline: simulate -> solve -> evaluate -> report.

All artifacts are plain CSV/JSON with fixed schemas (documented in the
README) and full-precision floats; identical configuration and seed produce
byte-identical files.  Every run directory carries meta.json with the config
hash and seed.

Modes
-----
simulate   world generation: truth trajectory, observations, measured inputs,
           landmarks, initialization measurements.
solve      front-end + smoothing over the simulated artifacts, with or
           without the dynamics-prior factors (``reldyn``).
evaluate   LVLH trajectory errors and landmark map distances.
report     summary CSV + static PNG plots of the error time histories.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import config_hash, load_scenario
from .errors import ConfigError, NumericalError
from .integrator import SampledInputs
from .liegroup import Pose, State
from .metrics import ErrorReport, TrajectoryRecord, landmark_distance, trajectory_errors
from .simfront import (PriorDraws, ReferenceTrajectory, Scenario, World,
                       build_session, build_world, frame_descriptor)
from .solver import (Graph, OptimizerConfig, Values, angvel_key,
                     incremental_update, marginal_cost_report, optimize,
                     pose_key, vel_key)

FLOAT_FMT = "%.17g"

TRAJECTORY_HEADER = ("t,r00,r01,r02,r10,r11,r12,r20,r21,r22,"
                     "rx,ry,rz,wx,wy,wz,vx,vy,vz")
OBSERVATIONS_HEADER = "frame,landmark,u,v,outlier"
INPUTS_HEADER = ("t,R00,R01,R02,R10,R11,R12,R20,R21,R22,"
                 "sx,sy,sz,fx,fy,fz")
LANDMARKS_TRUTH_HEADER = "id,x,y,z,nx,ny,nz"
LANDMARKS_EST_HEADER = "id,x,y,z"
ERRORS_HEADER = ("frame,t,dr_along,dr_cross,dr_radial,"
                 "rot_x,rot_y,rot_z,tr_x,tr_y,tr_z,"
                 "dv_along,dv_cross,dv_radial,dw_x,dw_y,dw_z")


def _fmt(x: float) -> str:
    return FLOAT_FMT % x


def _write_csv(path: Path, header: str, rows):
    lines = [header]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _read_csv(path: Path, header: str) -> np.ndarray:
    text = path.read_text().strip().split("\n")
    if text[0] != header:
        raise NumericalError(f"{path.name}: unexpected header {text[0]!r}")
    if len(text) == 1:
        return np.zeros((0, len(header.split(","))))
    return np.array([[float(v) for v in line.split(",")] for line in text[1:]])


def _pose_to_list(T: Pose):
    return {"rot": [float(v) for v in T.rot.ravel()],
            "trans": [float(v) for v in T.trans]}


def _pose_from_dict(d) -> Pose:
    return Pose(np.asarray(d["rot"], dtype=float).reshape(3, 3),
                np.asarray(d["trans"], dtype=float))


def _state_row(t: float, x: State):
    return [float(t), *[float(v) for v in x.Q.ravel()],
            *[float(v) for v in x.r], *[float(v) for v in x.w],
            *[float(v) for v in x.v]]


def _records_from_rows(rows, source: str):
    recs = []
    for row in rows:
        Q = row[1:10].reshape(3, 3)
        recs.append(TrajectoryRecord(t=float(row[0]), T_GS=Pose(Q, row[10:13]),
                                     w=row[13:16], v=row[16:19], source=source))
    return recs


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def write_simulation(world: World, out: Path, meta_extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    s = world.scenario
    ref = world.ref
    _write_csv(out / "truth_trajectory.csv", TRAJECTORY_HEADER,
               [_state_row(t, x) for t, x in zip(ref.times, ref.states)])
    obs_rows = []
    for frame_obs in world.observations:
        for o in frame_obs:
            obs_rows.append([o.frame, o.landmark, float(o.y[0]), float(o.y[1]),
                             int(o.is_outlier)])
    _write_csv(out / "observations.csv", OBSERVATIONS_HEADER, obs_rows)
    st = ref.stream
    _write_csv(out / "inputs.csv", INPUTS_HEADER,
               [[float(st.times[i]), *[float(v) for v in st.R[i].ravel()],
                 *[float(v) for v in st.s[i]], *[float(v) for v in st.f[i]]]
                for i in range(st.times.size)])
    _write_csv(out / "landmarks_truth.csv", LANDMARKS_TRUTH_HEADER,
               [[lm.id, *[float(v) for v in lm.pos_G], *[float(v) for v in lm.normal_G]]
                for lm in world.landmarks])
    priors = {
        "T0_meas": _pose_to_list(world.priors.T0_meas),
        "T1_meas": _pose_to_list(world.priors.T1_meas),
        "w0_mean": [float(v) for v in world.priors.w0_mean],
        "v0_mean": [float(v) for v in world.priors.v0_mean],
    }
    (out / "priors.json").write_text(json.dumps(priors, sort_keys=True, indent=1))
    meta = {
        "name": s.name,
        "seed": s.seed,
        "T_GA": _pose_to_list(ref.T_GA),
        "sun_dir_I": [float(v) for v in ref.sun_dir_I],
        "n_frames": s.schedule.n_frames,
    }
    meta.update(meta_extra or {})
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_session_world(scenario: Scenario, out: Path) -> World:
    """Rebuild the front-end inputs from simulate artifacts (no truth state
    or landmark positions are exposed to the session)."""
    meta = json.loads((out / "meta.json").read_text())
    rows = _read_csv(out / "inputs.csv", INPUTS_HEADER)
    stream = SampledInputs(rows[:, 0], rows[:, 1:10].reshape(-1, 3, 3),
                           rows[:, 10:13], rows[:, 13:16])
    obs_rows = _read_csv(out / "observations.csv", OBSERVATIONS_HEADER)
    observations = [[] for _ in range(scenario.schedule.n_frames)]
    from .simfront import Observation
    for row in obs_rows:
        o = Observation(frame=int(row[0]), landmark=int(row[1]),
                        y=row[2:4].copy(), is_outlier=bool(row[4]))
        observations[o.frame].append(o)
    descriptors = np.stack([frame_descriptor(obs, scenario.loop.descriptor_bins)
                            for obs in observations]) \
        if scenario.schedule.n_frames else np.zeros((0, scenario.loop.descriptor_bins))
    pr = json.loads((out / "priors.json").read_text())
    priors = PriorDraws(T0_meas=_pose_from_dict(pr["T0_meas"]),
                        T1_meas=_pose_from_dict(pr["T1_meas"]),
                        w0_mean=np.asarray(pr["w0_mean"], dtype=float),
                        v0_mean=np.asarray(pr["v0_mean"], dtype=float))
    ref = ReferenceTrajectory(times=scenario.schedule.times(), states=[],
                              R_IS=np.zeros((0, 3, 3)), R_IG=np.zeros((0, 3, 3)),
                              stream=stream, T_GA=_pose_from_dict(meta["T_GA"]),
                              R_IG0=scenario.R_IG0(),
                              sun_dir_I=np.asarray(meta["sun_dir_I"], dtype=float))
    return World(scenario=scenario, landmarks=[], ref=ref,
                 observations=observations, descriptors=descriptors, priors=priors)


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def run_solve(world: World, include_reldyn: bool = True,
              fixed_lag: int | None = None, opt_cfg: OptimizerConfig | None = None):
    """Drive the session per the configured strategy; returns
    (values, graph, stats_list)."""
    s = world.scenario
    strategy = s.solve.strategy
    opt_cfg = opt_cfg or OptimizerConfig()
    graph = Graph()
    stats_all = []
    if strategy == "batch":
        for bundle in build_session(world, include_reldyn):
            graph.insert(bundle.new_factors, bundle.new_values)
        values, stats = optimize(graph, None, opt_cfg)
        stats_all.append(stats)
    else:
        gen = build_session(world, include_reldyn)
        values = None
        try:
            bundle = next(gen)
            while True:
                values, stats = incremental_update(
                    graph, bundle.new_factors, bundle.new_values, values,
                    opt_cfg, fixed_lag=fixed_lag)
                stats_all.append(stats)
                bundle = gen.send(values)
        except StopIteration:
            pass
    return values, graph, stats_all


def write_solution(world: World, values: Values, graph: Graph, stats_all,
                   include_reldyn: bool, out: Path):
    s = world.scenario
    times = s.schedule.times()
    rows = []
    for k, t in enumerate(times):
        T = values[pose_key(k)]
        w = values[angvel_key(k)] if angvel_key(k) in values else np.full(3, np.nan)
        v = values[vel_key(k)] if vel_key(k) in values else np.full(3, np.nan)
        rows.append(_state_row(t, State(Q=T.rot, w=w, r=T.trans, v=v)))
    _write_csv(out / "estimate_trajectory.csv", TRAJECTORY_HEADER, rows)
    lm_rows = []
    for key in sorted([k for k in graph.variables if k.kind == "Landmark"],
                      key=lambda k: k.index):
        p = values[key]
        lm_rows.append([key.index, float(p[0]), float(p[1]), float(p[2])])
    _write_csv(out / "landmarks_estimate.csv", LANDMARKS_EST_HEADER, lm_rows)

    report = marginal_cost_report(graph, values)
    counts = {}
    for f in graph.factors:
        counts[f.kind] = counts.get(f.kind, 0) + 1
    cost_rows = [[kind, counts.get(kind, 0), float(report.get(kind, 0.0))]
                 for kind in sorted(counts)]
    cost_rows.append(["total", len(graph.factors), float(report["total"])])
    _write_csv(out / "costs.csv", "kind,count,cost", cost_rows)
    final = stats_all[-1]
    stats_json = {
        "reldyn": bool(include_reldyn),
        "strategy": s.solve.strategy,
        "solves": len(stats_all),
        "final_cost": float(final.final_cost),
        "iterations_last": int(final.iterations),
        "termination_last": final.termination,
        "reldyn_factor_count": counts.get("RelDyn", 0),
        "total_factors": len(graph.factors),
        "invalid_projections_last": int(final.invalid_projections),
    }
    (out / "solve_stats.json").write_text(json.dumps(stats_json, sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# evaluate / report
# ---------------------------------------------------------------------------

def run_evaluate(out: Path) -> ErrorReport:
    meta = json.loads((out / "meta.json").read_text())
    T_GA = _pose_from_dict(meta["T_GA"])
    truth = _records_from_rows(_read_csv(out / "truth_trajectory.csv",
                                         TRAJECTORY_HEADER), "truth")
    est = _records_from_rows(_read_csv(out / "estimate_trajectory.csv",
                                       TRAJECTORY_HEADER), "estimate")
    report = trajectory_errors(truth, est, T_GA)

    lm_est = _read_csv(out / "landmarks_estimate.csv", LANDMARKS_EST_HEADER)
    lm_truth = _read_csv(out / "landmarks_truth.csv", LANDMARKS_TRUTH_HEADER)
    if lm_est.shape[0] and lm_truth.shape[0]:
        d, _ = landmark_distance(lm_est[:, 1:4], lm_truth[:, 1:4])
        report.landmark_distances = d
        _write_csv(out / "landmark_distances.csv", "id,distance",
                   [[int(lm_est[i, 0]), float(d[i])] for i in range(len(d))])
        report.summary["mean_landmark_distance"] = float(np.mean(d))
        report.summary["max_landmark_distance"] = float(np.max(d))

    err_rows = []
    for k in range(len(report.t)):
        err_rows.append([k, float(report.t[k]),
                         *[float(v) for v in report.dr_lvlh[k]],
                         *[float(v) for v in report.pose_err[k]],
                         *[float(v) for v in report.dv_lvlh[k]],
                         *[float(v) for v in report.dw[k]]])
    _write_csv(out / "errors.csv", ERRORS_HEADER, err_rows)
    _write_csv(out / "summary.csv", "metric,value",
               [[k, float(v)] for k, v in sorted(report.summary.items())])
    return report


def run_report(out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _read_csv(out / "errors.csv", ERRORS_HEADER)
    t = rows[:, 1]
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    for i, (ax, name) in enumerate(zip(axes, ["along-track", "cross-track", "radial"])):
        ax.plot(t, rows[:, 2 + i], lw=1.2)
        ax.set_ylabel(f"dr {name}")
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("t [s]")
    fig.suptitle("Position error (LVLH)")
    fig.savefig(out / "errors_position.png", dpi=110, metadata={"Software": None})
    plt.close(fig)

    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    axes[0].plot(t, np.linalg.norm(rows[:, 5:8], axis=1), lw=1.2)
    axes[0].set_ylabel("rotation err [rad]")
    axes[0].grid(alpha=0.3)
    axes[1].plot(t, np.linalg.norm(rows[:, 8:11], axis=1), lw=1.2)
    axes[1].set_ylabel("translation err")
    axes[1].set_xlabel("t [s]")
    axes[1].grid(alpha=0.3)
    fig.suptitle("Pose error (SE(3) log)")
    fig.savefig(out / "errors_attitude.png", dpi=110, metadata={"Software": None})
    plt.close(fig)

    lm_path = out / "landmark_distances.csv"
    if lm_path.exists():
        lm = _read_csv(lm_path, "id,distance")
        fig, ax = plt.subplots(figsize=(6, 4))
        if lm.shape[0]:
            ax.hist(lm[:, 1], bins=30)
        ax.set_xlabel("distance to nearest truth vertex")
        ax.set_ylabel("landmarks")
        fig.savefig(out / "landmark_distances.png", dpi=110, metadata={"Software": None})
        plt.close(fig)

    summary = (out / "summary.csv").read_text()
    (out / "report_summary.csv").write_text(summary)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def run_pipeline(config_path, mode: str, reldyn: bool = True,
                 seed: int | None = None, out_dir=None,
                 fixed_lag: int | None = None,
                 monte_carlo: int | None = None) -> int:
    """Run one pipeline mode (or 'all'); returns 0 on success.

    Raises ConfigError / NumericalError / OSError; the CLI maps these onto
    exit codes 1 / 2 / 3.
    """
    config_path = Path(config_path)
    scenario = load_scenario(config_path, seed)
    out = Path(out_dir) if out_dir is not None else Path.cwd() / f"run_{scenario.name}"
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config_path)

    if monte_carlo is not None and monte_carlo > 1:
        seeds = [int(s_) for s_ in
                 np.random.SeedSequence(scenario.seed).generate_state(monte_carlo)]
        for i, rep_seed in enumerate(seeds):
            rep_dir = out / f"mc_{i:03d}"
            run_pipeline(config_path, mode, reldyn, rep_seed, rep_dir, fixed_lag)
        return 0

    modes = ["simulate", "solve", "evaluate", "report"] if mode == "all" else [mode]
    for m in modes:
        if m == "simulate":
            world = build_world(scenario)
            write_simulation(world, out, {"config_hash": chash})
        elif m == "solve":
            for req in ("observations.csv", "inputs.csv", "priors.json", "meta.json"):
                if not (out / req).exists():
                    raise ConfigError(f"solve: missing input artifact {req} in {out}")
            world = load_session_world(scenario, out)
            sv = scenario.solve
            opt = OptimizerConfig(max_iters=sv.max_iters, lambda0=sv.lambda0,
                                  rel_tol=sv.rel_tol, abs_tol=sv.abs_tol)
            lag = fixed_lag if fixed_lag is not None else scenario.solve.fixed_lag
            values, graph, stats_all = run_solve(world, include_reldyn=reldyn,
                                                 fixed_lag=lag, opt_cfg=opt)
            write_solution(world, values, graph, stats_all, reldyn, out)
        elif m == "evaluate":
            for req in ("truth_trajectory.csv", "estimate_trajectory.csv"):
                if not (out / req).exists():
                    raise ConfigError(f"evaluate: missing input artifact {req} in {out}")
            run_evaluate(out)
        elif m == "report":
            if not (out / "errors.csv").exists():
                raise ConfigError(f"report: missing errors.csv in {out}")
            run_report(out)
        else:
            raise ConfigError(f"unknown mode {m!r}")
    return 0
