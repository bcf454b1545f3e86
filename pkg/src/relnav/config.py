"""Scenario configuration: TOML with nested tables.

The file fully determines the synthetic world (dynamics parameters, asteroid
shape and spin, camera, schedule, noise levels, initialization sigmas) plus
solver settings.  The principal-axis alignment C = R_GA is not a free field:
it follows from the spin-pole frame construction at the initial epoch.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from .dynamics import DynamicsParams, Ephemeris, SrpModel
from .errors import ConfigError
from .factors import CameraIntrinsics
from .liegroup import Pose, ensure_rotation, so3_exp
from .simfront import (AsteroidConfig, LoopClosureConfig, MeasNoise, ObsNoise,
                       Scenario, Schedule, SolveSettings, spin_pole_frame)
from .stochastic import NoiseSpec


def _vec3(x, name):
    arr = np.asarray(x, dtype=float)
    if arr.shape != (3,):
        raise ConfigError(f"{name}: expected 3 entries")
    return arr


def _mat3(x, name):
    arr = np.asarray(x, dtype=float)
    if arr.shape != (3, 3):
        raise ConfigError(f"{name}: expected a 3x3 matrix")
    return arr


def config_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def load_scenario(path, seed_override: int | None = None) -> Scenario:
    """Parse a scenario TOML file; raises ConfigError on any inconsistency."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config parse error: {e}") from e
    try:
        return scenario_from_dict(raw, seed_override)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"config field error: {e}") from e


def scenario_from_dict(raw: dict, seed_override: int | None = None) -> Scenario:
    dyn = raw["dynamics"]
    ast = raw["asteroid"]
    init = raw["initial"]

    omega_A = _vec3(ast["omega_A"], "asteroid.omega_A")
    R_IA0 = ensure_rotation(_mat3(ast.get("R_IA0", np.eye(3)), "asteroid.R_IA0"))
    r0_I = _vec3(init["r0_I"], "initial.r0_I")
    v0_I = _vec3(init["v0_I"], "initial.v0_I")

    # G frame fixed by the spin-pole construction at t0; C = R_GA follows
    w_I = R_IA0 @ omega_A
    nw = np.linalg.norm(w_I)
    g3 = w_I / nw if nw > 0 else np.array([0.0, 0.0, 1.0])
    R_IG0 = spin_pole_frame(g3, r0_I)
    C = R_IG0.T @ R_IA0

    srp_raw = dyn.get("srp", {})
    srp = SrpModel(kind=srp_raw.get("kind", "none"),
                   coefficient=float(srp_raw.get("coefficient", 0.0)),
                   d0_ref=float(srp_raw.get("d0_ref", 1.0)))
    eph_raw = dyn.get("ephemeris", {})
    eph = Ephemeris(kind=eph_raw.get("kind", "fixed"),
                    d0=_vec3(eph_raw.get("d0", [1.0, 0.0, 0.0]), "ephemeris.d0"),
                    d_rate=_vec3(eph_raw.get("d_rate", [0.0, 0.0, 0.0]),
                                 "ephemeris.d_rate"))
    inertia = dyn.get("inertia_diag")
    A = np.diag(_vec3(inertia, "dynamics.inertia_diag")) if inertia is not None \
        else _mat3(dyn["inertia"], "dynamics.inertia")
    params = DynamicsParams(
        mu_a=float(dyn["mu_a"]), mu_sun=float(dyn.get("mu_sun", 0.0)),
        c=_vec3(dyn.get("c", [0.0, 0.0, 0.0]), "dynamics.c"), C=C, A=A,
        m_s=float(dyn.get("m_s", 1.0)), srp=srp, ephemeris=eph,
        r_min=float(dyn.get("r_min", 1e-6)))

    nz = raw.get("noise", {})
    noise = NoiseSpec.from_sigmas(float(nz.get("sigma_R", 0.0)),
                                  float(nz.get("sigma_s", 0.0)),
                                  float(nz.get("sigma_tau", 0.0)),
                                  float(nz.get("sigma_f", 0.0)))

    cam = raw["camera"]
    K = CameraIntrinsics(fx=float(cam["fx"]), fy=float(cam["fy"]),
                         cx=float(cam["cx"]), cy=float(cam["cy"]),
                         width=int(cam["width"]), height=int(cam["height"]))
    tsc = cam.get("t_sc")
    if tsc is None:
        T_SC = Pose.identity()
    else:
        rot = tsc.get("rot")
        rot = ensure_rotation(_mat3(rot, "camera.t_sc.rot")) if rot is not None \
            else so3_exp(_vec3(tsc.get("rotvec", [0, 0, 0]), "camera.t_sc.rotvec"))
        T_SC = Pose(rot, _vec3(tsc.get("trans", [0, 0, 0]), "camera.t_sc.trans"))

    sched = raw["schedule"]
    schedule = Schedule(t0=float(sched.get("t0", 0.0)),
                        dt_frame=float(sched["dt_frame"]),
                        n_frames=int(sched["n_frames"]))

    obs_raw = raw.get("obs", {})
    obs = ObsNoise(sigma_px=float(obs_raw.get("sigma_px", 1.0)),
                   outlier_rate=float(obs_raw.get("outlier_rate", 0.0)),
                   outlier_px=float(obs_raw.get("outlier_px", 30.0)),
                   illumination_cos_min=float(obs_raw.get("illumination_cos_min", 0.05)),
                   mismatch_rate=float(obs_raw.get("mismatch_rate", 0.0)),
                   reprojection_gate_sigma=float(obs_raw.get("reprojection_gate_sigma", 3.0)))

    meas_raw = raw.get("meas", {})
    meas = MeasNoise(sigma_R_m=float(meas_raw.get("sigma_R_m", 1e-5)),
                     sigma_r_m=float(meas_raw.get("sigma_r_m", 0.05)),
                     sigma_w0=float(meas_raw.get("sigma_w0", 1e-8)),
                     sigma_v0=float(meas_raw.get("sigma_v0", 1e-6)))

    lc_raw = raw.get("loop_closure", {})
    loop = LoopClosureConfig(
        enabled=bool(lc_raw.get("enabled", True)),
        eta=float(lc_raw.get("eta", 0.6)),
        min_frame_gap=int(lc_raw.get("min_frame_gap", 10)),
        inlier_ratio=float(lc_raw.get("inlier_ratio", 0.7)),
        descriptor_bins=int(lc_raw.get("descriptor_bins", 64)),
        sigma_R=float(lc_raw.get("sigma_R", 1e-3)),
        sigma_r_rel=float(lc_raw.get("sigma_r_rel", 1e-3)),
        min_shared=int(lc_raw.get("min_shared", 8)))

    sv = raw.get("solver", {})
    solve = SolveSettings(
        max_substep=float(sv.get("max_substep", 60.0)),
        min_substeps=int(sv.get("min_substeps", 4)),
        noise_discretization=str(sv.get("noise_discretization", "van_loan")),
        cov_floor=float(sv.get("cov_floor", 1e-12)),
        strategy=str(sv.get("strategy", "batch")),
        robust_projection=bool(sv.get("robust_projection", False)),
        fixed_lag=sv.get("fixed_lag"),
        max_iters=int(sv.get("max_iters", 100)),
        lambda0=float(sv.get("lambda0", 1e-4)),
        rel_tol=float(sv.get("rel_tol", 1e-8)),
        abs_tol=float(sv.get("abs_tol", 1e-10)))
    if solve.strategy not in ("batch", "incremental"):
        raise ConfigError(f"solver.strategy must be batch|incremental, got {solve.strategy!r}")
    if solve.noise_discretization not in ("van_loan", "integral"):
        raise ConfigError("solver.noise_discretization must be van_loan|integral")

    sim = raw.get("simulation", {})
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    asteroid = AsteroidConfig(
        semi_axes=_vec3(ast["semi_axes"], "asteroid.semi_axes"),
        landmark_count=int(ast.get("landmark_count", 200)),
        surface_noise=float(ast.get("surface_noise", 0.0)))

    return Scenario(
        name=str(raw.get("name", "scenario")), params=params, noise=noise,
        camera=K, T_SC=T_SC, asteroid=asteroid, schedule=schedule,
        obs_noise=obs, meas=meas, loop=loop, solve=solve,
        r0_I=r0_I, v0_I=v0_I, omega_A=omega_A, R_IA0=R_IA0, seed=seed,
        input_sample_dt=(float(sim["input_sample_dt"])
                         if "input_sample_dt" in sim else None),
        inject_input_noise=bool(sim.get("inject_input_noise", False)))
