import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from relnav.cli import main as cli_main
from relnav.config import config_hash, load_scenario
from relnav.errors import ConfigError
from relnav.pipeline import (INPUTS_HEADER, OBSERVATIONS_HEADER, TRAJECTORY_HEADER,
                             load_session_world, run_pipeline)
from relnav.simfront import build_world

SMALL_TOML = """
name = "pipeline_mini"
seed = 77

[dynamics]
mu_a = 17.28
mu_sun = 1.32712440018e11
m_s = 1000.0
inertia_diag = [6.9e24, 7.1e24, 7.9e24]
r_min = 1.0

[dynamics.srp]
kind = "cannonball"
coefficient = 2.1e-11
d0_ref = 1.496e8

[dynamics.ephemeris]
kind = "fixed"
d0 = [-3.53e8, 0.0, 0.0]

[asteroid]
semi_axes = [285.0, 277.0, 226.0]
landmark_count = 130
surface_noise = 2.0
omega_A = [0.0, 0.0, 3.2671e-4]

[initial]
r0_I = [5480.0, 0.0, 0.0]
v0_I = [0.0, 0.0561637250846, 0.0]

[camera]
fx = 10500.0
fy = 10500.0
cx = 512.0
cy = 512.0
width = 1024
height = 1024

[schedule]
t0 = 0.0
dt_frame = 331.0
n_frames = 12

[noise]
sigma_R = 1e-6
sigma_s = 1e-7
sigma_tau = 7e12
sigma_f = 1e-8

[obs]
sigma_px = 1.0
outlier_rate = 0.02

[meas]
sigma_R_m = 1e-5
sigma_r_m = 0.05
sigma_w0 = 1e-9
sigma_v0 = 1e-7

[solver]
strategy = "batch"

[simulation]
input_sample_dt = 55.166666666666664
"""


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "mini.toml"
    p.write_text(SMALL_TOML)
    return p


@pytest.fixture(scope="module")
def full_run(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run_pipeline(cfg_path, "all", reldyn=True, out_dir=out) == 0
    return out


def test_artifacts_exist_with_schemas(full_run):
    expected = ["truth_trajectory.csv", "observations.csv", "inputs.csv",
                "landmarks_truth.csv", "priors.json", "meta.json",
                "estimate_trajectory.csv", "landmarks_estimate.csv", "costs.csv",
                "solve_stats.json", "errors.csv", "summary.csv",
                "landmark_distances.csv", "errors_position.png",
                "errors_attitude.png", "landmark_distances.png",
                "report_summary.csv"]
    for name in expected:
        assert (full_run / name).exists(), name
    assert (full_run / "truth_trajectory.csv").read_text().splitlines()[0] == TRAJECTORY_HEADER
    assert (full_run / "observations.csv").read_text().splitlines()[0] == OBSERVATIONS_HEADER
    assert (full_run / "inputs.csv").read_text().splitlines()[0] == INPUTS_HEADER
    meta = json.loads((full_run / "meta.json").read_text())
    assert "config_hash" in meta and "seed" in meta


def test_solution_beats_dead_reckoning(full_run):
    summary = {line.split(",")[0]: float(line.split(",")[1])
               for line in (full_run / "summary.csv").read_text().strip().splitlines()[1:]}
    assert summary["rmse_radial"] < 1.0
    assert summary["mean_landmark_distance"] < 10.0


def test_reldyn_off_produces_no_reldyn_factors(cfg_path, tmp_path):
    out = tmp_path / "off"
    assert run_pipeline(cfg_path, "simulate", out_dir=out) == 0
    assert run_pipeline(cfg_path, "solve", reldyn=False, out_dir=out) == 0
    costs = (out / "costs.csv").read_text().splitlines()
    kinds = {line.split(",")[0]: (int(line.split(",")[1]), float(line.split(",")[2]))
             for line in costs[1:]}
    assert "RelDyn" not in kinds
    stats = json.loads((out / "solve_stats.json").read_text())
    assert stats["reldyn_factor_count"] == 0 and stats["reldyn"] is False
    # estimates carry no angular-velocity values beyond frame 0
    rows = (out / "estimate_trajectory.csv").read_text().splitlines()[2:]
    assert all("nan" in line for line in rows)


def test_pipeline_determinism_byte_identical(cfg_path, tmp_path):
    def run(d):
        run_pipeline(cfg_path, "all", reldyn=True, seed=123, out_dir=d)
        digests = {}
        for f in sorted(d.iterdir()):
            digests[f.name] = hashlib.sha256(f.read_bytes()).hexdigest()
        return digests

    d1 = run(tmp_path / "a")
    d2 = run(tmp_path / "b")
    assert d1 == d2


def test_session_world_round_trip(cfg_path, full_run):
    scenario = load_scenario(cfg_path)
    world_disk = load_session_world(scenario, full_run)
    world_mem = build_world(scenario)
    assert len(world_disk.observations) == len(world_mem.observations)
    for a, b in zip(world_disk.observations, world_mem.observations):
        assert len(a) == len(b)
        for oa, ob in zip(a, b):
            assert oa.landmark == ob.landmark
            assert np.array_equal(oa.y, ob.y)
    assert np.array_equal(world_disk.ref.stream.times, world_mem.ref.stream.times)
    assert np.array_equal(world_disk.priors.T0_meas.trans,
                          world_mem.priors.T0_meas.trans)


def test_monte_carlo_layout(cfg_path, tmp_path):
    out = tmp_path / "mc"
    assert run_pipeline(cfg_path, "simulate", out_dir=out, monte_carlo=2) == 0
    assert (out / "mc_000" / "truth_trajectory.csv").exists()
    assert (out / "mc_001" / "truth_trajectory.csv").exists()
    t0 = (out / "mc_000" / "observations.csv").read_text()
    t1 = (out / "mc_001" / "observations.csv").exists()
    assert t0 and t1  # derived seeds differ, both rendered


def test_cli_exit_codes(tmp_path, cfg_path):
    assert cli_main(["--config", str(tmp_path / "nope.toml"),
                     "--mode", "simulate"]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("name = [unclosed")
    assert cli_main(["--config", str(bad), "--mode", "simulate"]) == 1
    # solve without artifacts -> config error
    assert cli_main(["--config", str(cfg_path), "--mode", "solve",
                     "--out-dir", str(tmp_path / "empty")]) == 1


def test_cli_end_to_end(tmp_path, cfg_path):
    out = tmp_path / "cli_run"
    rc = cli_main(["--config", str(cfg_path), "--mode", "simulate",
                   "--seed", "5", "--out-dir", str(out)])
    assert rc == 0
    rc = cli_main(["--config", str(cfg_path), "--mode", "solve",
                   "--reldyn", "on", "--seed", "5", "--out-dir", str(out)])
    assert rc == 0
    rc = cli_main(["--config", str(cfg_path), "--mode", "evaluate",
                   "--seed", "5", "--out-dir", str(out)])
    assert rc == 0
    assert (out / "summary.csv").exists()


def test_invalid_mode_rejected(cfg_path, tmp_path):
    with pytest.raises(ConfigError):
        run_pipeline(cfg_path, "frobnicate", out_dir=tmp_path / "x")


def test_config_hash_stability(cfg_path):
    assert config_hash(cfg_path) == config_hash(cfg_path)
    assert len(config_hash(cfg_path)) == 16


def test_incremental_strategy_pipeline(cfg_path, tmp_path):
    import tomli
    raw = tomli.loads(Path(cfg_path).read_text())
    raw["schedule"]["n_frames"] = 6
    raw["solver"]["strategy"] = "incremental"
    inc_cfg = tmp_path / "inc.toml"
    lines = []
    def emit(d, prefix=""):
        for k, v in d.items():
            if isinstance(v, dict):
                lines.append(f"[{prefix}{k}]")
                emit(v, prefix + k + ".")
    # simpler: regenerate via tomli round trip is not available; write minimal
    text = Path(cfg_path).read_text()
    text = text.replace("n_frames = 12", "n_frames = 6")
    text = text.replace('strategy = "batch"', 'strategy = "incremental"')
    inc_cfg.write_text(text)
    out = tmp_path / "inc_run"
    assert run_pipeline(inc_cfg, "simulate", out_dir=out) == 0
    assert run_pipeline(inc_cfg, "solve", reldyn=True, out_dir=out) == 0
    stats = json.loads((out / "solve_stats.json").read_text())
    assert stats["strategy"] == "incremental"
    assert stats["solves"] == 6
