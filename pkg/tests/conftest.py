import sys
import zlib
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from relnav.config import load_scenario

CONFIG_DIR = Path(__file__).parent.parent / "src" / "relnav" / "configs"


@pytest.fixture
def rng(request):
    """Per-test deterministic generator (independent of execution order)."""
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))


@pytest.fixture(scope="session")
def rc3_scenario():
    return load_scenario(CONFIG_DIR / "rc3_analog.toml")


@pytest.fixture(scope="session")
def lab_scenario():
    return load_scenario(CONFIG_DIR / "lab_planar.toml")


def small_scenario_dict(n_frames=14, landmarks=140, seed=42, **overrides):
    """Compact orbital scenario for solver/front-end tests (same geometry as
    the big analog, fewer frames/landmarks)."""
    d = {
        "name": "mini",
        "seed": seed,
        "dynamics": {
            "mu_a": 17.28, "mu_sun": 1.32712440018e11, "m_s": 1000.0,
            "c": [0.0, 0.0, 0.0], "inertia_diag": [6.9e24, 7.1e24, 7.9e24],
            "r_min": 1.0,
            "srp": {"kind": "cannonball", "coefficient": 2.1e-11, "d0_ref": 1.496e8},
            "ephemeris": {"kind": "fixed", "d0": [-3.53e8, 0.0, 0.0]},
        },
        "asteroid": {
            "semi_axes": [285.0, 277.0, 226.0], "landmark_count": landmarks,
            "surface_noise": 2.0, "omega_A": [0.0, 0.0, 3.2671e-4],
        },
        "initial": {"r0_I": [5480.0, 0.0, 0.0], "v0_I": [0.0, 0.0561637250846, 0.0]},
        "camera": {"fx": 10500.0, "fy": 10500.0, "cx": 512.0, "cy": 512.0,
                   "width": 1024, "height": 1024},
        "schedule": {"t0": 0.0, "dt_frame": 331.0, "n_frames": n_frames},
        "noise": {"sigma_R": 1e-6, "sigma_s": 1e-7, "sigma_tau": 7e12, "sigma_f": 1e-8},
        "obs": {"sigma_px": 1.0},
        "meas": {"sigma_R_m": 1e-5, "sigma_r_m": 0.05, "sigma_w0": 1e-9,
                 "sigma_v0": 1e-7},
        "solver": {"strategy": "batch"},
        "simulation": {"input_sample_dt": 55.166666666666664},
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and key in d:
            d[key].update(val)
        else:
            d[key] = val
    return d


@pytest.fixture(scope="session")
def small_scenario():
    from relnav.config import scenario_from_dict
    return scenario_from_dict(small_scenario_dict())


@pytest.fixture(scope="session")
def small_world(small_scenario):
    from relnav.simfront import build_world
    return build_world(small_scenario)
