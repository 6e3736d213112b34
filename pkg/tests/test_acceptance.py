"""Short-horizon versions of the benchmark comparisons, run from the shipped configs."""
from pathlib import Path

import pytest

from vfpda.cli import apply_overrides
from vfpda.models import load_config, parse_config
from vfpda.services.harness import run_twin_experiment

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

pytestmark = pytest.mark.slow


def run(name, cycles, spinup, **model):
    cfg = apply_overrides(load_config(CONFIG_DIR / f"{name}.yaml"), cycles=cycles, spinup=spinup)
    if model:
        data = cfg.model_dump(mode="json")
        data["model"].update(model)
        cfg = parse_config(data)
    record = run_twin_experiment(cfg, n_jobs=1)
    assert not record.truncated, record.failure
    return record


@pytest.fixture(scope="module")
def pendulum():
    names = ["etkf", "etkfa", "etkfp", "vfp", "vfpstab", "vfpdae"]
    return {name: run(f"pendulum_{name}", 200, 50) for name in names}


@pytest.fixture(scope="module")
def kdv():
    return {name: run(f"kdv_{name}", 100, 20) for name in ["etkf", "vfpstab", "vfpdae"]}


@pytest.fixture(scope="module")
def navier_stokes():
    coarse = {"grid_scale": 4, "obs_per_axis": 4, "spinup_time": 10 * 0.0109}
    names = ["etkf", "letkf", "etkfp", "letkfp", "vfpdae"]
    return {name: run(f"navier_stokes_{name}", 20, 5, **coarse) for name in names}


def test_pendulum_projected_variants_keep_the_constraints(pendulum):
    assert pendulum["etkfp"].final_crmse["default"] <= 1e-9
    assert pendulum["vfpdae"].final_crmse["default"] <= 1e-9


def test_pendulum_orderings(pendulum):
    assert pendulum["etkfa"].final_crmse["default"] < pendulum["etkf"].final_crmse["default"]
    assert pendulum["vfpstab"].final_crmse["default"] < pendulum["vfp"].final_crmse["default"]
    assert all(record.final_rmse < 1.0 for record in pendulum.values())


def test_kdv_invariants(kdv):
    assert kdv["vfpdae"].final_crmse["default"] <= 1e-8
    assert kdv["vfpstab"].final_crmse["default"] < kdv["etkf"].final_crmse["default"]


def test_navier_stokes_divergence(navier_stokes):
    etkf = navier_stokes["etkf"].final_crmse["divergence"]
    assert etkf <= 1e-8
    assert navier_stokes["letkf"].final_crmse["divergence"] >= 100.0 * max(etkf, 1e-12)
    for name in ["etkfp", "letkfp", "vfpdae"]:
        assert navier_stokes[name].final_crmse["divergence"] <= 1e-8, name


def test_navier_stokes_enstrophy(navier_stokes):
    assert navier_stokes["vfpdae"].final_crmse["enstrophy"] <= 1e-8
    assert navier_stokes["etkfp"].final_crmse["enstrophy"] <= 1e-8
    assert navier_stokes["letkf"].final_crmse["enstrophy"] > 1e-4
