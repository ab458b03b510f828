"""Driver: problem wiring, run artifacts, abort paths, self checks."""
import json
import os

import numpy as np
import pytest

from fe2frac import config as cfg_mod
from fe2frac import driver
from fe2frac import snapshots as sp

LOAD_HEADER = ("step\tload_factor\tu_x\tu_y\treaction_x\treaction_y"
               "\tmax_phase\tmax_micro_phase\touter_sweeps\tsub_steps")


def tiny_config(out_dir, **overrides):
    """4x4 macro shear plate over 4x4 voigt cells, three modest steps."""
    data = json.loads(cfg_mod.serialize(cfg_mod.preset("shear_macro_desk")))
    data["macro"]["elements"] = [4]
    data["rve"]["elements"] = 4
    data["rve"]["bc"] = "voigt"
    data["materials"]["macro"]["length_scale"] = 250.0
    data["load"].update(steps=3, increment=2.0)
    data["output"]["directory"] = str(out_dir)
    for key, value in overrides.items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node[part]
        node[leaf] = value
    return cfg_mod.parse_config(json.dumps(data))


def test_build_problem_notched_shear_wiring(tmp_path):
    config = tiny_config(tmp_path / "x")
    problem = driver.build_problem(config)
    mesh = problem.mesh
    assert problem.mode == "macro_fracture"
    assert mesh.seam_pairs.shape[0] > 0
    fixed = set(np.nonzero(problem.delta_dofmap.fixed_mask)[0].tolist())
    for node in mesh.boundary["bottom"]:
        assert 2 * node in fixed and 2 * node + 1 in fixed
    top = mesh.boundary["top"]
    assert set(problem.drive_dofs.tolist()) == {2 * n for n in top}
    for node in top:
        assert 2 * node + 1 in fixed


def test_build_problem_cook_wiring(tmp_path):
    config = cfg_mod.preset("cooks_micro_desk")
    config = cfg_mod.replace(config, output_dir=str(tmp_path / "c"))
    problem = driver.build_problem(config)
    mesh = problem.mesh
    assert problem.mode == "micro_fracture"
    fixed = set(np.nonzero(problem.delta_dofmap.fixed_mask)[0].tolist())
    for node in mesh.boundary["left"]:
        assert 2 * node in fixed and 2 * node + 1 in fixed
    forces = problem.external_forces(1.0).reshape(-1, 2)
    right = mesh.boundary["right"]
    inner = np.setdiff1d(np.arange(mesh.n_nodes), right)
    assert np.all(forces[inner] == 0.0)
    # resultant equals traction times loaded edge length (160 mm)
    assert np.allclose(forces.sum(axis=0), [-30.0 * 160.0, 40.0 * 160.0],
                       rtol=1e-12)


def test_run_artifacts_and_cadence(tmp_path):
    out = tmp_path / "run"
    config = tiny_config(out, **{"output.snapshot_cadence": 2,
                                 "output.rve_dump": ["max-deformation"]})
    assert driver.run(config) == 0
    files = sorted(os.listdir(out))
    snaps = [f for f in files if f.startswith("snapshot_")]
    assert snaps == ["snapshot_0000.vtk", "snapshot_0002.vtk"]
    assert [f for f in files if f.startswith("rve_")] \
        == ["rve_0000_max-deformation.vtk", "rve_0002_max-deformation.vtk"]
    for name in ("config.json", "load_deflection.tsv", "energy.tsv",
                 "summary.txt", "state_final.npz"):
        assert name in files
    assert (out / "config.json").read_text() == cfg_mod.serialize(config)
    table = (out / "load_deflection.tsv").read_text().splitlines()
    assert table[0] == LOAD_HEADER
    assert len(table) == 1 + config.load.steps
    summary = (out / "summary.txt").read_text()
    assert "status: ok" in summary
    assert "steps accepted: 3 of 3" in summary


def test_load_curve_reaction_grows_elastically(tmp_path):
    out = tmp_path / "run"
    config = tiny_config(out)
    assert driver.run(config) == 0
    rows = [line.split("\t") for line in
            (out / "load_deflection.tsv").read_text().splitlines()[1:]]
    rx = [float(r[4]) for r in rows]
    ux = [float(r[2]) for r in rows]
    assert ux == [2.0, 4.0, 6.0]
    assert rx[0] > 0.0 and rx[1] > rx[0] and rx[2] > rx[1]


def test_zero_steps_writes_initial_snapshot_only(tmp_path):
    out = tmp_path / "zero"
    config = tiny_config(out, **{"load.steps": 0})
    assert driver.run(config) == 0
    files = sorted(os.listdir(out))
    assert [f for f in files if f.startswith("snapshot_")] \
        == ["snapshot_0000.vtk"]
    table = (out / "load_deflection.tsv").read_text().splitlines()
    assert len(table) == 1
    assert "steps accepted: 0 of 0" in (out / "summary.txt").read_text()


def test_identical_configs_reproduce_identical_bytes(tmp_path):
    out = tmp_path / "rep"
    config = tiny_config(out, **{"load.steps": 2,
                                 "output.rve_dump": ["max-phase"]})
    assert driver.run(config) == 0
    first = {f: (out / f).read_bytes() for f in os.listdir(out)}
    assert driver.run(config) == 0
    second = {f: (out / f).read_bytes() for f in os.listdir(out)}
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], name


def test_abort_dumps_last_good_state(tmp_path):
    out = tmp_path / "abort"
    config = tiny_config(out, **{"load.increment": 60.0,
                                 "tolerances.max_outer": 3,
                                 "tolerances.max_bisect": 0})
    lines = []
    assert driver.run(config, log=lines.append) == 1
    files = sorted(os.listdir(out))
    assert "state_last_good.npz" in files
    _, state = sp.load_state(str(out / "state_last_good.npz"))
    assert np.all(state.displacements == 0.0)
    summary = (out / "summary.txt").read_text()
    assert "status: aborted" in summary
    assert "failure: step 1" in summary
    assert any("step 1" in line for line in lines)
    table = (out / "load_deflection.tsv").read_text().splitlines()
    assert len(table) == 1


def test_freeze_threshold_applies_during_run(tmp_path):
    out = tmp_path / "freeze"
    config = tiny_config(out, **{"rve.bc": "periodic",
                                 "freeze_threshold": 0.02,
                                 "load.steps": 3})
    assert driver.run(config) == 0
    _, state = sp.load_state(str(out / "state_final.npz"))
    assert state.cells.frozen.any()
    assert np.all(state.cells.fluctuations[state.cells.frozen] == 0.0)
    assert "frozen cells: 0" not in (out / "summary.txt").read_text()


def test_energy_table_written_per_step(tmp_path):
    out = tmp_path / "energy"
    config = tiny_config(out)
    assert driver.run(config) == 0
    lines = (out / "energy.tsv").read_text().splitlines()
    assert lines[0].split("\t")[0] == "step"
    assert len(lines) == 1 + config.load.steps
    defects = [abs(float(line.split("\t")[5])) for line in lines[1:]]
    works = [abs(float(line.split("\t")[1])) for line in lines[1:]]
    assert all(d <= 0.02 * max(w, 1.0) for d, w in zip(defects, works))


def test_check_suite_passes_on_desk_presets(tmp_path):
    for name in ("shear_micro_desk", "shear_macro_desk",
                 "cooks_micro_desk"):
        config = cfg_mod.replace(cfg_mod.preset(name),
                                 output_dir=str(tmp_path / name))
        lines = []
        assert driver.check(config, log=lines.append) == 0
        assert len(lines) == 6
        assert all(line.endswith("pass") for line in lines)
