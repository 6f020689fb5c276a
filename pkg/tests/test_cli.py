"""End-to-end tests for the command-line interface.

Each subcommand is exercised in-process through ``main(argv)`` on tiny
grids so the whole pipeline stays under a few seconds. Exit codes follow
the contract: 0 success, 2 configuration errors, 3 runtime failures.
"""

import json

import numpy as np
import pytest

from hpelab.cli import ConfigError, load_config, main
from hpelab.fields import GridSpec, RealField
from hpelab.storage import read_field, read_trajectory, write_csv, write_field

TINY_AFNO = {"patch": [2, 2], "embed_dim": 8, "num_blocks": 2, "depth": 1,
             "dropout": 0.0}


def write_json(path, data):
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run simulate -> degrade once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("pipe")
    sim_cfg = write_json(root / "sim.json", {
        "system": "ch", "nx": 8, "ny": 8,
        "t_end": 0.4, "dt": 0.002, "save_every": 10, "seed": 3,
    })
    assert main(["simulate", "--config", sim_cfg, "--out", str(root / "sim")]) == 0
    assert main([
        "degrade", "--traj", str(root / "sim" / "trajectory"),
        "--out", str(root / "obs"), "--dt-obs", "0.04",
        "--sigma", "0.01", "--seed", "7",
    ]) == 0
    return root


class TestConfigLoading:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"system": "ch", "bogus": 1})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_missing_required_key(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"nx": 8})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_defaults_materialized(self, tmp_path):
        p = write_json(tmp_path / "c.json", {"a": 5})
        cfg = load_config(p, {"a": 1, "b": 2})
        assert cfg == {"a": 5, "b": 2}

    def test_non_object_root(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config(p, {"a": 1})


class TestSimulate:
    def test_outputs_and_provenance(self, pipeline):
        traj = read_trajectory(pipeline / "sim" / "trajectory")
        assert len(traj.snapshots) == 21
        assert traj.times[-1] == pytest.approx(0.4)
        run = json.loads((pipeline / "sim" / "run.json").read_text())
        assert run["command"] == "simulate"
        assert len(run["config_sha256"]) == 64
        assert run["config"]["system"] == "ch"
        assert run["config"]["dt"] == 0.002  # defaults materialized
        assert "numpy" in run["versions"]
        assert run["wall_seconds"] > 0

    def test_replay_is_bitwise(self, pipeline, tmp_path):
        cfg = write_json(tmp_path / "sim.json", {
            "system": "ch", "nx": 8, "ny": 8,
            "t_end": 0.4, "dt": 0.002, "save_every": 10, "seed": 3,
        })
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
        a = (pipeline / "sim" / "trajectory" / "00020.fld").read_bytes()
        b = (tmp_path / "s" / "trajectory" / "00020.fld").read_bytes()
        assert a == b

    def test_bad_system_is_config_error(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"system": "navier-stokes"})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


class TestDegrade:
    def test_observation_protocol(self, pipeline):
        obs = read_trajectory(pipeline / "obs" / "observations")
        assert obs.times == pytest.approx(np.arange(11) * 0.04)
        assert obs.noise_sigma == 0.01

    def test_cgl_observations_are_modulus(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "system": "cgl", "nx": 8, "ny": 8,
            "t_end": 0.1, "dt": 0.002, "save_every": 10, "seed": 5,
        })
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
        assert main([
            "degrade", "--traj", str(tmp_path / "s" / "trajectory"),
            "--out", str(tmp_path / "o"), "--dt-obs", "0.04", "--sigma", "0.0",
        ]) == 0
        raw = read_trajectory(tmp_path / "s" / "trajectory")
        obs = read_trajectory(tmp_path / "o" / "observations")
        assert np.iscomplexobj(raw.snapshots[0].values)
        assert not np.iscomplexobj(obs.snapshots[0].values)
        assert np.allclose(obs.snapshots[0].values,
                           np.abs(raw.snapshots[0].values))

    def test_t_max_truncates(self, pipeline, tmp_path):
        assert main([
            "degrade", "--traj", str(pipeline / "sim" / "trajectory"),
            "--out", str(tmp_path / "o"), "--dt-obs", "0.04",
            "--sigma", "0.0", "--t-max", "0.2",
        ]) == 0
        obs = read_trajectory(tmp_path / "o" / "observations")
        assert obs.times[-1] == pytest.approx(0.2)

    def test_missing_trajectory_is_runtime_error(self, tmp_path):
        assert main([
            "degrade", "--traj", str(tmp_path / "nope"),
            "--out", str(tmp_path / "o"), "--dt-obs", "0.04", "--sigma", "0.0",
        ]) == 3


@pytest.fixture(scope="module")
def trained(pipeline, tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = write_json(root / "train.json", {
        "scenario": "white-black", "system": "ch", "dt": 0.02, "seed": 1,
        "afno": TINY_AFNO, "training": {"epochs": 3, "seed": 1},
    })
    code = main(["train", "--config", cfg,
                 "--obs", str(pipeline / "obs" / "observations"),
                 "--out", str(root)])
    assert code == 0
    return root


class TestTrain:
    def test_artifacts(self, trained):
        assert (trained / "model.ckpt").exists()
        lines = (trained / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss"
        assert len(lines) == 4
        run = json.loads((trained / "run.json").read_text())
        assert run["epochs_run"] == 3
        assert run["final_loss"] == pytest.approx(float(lines[-1].split(",")[1]))

    def test_loss_decreased(self, trained):
        lines = (trained / "history.csv").read_text().splitlines()[1:]
        losses = [float(x.split(",")[1]) for x in lines]
        assert losses[-1] < losses[0]

    def test_bad_scenario_is_config_error(self, pipeline, tmp_path):
        cfg = write_json(tmp_path / "t.json", {"scenario": "gray-gray"})
        assert main(["train", "--config", cfg,
                     "--obs", str(pipeline / "obs" / "observations"),
                     "--out", str(tmp_path)]) == 2


class TestEvaluate:
    def test_rmse_curve(self, pipeline, trained, tmp_path):
        code = main(["evaluate", "--model", str(trained / "model.ckpt"),
                     "--truth", str(pipeline / "sim" / "trajectory"),
                     "--out", str(tmp_path), "--t-split", "0.2"])
        assert code == 0
        lines = (tmp_path / "rmse_curve.csv").read_text().splitlines()
        assert lines[0] == "time,rmse"
        assert len(lines) == 22  # 21 snapshots
        assert float(lines[1].split(",")[1]) == 0.0  # exact at t=0
        run = json.loads((tmp_path / "run.json").read_text())
        assert run["interp_rmse"] > 0
        assert run["extrap_rmse"] > 0

    def test_missing_checkpoint_is_runtime_error(self, pipeline, tmp_path):
        assert main(["evaluate", "--model", str(tmp_path / "no.ckpt"),
                     "--truth", str(pipeline / "sim" / "trajectory"),
                     "--out", str(tmp_path)]) == 3


class TestSweep:
    def test_single_cell(self, tmp_path):
        cfg = write_json(tmp_path / "sweep.json", {
            "scenario": "white-black", "system": "ch", "nx": 8, "ny": 8,
            "dt_obs_list": [0.1], "sigma_list": [0.0], "seeds": [0],
            "t_end": 0.4, "t_obs_end": 0.2, "dt_solver": 0.002,
            "save_every": 10, "model_dt": 0.02,
            "afno": TINY_AFNO, "training": {"epochs": 2, "seed": 0},
        })
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "dt_obs,sigma,interp_rmse,extrap_rmse,n_runs"
        row = lines[1].split(",")
        assert float(row[0]) == pytest.approx(0.1)
        assert np.isfinite(float(row[2]))
        # extrapolation window [t_obs_end, t_end] is non-empty
        assert np.isfinite(float(row[3]))
        assert int(row[4]) == 1


class TestBinAndDiscover:
    def test_bin_from_discovery_model(self, pipeline, tmp_path):
        cfg = write_json(tmp_path / "t.json", {
            "scenario": "discovery", "system": "ch", "dt": 0.02, "seed": 2,
            "afno": TINY_AFNO, "training": {"epochs": 1, "seed": 2},
        })
        assert main(["train", "--config", cfg,
                     "--obs", str(pipeline / "obs" / "observations"),
                     "--out", str(tmp_path / "m")]) == 0
        assert main(["bin", "--model", str(tmp_path / "m" / "model.ckpt"),
                     "--traj", str(pipeline / "obs" / "observations"),
                     "--channel", "0", "--bins", "6", "--min-count", "1",
                     "--t-min", "0.0", "--t-max", "0.4",
                     "--out", str(tmp_path / "b")]) == 0
        lines = (tmp_path / "b" / "bins.csv").read_text().splitlines()
        assert lines[0] == "center,mean,count"
        centers = [float(x.split(",")[0]) for x in lines[1:]]
        assert centers == sorted(centers)
        assert all(int(x.split(",")[2]) >= 1 for x in lines[1:])

    def test_discover_linear_law(self, tmp_path):
        c = np.linspace(0.05, 0.95, 40)
        write_csv(tmp_path / "law.csv", ["center", "mean"],
                  [[x, 2.0 * x] for x in c])
        assert main(["discover", "--bins", str(tmp_path / "law.csv"),
                     "--out", str(tmp_path), "--seed", "1",
                     "--max-iters", "5", "--batch", "50"]) == 0
        result = json.loads((tmp_path / "discovery.json").read_text())
        assert result["nrmse"] < 1e-4
        pred = [eval(result["expression"], {"c": x}) for x in (0.1, 0.5, 0.9)]
        assert pred == pytest.approx([0.2, 1.0, 1.8], abs=1e-6)

    def test_discover_rejects_wrong_header(self, tmp_path):
        write_csv(tmp_path / "law.csv", ["x", "y"], [[0.1, 0.2], [0.5, 1.0]])
        assert main(["discover", "--bins", str(tmp_path / "law.csv"),
                     "--out", str(tmp_path)]) == 3


class TestGradCheckAndRender:
    def test_grad_check_passes(self, capsys):
        assert main(["grad-check", "--grid", "8",
                     "--scenario", "white-black", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "gradient check passed" in out
        assert "rel err" in out

    def test_render_real_field(self, tmp_path):
        grid = GridSpec(4, 4)
        vals = np.linspace(0.0, 1.0, 16).reshape(4, 4)
        write_field(tmp_path / "f.fld", RealField(grid, vals))
        assert main(["render", "--field", str(tmp_path / "f.fld"),
                     "--out", str(tmp_path / "f.pgm")]) == 0
        data = (tmp_path / "f.pgm").read_bytes()
        assert data.startswith(b"P5\n4 4\n65535\n")

    def test_render_complex_uses_modulus(self, tmp_path):
        from hpelab.fields import ComplexField
        grid = GridSpec(4, 4)
        vals = 1j * np.ones((4, 4), dtype=complex)
        vals[0, 0] = 2j
        write_field(tmp_path / "f.fld", ComplexField(grid, vals))
        assert main(["render", "--field", str(tmp_path / "f.fld"),
                     "--out", str(tmp_path / "f.pgm")]) == 0
        payload = (tmp_path / "f.pgm").read_bytes().split(b"\n", 3)[3]
        px = np.frombuffer(payload, dtype=">u2").reshape(4, 4)
        assert px[0, 0] == 65535  # |2j| maps to white
        assert px[1, 1] == 0      # |1j| is the low end of the range


class TestParser:
    def test_version_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0

    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
