import hashlib
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from metromd.harness import ConfigError, load_config, parse_config, run_experiment
from metromd.harness.cli import main
from metromd.harness.config import with_overrides
from metromd.harness.runners import leg_seed

STAT = """\
# tiny stationarity run
experiment = stationarity
samples = 4000   # steps
burn_in = 100
thin = 10
n_bins = 10
"""

BLOWUP = """\
experiment = blowup_demo
n_particles = 9
samples = 30
burn_in = 50
step_log = 10
"""


def blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class TestConfig:
    def test_defaults_and_comments(self):
        cfg = parse_config(STAT)
        assert cfg.samples == 4000 and cfg.thin == 10
        assert cfg.n_particles == 1 and cfg.h == (0.05,)
        fluid = parse_config("experiment = autocorr_fluid")
        assert fluid.h == (0.005, 0.0025, 0.00125, 0.000625)
        assert fluid.partition == ("trivial", "per_particle")
        assert fluid.box_for(25) == pytest.approx((25 / 0.8442) ** 0.5)
        assert fluid.energy_bound_for(25) == 2500.0

    def test_lists_and_numbers(self):
        cfg = parse_config("h = 0.01, 0.005\nsamples = 1e4\nt_corr = 0.5\ntau_spacing = 0.02",
                           "autocorr_fluid")
        assert cfg.h == (0.01, 0.005) and cfg.samples == 10000 and isinstance(cfg.samples, int)

    @pytest.mark.parametrize("text, msg", [
        ("experiment = stationarity\nfoo = 1", "unknown key"),
        ("experiment = stationarity\nseed = 1\nseed = 2", "duplicate"),
        ("experiment = stationarity\nseed", "key = value"),
        ("experiment = stationarity\nsamples = 1.5", "integer"),
        ("experiment = stationarity\ntemperature = hot", "temperature"),
        ("experiment = stationarity\ntemperature = -1", "temperature"),
        ("experiment = stationarity\nn_particles = 2", "single particle"),
        ("experiment = nope", "unknown experiment"),
        ("experiment = autocorr_fluid\npartition = bogus", "partition"),
        ("experiment = autocorr_fluid\nh = 0.003", "multiple of 2h"),
        ("experiment = autocorr_fluid\nproposal = respa", "h_fast"),
        ("experiment = autocorr_fluid\nproposal = rattle", "autocorr_dumbbell"),
        ("experiment = autocorr_dumbbell\nproposal = verlet", "rattle"),
        ("experiment = scaling\nh = 0.01, 0.02", "single step"),
        ("experiment = blowup_demo\nh = ", "empty"),
    ])
    def test_errors(self, text, msg):
        with pytest.raises(ConfigError, match=msg):
            parse_config(text)

    def test_experiment_mismatch(self):
        with pytest.raises(ConfigError, match="not"):
            parse_config("experiment = scaling", "stationarity")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.conf")

    def test_overrides_revalidate(self):
        cfg = parse_config(STAT)
        assert with_overrides(cfg, seed=5, samples=None).seed == 5
        with pytest.raises(ConfigError):
            with_overrides(cfg, samples=0)

    @pytest.mark.parametrize("name", ["autocorr_fluid", "autocorr_fluid_box504", "scaling", "stationarity",
                                      "blowup_demo", "autocorr_dumbbell", "autocorr_dumbbell_n30"])
    def test_shipped_configs_parse(self, name):
        from pathlib import Path

        load_config(Path(__file__).parents[1] / "configs" / f"{name}.conf")

    def test_leg_seeds_distinct(self):
        assert leg_seed(1, "a") != leg_seed(1, "b")
        assert leg_seed(1, "a") == leg_seed(1, "a")


def write(tmp_path, text, name="run.conf"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestCli:
    def test_success_and_manifest(self, tmp_path, capsys):
        conf = write(tmp_path, STAT)
        out = tmp_path / "out"
        assert main(["stationarity", "--config", str(conf), "--out", str(out), "--seed", "3"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["ok"] is True
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 3 and manifest["config"]["samples"] == 4000
        assert manifest["wall_clock_s"] >= 0
        for name, digest in manifest["outputs"].items():
            assert digest == blob_sha1((out / name).read_bytes())
        if shutil.which("git"):
            got = subprocess.run(["git", "hash-object", str(out / "histogram.csv")], capture_output=True,
                                 text=True, check=True).stdout.strip()
            assert manifest["outputs"]["histogram.csv"] == got
        lines = (out / "histogram.csv").read_text().splitlines()
        assert lines[0] == "bin_left,count,expected" and len(lines) == 11
        r = manifest["results"]
        assert r["samples"] == 400 and 0 <= r["p_value"] <= 1

    def test_samples_override(self, tmp_path, capsys):
        conf = write(tmp_path, STAT)
        assert main(["stationarity", "--config", str(conf), "--out", str(tmp_path / "o"), "--samples", "500"]) == 0
        assert json.loads((tmp_path / "o" / "manifest.json").read_text())["results"]["steps"] == 500

    def test_deterministic(self, tmp_path, capsys):
        conf = write(tmp_path, STAT)
        for d in ("a", "b"):
            assert main(["stationarity", "--config", str(conf), "--out", str(tmp_path / d)]) == 0
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["outputs"] == mb["outputs"] and ma["results"] == mb["results"]

    @pytest.mark.parametrize("text", ["experiment = stationarity\nbogus = 1",
                                      "experiment = stationarity\nh = -0.1"])
    def test_validation_exit_code(self, tmp_path, capsys, text):
        conf = write(tmp_path, text)
        assert main(["stationarity", "--config", str(conf), "--out", str(tmp_path / "o")]) == 2
        assert "invalid configuration" in capsys.readouterr().err

    def test_missing_config_and_bad_usage(self, tmp_path, capsys):
        assert main(["stationarity", "--config", str(tmp_path / "missing.conf")]) == 2
        assert main(["not_an_experiment", "--config", "x"]) == 2
        assert main(["stationarity"]) == 2

    def test_invariant_exit_code(self, tmp_path, capsys):
        conf = write(tmp_path, BLOWUP + "energy_bound = 0.001\n")
        assert main(["blowup_demo", "--config", str(conf), "--out", str(tmp_path / "o")]) == 3
        assert "invariant violated" in capsys.readouterr().err

    def test_blowup_outputs(self, tmp_path, capsys):
        conf = write(tmp_path, BLOWUP)
        assert main(["blowup_demo", "--config", str(conf), "--out", str(tmp_path / "o")]) == 0
        lines = (tmp_path / "o" / "steps_patched.csv").read_text().splitlines()
        assert lines[0] == "step,n_accepted,mean_delta_h,failures" and len(lines) == 11
        res = json.loads((tmp_path / "o" / "manifest.json").read_text())["results"]
        assert res["unpatched_blew_up"] and res["patched_steps"] == 30
        assert res["patched_accept"] < 0.99

    def test_console_script(self, tmp_path):
        conf = write(tmp_path, STAT)
        proc = subprocess.run([sys.executable, "-m", "metromd.harness.cli", "stationarity", "--config", str(conf),
                               "--out", str(tmp_path / "o")], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert json.loads(proc.stdout)["ok"]


def test_scaling_outputs(tmp_path):
    cfg = parse_config("experiment = scaling\nn_ladder = 8, 27\nsamples = 20\nburn_in = 10")
    report = run_experiment(cfg, tmp_path)
    lines = (tmp_path / "acceptance.csv").read_text().splitlines()
    assert lines[0] == "n_particles,partition_kind,mean_accept_per_particle"
    assert len(lines) == 1 + 2 * 2
    for row in lines[1:]:
        assert 0.0 <= float(row.split(",")[2]) <= 1.0
    assert report.ok


def test_autocorr_outputs(tmp_path):
    cfg = parse_config("experiment = autocorr_fluid\nn_particles = 9\nh = 0.01, 0.005\nt_corr = 0.1\n"
                       "tau_spacing = 0.02\nsamples = 200\nburn_in = 100")
    report = run_experiment(cfg, tmp_path)
    assert report.ok
    head = (tmp_path / "autocorr_per_particle_h0.005.csv").read_text().splitlines()[0]
    assert head == "tau,A_h"
    rich = np.genfromtxt(tmp_path / "richardson.csv", delimiter=",", names=True, dtype=None, encoding=None)
    assert set(rich["partition_kind"]) == {"trivial", "per_particle"}
    assert np.all(rich["eps_h"] >= 0)


@pytest.mark.parametrize("kind", ["autocorr_dumbbell"])
def test_dumbbell_outputs(tmp_path, kind):
    cfg = parse_config("experiment = autocorr_dumbbell\nn_dumbbells = 6\nh = 0.01\nt_corr = 0.1\n"
                       "tau_spacing = 0.02\nsamples = 100\nburn_in = 50")
    report = run_experiment(cfg, tmp_path)
    assert report.ok, report.violations
    assert (tmp_path / "autocorr_per_dumbbell_h0.01.csv").exists()


def test_plot(tmp_path):
    pytest.importorskip("matplotlib")
    from metromd.harness.plot import plot_report

    cfg = parse_config("experiment = scaling\nn_ladder = 8, 27\nsamples = 10\nburn_in = 5")
    report = run_experiment(cfg, tmp_path)
    plot_report(report)
    assert (tmp_path / "acceptance.svg").read_text().lstrip().startswith("<?xml")


def test_parallel_legs_match_serial(tmp_path):
    cfg = parse_config("experiment = scaling\nn_ladder = 8, 27\nsamples = 30\nburn_in = 10")
    a = run_experiment(cfg, tmp_path / "serial", jobs=1)
    b = run_experiment(cfg, tmp_path / "parallel", jobs=2)
    assert (tmp_path / "serial" / "acceptance.csv").read_bytes() == (tmp_path / "parallel" / "acceptance.csv").read_bytes()
    assert a.results["slopes"] == b.results["slopes"]
