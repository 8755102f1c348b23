import os
import tempfile

import numpy as np
import pandas as pd
import pytest

from planecal.cli import main
from planecal.evaluation import position_error_per_sample
from planecal.parser import SampleParser, read_ground_truth, read_samples

SMALL = """\
de:
  population_size: 10
  max_generations: 15
  stall_generations: 5
"""


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("sim"))
    assert main(["simulate", "--seed", "3", "--noise", "0", "--samples", "30", "--out", out]) == 0
    return out


def _config(tmpdir, text=SMALL):
    path = os.path.join(tmpdir, "config.yaml")
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def _table(path):
    return pd.read_csv(path, comment="#")


def test_simulate_writes_plane_files_and_sidecar(simulated):
    names = sorted(os.listdir(simulated))
    assert names == ["ground_truth.json", "samples_plane0.csv", "samples_plane1.csv", "samples_plane2.csv"]
    for pid in range(3):
        samples = read_samples(os.path.join(simulated, f"samples_plane{pid}.csv"))
        assert len(samples) == 30
        assert samples.plane_ids == [pid]


def test_noiseless_files_match_ground_truth(simulated):
    gt = read_ground_truth(os.path.join(simulated, "ground_truth.json"))
    samples = SampleParser(simulated).parse()
    errors = position_error_per_sample(gt.model(), gt.anchor, samples)
    assert np.max(np.abs(errors)) < 1e-9


def test_same_seed_gives_identical_files(simulated):
    with tempfile.TemporaryDirectory() as tmpdir:
        assert main(["simulate", "--seed", "3", "--noise", "0", "--samples", "30", "--out", tmpdir]) == 0
        for name in os.listdir(simulated):
            with open(os.path.join(simulated, name), "rb") as a, open(os.path.join(tmpdir, name), "rb") as b:
                assert a.read() == b.read(), name


def test_simulate_plane_subset():
    with tempfile.TemporaryDirectory() as tmpdir:
        assert main(["simulate", "--planes", "2", "--samples", "5", "--out", tmpdir]) == 0
        assert sorted(f for f in os.listdir(tmpdir) if f.endswith(".csv")) == \
            ["samples_plane0.csv", "samples_plane1.csv"]


def test_select_writes_indices_and_curve(simulated):
    with tempfile.TemporaryDirectory() as tmpdir:
        code = main(["select", "--config", _config(tmpdir), "--samples", simulated,
                     "--k", "10", "--curve", "5,10", "--out", tmpdir])
        assert code == 0
        selected = _table(os.path.join(tmpdir, "selected.csv"))
        assert len(selected) == 30
        assert selected.groupby("plane_id")["index"].nunique().tolist() == [10, 10, 10]
        curve = _table(os.path.join(tmpdir, "curve.csv"))
        assert len(curve) == 6
        assert list(curve.columns) == ["plane_id", "K", "index", "index_per_sqrt_k"]
        assert len(read_samples(os.path.join(tmpdir, "samples_selected.csv"))) == 30


def test_calibrate_writes_parameters_and_trace(simulated):
    with tempfile.TemporaryDirectory() as tmpdir:
        assert main(["calibrate", "--samples", simulated, "--method", "ampc", "--out", tmpdir]) == 0
        params = _table(os.path.join(tmpdir, "parameters_ampc.csv"))
        assert list(params["joint"]) == [1, 2, 3, 4, 5, 6]
        assert "delta_theta_deg" in params.columns
        trace = _table(os.path.join(tmpdir, "trace_ampc.csv"))
        assert len(trace) >= 1
        assert list(trace.columns) == ["iteration", "objective", "step_norm"]


def test_calibrate_unknown_method_is_usage_error(simulated):
    with pytest.raises(SystemExit) as info:
        main(["calibrate", "--samples", simulated, "--method", "pso"])
    assert info.value.code == 2


def test_calibrate_without_samples_fails():
    with tempfile.TemporaryDirectory() as tmpdir:
        assert main(["calibrate", "--out", tmpdir]) == 1


def test_missing_config_is_usage_error():
    assert main(["evaluate", "--config", "/nonexistent/config.yaml"]) == 2


def test_evaluate_unknown_methods_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["evaluate", "--methods", "ampc,pso"])
    assert info.value.code == 2


def test_evaluate_writes_report():
    config = SMALL + "samples_per_plane: 30\nsubsample_per_plane: null\ntrain_fraction: 0.5\nbudget: full\n"
    with tempfile.TemporaryDirectory() as tmpdir:
        code = main(["evaluate", "--config", _config(tmpdir, config), "--methods", "ls", "--repeats", "2",
                     "--planes", "3", "--noise", "0", "--out", tmpdir])
        assert code == 0
        for name in ("report.txt", "runs.csv", "summary.csv", "improvement.csv", "error_table.csv"):
            assert os.path.exists(os.path.join(tmpdir, name)), name
        summary = _table(os.path.join(tmpdir, "summary.csv"))
        ls = summary[(summary["method"] == "ls") & (summary["surface"] == "test")].iloc[0]
        assert ls["runs"] == 2
        assert not np.isnan(ls["rmse_std"])
        runs = _table(os.path.join(tmpdir, "runs.csv"))
        assert set(runs["repetition"]) == {0, 1}
        with open(os.path.join(tmpdir, "report.txt"), encoding="utf-8") as f:
            assert f.readline().startswith("# config: ")
        assert len(_table(os.path.join(tmpdir, "error_table.csv"))) == 30
