import math
import os
import tempfile

import numpy as np
import pandas as pd
import pytest

from planecal.combiner import combine, method_gap, relative_improvement, summarize
from planecal.evaluation import compute_metrics
from planecal.formatter import clean_cell, format_mean_std, to_display, to_excel, write_report
from planecal.models import ExperimentReport, MethodRun


def _run(rep, method, rmse, plane_count=3, error=None):
    metrics = compute_metrics([rmse, -rmse]) if error is None else None
    return MethodRun(repetition=rep, method=method, plane_count=plane_count, train=metrics, test=metrics,
                     iterations=None if error else 5, wall_time=0.1, converged=error is None, error=error)


@pytest.fixture
def report():
    runs = []
    for rep, (before, ampc, lm) in enumerate([(2.5, 0.50, 0.60), (2.7, 0.52, 0.58)]):
        runs += [_run(rep, "before", before), _run(rep, "ampc", ampc), _run(rep, "lm", lm)]
    runs.append(_run(1, "ls", 0.0, error="NumericalFailureError: singular system"))
    return ExperimentReport(runs=runs, repeats=2, partial=True)


def test_combine(report):
    df = combine(report)
    # train and test rows per run
    assert len(df) == 2 * len(report.runs)
    first = df.iloc[0]
    assert first["method"] == "before"
    assert first["surface"] == "test"
    assert first["rmse"] == pytest.approx(2.5)
    assert set(df["surface"]) == {"train", "test"}


def test_combine_cartesian_surface():
    run = _run(0, "ampc", 0.5)
    run.cartesian_test_rmse = 0.01
    df = combine(ExperimentReport(runs=[run], repeats=1))
    cart = df[df["surface"] == "cartesian"]
    assert len(cart) == 1
    assert cart.iloc[0]["rmse"] == pytest.approx(0.01)


def test_combine_empty_report():
    df = combine(ExperimentReport(runs=[], repeats=1))
    assert df.empty
    assert "rmse" in df.columns


def test_summarize_mean_and_sample_std(report):
    summary = summarize(combine(report))
    row = summary[(summary["method"] == "ampc") & (summary["surface"] == "test")].iloc[0]
    assert row["rmse_mean"] == pytest.approx(0.51)
    assert row["rmse_std"] == pytest.approx(np.std([0.50, 0.52], ddof=1))
    assert row["runs"] == 2
    assert row["failures"] == 0


def test_failed_runs_are_counted_not_averaged(report):
    summary = summarize(combine(report))
    ls = summary[(summary["method"] == "ls") & (summary["surface"] == "test")].iloc[0]
    assert ls["runs"] == 0
    assert ls["failures"] == 1
    assert math.isnan(ls["rmse_mean"])


def test_status_column(report):
    stalled = _run(1, "lm", 0.70)
    stalled.converged = False
    df = combine(report.model_copy(update={"runs": [*report.runs, stalled]}))
    assert set(df[df["method"] == "ls"]["status"]) == {"failed"}
    assert set(df[df["method"] == "ampc"]["status"]) == {"ok"}
    assert (df["status"] == "unconverged").sum() == 2  # train and test rows


def test_unconverged_runs_are_averaged_and_counted(report):
    stalled = _run(1, "lm", 0.70)
    stalled.converged = False
    runs = [r for r in report.runs if not (r.method == "lm" and r.repetition == 1)] + [stalled]
    summary = summarize(combine(report.model_copy(update={"runs": runs})))
    lm = summary[(summary["method"] == "lm") & (summary["surface"] == "test")].iloc[0]
    assert lm["runs"] == 2
    assert lm["unconverged"] == 1
    assert lm["rmse_mean"] == pytest.approx(0.65)
    ampc = summary[(summary["method"] == "ampc") & (summary["surface"] == "test")].iloc[0]
    assert ampc["unconverged"] == 0


def test_relative_improvement(report):
    summary = summarize(combine(report))
    table = relative_improvement(summary)
    ampc = table[table["method"] == "ampc"].iloc[0]
    assert ampc["rmse_improvement_pct"] == pytest.approx((1 - 0.51 / 2.6) * 100)
    assert "before" not in set(table["method"])
    with pytest.raises(KeyError):
        relative_improvement(summary, baseline="nope")


def test_method_gap(report):
    summary = summarize(combine(report))
    gap = method_gap(summary, "ampc", "lm")
    assert gap.loc[3] == pytest.approx((0.51 / 0.59 - 1) * 100)
    assert method_gap(summary, "ampc", "mcs+ampc") is None


def test_brazilian_number_format():
    assert format_mean_std(0.5501, 0.0123) == "0,550 ± 0,012"
    assert format_mean_std(2.0, float("nan"), digits=1) == "2,0"
    assert format_mean_std(float("nan"), 0.1) == ""


def test_display_table_headers(report):
    display = to_display(summarize(combine(report)))
    assert "RMSE (mm)" in display.columns
    assert "Método" in display.columns
    assert set(display["Conjunto"]) == {"treino", "teste"}


def test_special_character_cleaning():
    """Test that cells are made safe for the spreadsheet export."""
    test_cases = [
        ("Me\u0301todo", "Método"),  # decomposed accent is recomposed
        (["ampc", "lm"], "ampc, lm"),
        (np.array([1, 2]), "1, 2"),
        (None, ""),
        (float("nan"), ""),
        ("Normal text", "Normal text"),
        (1.5, 1.5),
    ]
    for value, expected in test_cases:
        result = clean_cell(value)
        assert result == expected, f"Expected {expected!r}, got {result!r} for input {value!r}"


def test_combine_keeps_repetition_order(report):
    df = combine(report)
    assert list(df["repetition"]) == sorted(df["repetition"])
    assert isinstance(df, pd.DataFrame)


def test_write_report_files(report):
    with tempfile.TemporaryDirectory() as tmp:
        paths = write_report(report, tmp, ["config: {}"])
        for key in ("text", "runs", "summary", "improvement", "excel"):
            assert os.path.exists(paths[key]), f"{key} file missing"
        with open(paths["text"], encoding="utf-8") as fh:
            text = fh.read()
        assert text.startswith("# config: {}")
        assert "PARTIAL" in text
        summary = pd.read_csv(paths["summary"], comment="#")
        assert {"rmse_mean", "rmse_std", "runs", "failures", "unconverged"} <= set(summary.columns)
        # CSV keeps a decimal point; only the spreadsheet summary uses a decimal comma
        assert summary["rmse_mean"].dtype.kind == "f"
        runs = pd.read_csv(paths["runs"], comment="#")
        assert set(runs["status"]) == {"ok", "failed"}


def test_write_report_without_baseline_skips_improvement():
    report = ExperimentReport(runs=[_run(0, "ampc", 0.5), _run(1, "ampc", 0.6)], repeats=2)
    with tempfile.TemporaryDirectory() as tmp:
        paths = write_report(report, tmp)
        assert "improvement" not in paths
        assert not os.path.exists(os.path.join(tmp, "improvement.csv"))


def test_to_excel_falls_back_to_csv(monkeypatch):
    """If the spreadsheet writer fails, every sheet is written as CSV."""
    def broken_writer(*args, **kwargs):
        raise RuntimeError("no spreadsheet engine")

    monkeypatch.setattr(pd, "ExcelWriter", broken_writer)
    sheets = {"resumo": pd.DataFrame({"Método": ["ampc"]}), "execucoes": pd.DataFrame({"rmse": [0.5]})}
    with tempfile.TemporaryDirectory() as tmp:
        written = to_excel(sheets, os.path.join(tmp, "report.xlsx"))
        assert written == os.path.join(tmp, "report_resumo.csv")
        assert os.path.exists(os.path.join(tmp, "report_execucoes.csv"))
        assert not os.path.exists(os.path.join(tmp, "report.xlsx"))
