from typing import List, Optional

import numpy as np
import pandas as pd

from planecal.models import ExperimentReport, MethodRun

METRICS = ["rmse", "mean_abs", "max_abs", "sample_std"]
KEYS = ["plane_count", "method", "surface"]
METHOD_ORDER = ["before", "ampc", "mcs+ampc", "lm", "ls"]

# Display labels for the spreadsheet export
COLUMN_LABELS = {
    "plane_count": "Planos",
    "method": "Método",
    "surface": "Conjunto",
    "rmse": "RMSE (mm)",
    "mean_abs": "Erro Médio (mm)",
    "max_abs": "Erro Máximo (mm)",
    "sample_std": "Desvio Padrão (mm)",
    "iterations": "Iterações",
    "wall_time": "Tempo (s)",
    "runs": "Execuções",
    "failures": "Falhas",
    "unconverged": "Sem Convergência",
    "status": "Situação",
}
SURFACE_LABELS = {"train": "treino", "test": "teste", "cartesian": "cartesiano"}


def _rows(run: MethodRun) -> List[dict]:
    base = {
        "repetition": run.repetition,
        "plane_count": run.plane_count,
        "method": run.method,
        "iterations": run.iterations,
        "wall_time": run.wall_time,
        "converged": run.converged,
        "status": run.status,
        "anchor_error": run.anchor_error,
        "error": run.error or "",
    }
    rows = []
    for surface in ("train", "test"):
        metrics = getattr(run, surface)
        values = metrics.model_dump() if metrics else {m: np.nan for m in METRICS + ["n"]}
        rows.append({**base, "surface": surface, **values})
    if run.cartesian_test_rmse is not None:
        rows.append({**base, "surface": "cartesian", "rmse": run.cartesian_test_rmse})
    return rows


def combine(report: ExperimentReport) -> pd.DataFrame:
    """One row per (repetition, plane count, method, metric surface)."""
    df = pd.DataFrame([row for run in report.runs for row in _rows(run)])
    if df.empty:
        return pd.DataFrame(columns=["repetition", *KEYS, *METRICS, "n", "status", "error"])
    order = {m: i for i, m in enumerate(METHOD_ORDER)}
    df["_order"] = df["method"].map(order)
    df = df.sort_values(["repetition", "plane_count", "_order", "surface"], kind="stable").drop(columns="_order")
    column_order = ["repetition", *KEYS, *METRICS, "n", "iterations", "wall_time", "converged", "status", "anchor_error", "error"]
    return df[[c for c in column_order if c in df.columns]].reset_index(drop=True)


def summarize(runs: pd.DataFrame) -> pd.DataFrame:
    """Mean and sample standard deviation of every metric per (plane count, method, surface).

    Failed runs (errors, or divergence caught by the harness) are excluded
    from the statistics and counted separately. Runs that hit their
    iteration cap stay in and are counted under "unconverged".
    """
    values = [c for c in METRICS + ["iterations", "wall_time"] if c in runs.columns]
    frame = runs[KEYS].copy()
    frame["ok"] = runs["status"] != "failed"
    frame["unconverged"] = runs["status"] == "unconverged"
    for v in values:
        frame[v] = pd.to_numeric(runs[v], errors="coerce").where(frame["ok"])
    grouped = frame.groupby(KEYS, sort=False)
    mean = grouped[values].mean().add_suffix("_mean")
    std = grouped[values].std(ddof=1).add_suffix("_std")
    summary = mean.join(std)
    summary["runs"] = grouped["ok"].sum().astype(int)
    summary["failures"] = grouped["ok"].size() - summary["runs"]
    summary["unconverged"] = grouped["unconverged"].sum().astype(int)
    columns = [f"{v}_{stat}" for v in values for stat in ("mean", "std")] + ["runs", "failures", "unconverged"]
    return summary[columns].reset_index()


def relative_improvement(
    summary: pd.DataFrame,
    baseline: str = "before",
    surface: str = "test",
    metric: str = "rmse",
) -> pd.DataFrame:
    """Percentage reduction of `metric` against `baseline`, per plane count and method."""
    col = f"{metric}_mean"
    table = summary[summary["surface"] == surface].pivot(index="plane_count", columns="method", values=col)
    if baseline not in table.columns:
        raise KeyError(f"baseline method {baseline!r} not in the summary")
    improvement = (1.0 - table.div(table[baseline], axis=0)) * 100.0
    improvement = improvement.drop(columns=baseline)
    return improvement.reset_index().melt(id_vars="plane_count", var_name="method",
                                          value_name=f"{metric}_improvement_pct")


def method_gap(summary: pd.DataFrame, method: str, reference: str, surface: str = "test",
               metric: str = "rmse") -> Optional[pd.Series]:
    """Relative difference (%) of `method` against `reference` per plane count; negative is better."""
    col = f"{metric}_mean"
    table = summary[summary["surface"] == surface].pivot(index="plane_count", columns="method", values=col)
    if method not in table.columns or reference not in table.columns:
        return None
    return (table[method] / table[reference] - 1.0) * 100.0
