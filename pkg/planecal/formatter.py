import logging
import math
import os
import unicodedata
from typing import Dict, Optional, Sequence

import pandas as pd

from planecal.combiner import COLUMN_LABELS, METRICS, SURFACE_LABELS, combine, relative_improvement, summarize
from planecal.models import ExperimentReport

logger = logging.getLogger(__name__)

REPORT_FILES = {
    "text": "report.txt",
    "runs": "runs.csv",
    "summary": "summary.csv",
    "improvement": "improvement.csv",
    "excel": "report.xlsx",
}


def format_number(value, digits: int = 3) -> str:
    """Brazilian decimal comma; NaN and None become an empty string."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{float(value):.{digits}f}".replace(".", ",")


def format_mean_std(mean, std, digits: int = 3) -> str:
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return ""
    if std is None or (isinstance(std, float) and math.isnan(std)):
        return format_number(mean, digits)
    return f"{format_number(mean, digits)} ± {format_number(std, digits)}"


def clean_cell(value):
    """Excel-safe cell: sequences joined by commas, missing values blank, text NFC-normalized."""
    if isinstance(value, (list, tuple)):
        value = ", ".join(str(item) for item in value)
    elif hasattr(value, "tolist") and callable(value.tolist) and not isinstance(value, (int, float)):
        value = value.tolist()
        if isinstance(value, list):
            value = ", ".join(str(item) for item in value)
    if value is None or (not isinstance(value, str) and pd.isna(value)):
        return ""
    if isinstance(value, str):
        return unicodedata.normalize("NFC", value)
    return value


def to_display(summary: pd.DataFrame, digits: int = 3) -> pd.DataFrame:
    """Summary with "mean ± std" text cells and Portuguese headers."""
    df = summary[["plane_count", "method", "surface"]].copy()
    df["surface"] = df["surface"].map(lambda s: SURFACE_LABELS.get(s, s))
    for metric in METRICS + ["iterations", "wall_time"]:
        if f"{metric}_mean" not in summary.columns:
            continue
        df[metric] = [format_mean_std(m, s, digits)
                      for m, s in zip(summary[f"{metric}_mean"], summary[f"{metric}_std"])]
    df["runs"] = summary["runs"]
    df["failures"] = summary["failures"]
    df["unconverged"] = summary["unconverged"]
    return df.rename(columns=COLUMN_LABELS)


def to_excel(sheets: Dict[str, pd.DataFrame], path: str) -> str:
    """Write one sheet per frame; falls back to one CSV per sheet if openpyxl fails.

    Returns the path actually written.
    """
    cleaned = {}
    for name, df in sheets.items():
        df_clean = df.copy()
        for column in df_clean.columns:
            if df_clean[column].dtype == "object":
                df_clean[column] = df_clean[column].apply(clean_cell)
        cleaned[name] = df_clean

    try:
        with pd.ExcelWriter(path, engine="openpyxl") as writer:
            for name, df_clean in cleaned.items():
                df_clean.to_excel(writer, sheet_name=name[:31], index=False)
        return path
    except Exception as e:
        base = os.path.splitext(path)[0]
        for name, df_clean in cleaned.items():
            df_clean.to_csv(f"{base}_{name}.csv", index=False, encoding="utf-8-sig")
        logger.warning("could not save %s (%s); wrote CSV sheets next to it instead", path, e)
        return f"{base}_{next(iter(cleaned))}.csv"


def _write_csv(df: pd.DataFrame, path: str, comments: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        df.to_csv(fh, index=False, lineterminator="\n")


def render_text(report: ExperimentReport, summary: pd.DataFrame, improvement: Optional[pd.DataFrame]) -> str:
    lines = [f"repetitions: {report.repeats}"]
    if report.partial:
        lines.append("PARTIAL: at least one run failed, see runs.csv")
    for (count, surface), block in summary.groupby(["plane_count", "surface"], sort=True):
        lines.append("")
        lines.append(f"{count} plane(s), {surface}")
        for _, row in block.iterrows():
            rmse = f"{row['rmse_mean']:.4f} ± {row['rmse_std']:.4f}" if not pd.isna(row["rmse_std"]) \
                else f"{row['rmse_mean']:.4f}"
            tail = f"  failures={int(row['failures'])}" if row["failures"] else ""
            if row["unconverged"]:
                tail += f"  unconverged={int(row['unconverged'])}"
            lines.append(f"  {row['method']:<9} rmse {rmse} mm  (n={int(row['runs'])}){tail}")
    if improvement is not None and not improvement.empty:
        lines.append("")
        lines.append("test RMSE reduction vs. before (%)")
        for _, row in improvement.iterrows():
            lines.append(f"  {int(row['plane_count'])} plane(s) {row['method']:<9} "
                         f"{row['rmse_improvement_pct']:.1f}")
    return "\n".join(lines) + "\n"


def write_report(report: ExperimentReport, out_dir: str, comments: Sequence[str] = ()) -> Dict[str, str]:
    """Write the text summary, per-run and summary CSVs and the spreadsheet.

    Returns the written paths keyed like REPORT_FILES.
    """
    os.makedirs(out_dir, exist_ok=True)
    runs = combine(report)
    summary = summarize(runs) if not runs.empty else pd.DataFrame()
    try:
        improvement = relative_improvement(summary) if not summary.empty else None
    except KeyError:
        improvement = None

    paths = {key: os.path.join(out_dir, name) for key, name in REPORT_FILES.items()}
    _write_csv(runs, paths["runs"], comments)
    _write_csv(summary, paths["summary"], comments)
    if improvement is not None:
        _write_csv(improvement, paths["improvement"], comments)
    else:
        paths.pop("improvement")
    with open(paths["text"], "w", encoding="utf-8") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        fh.write(render_text(report, summary, improvement) if not summary.empty else "no successful runs\n")

    sheets = {"resumo": to_display(summary)} if not summary.empty else {}
    sheets["execucoes"] = runs
    paths["excel"] = to_excel(sheets, paths["excel"])
    logger.info("report written to %s", out_dir)
    return paths
