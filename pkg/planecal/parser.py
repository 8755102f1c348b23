import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from planecal.exceptions import SampleFormatError, SampleParseError
from planecal.models import N_JOINTS, GroundTruth, SampleSet

logger = logging.getLogger(__name__)

JOINT_COLUMNS = [f"j{i}_deg" for i in range(1, N_JOINTS + 1)]
HEADER = JOINT_COLUMNS + ["cable_mm", "dial_mm", "plane_id"]
COMMENT_PREFIX = "#"
FLOAT_FORMAT = "%.17g"


def _split_comments(text: str):
    lines = text.split("\n")
    n = 0
    while n < len(lines) and lines[n].startswith(COMMENT_PREFIX):
        n += 1
    return lines[:n], "\n".join(lines[n:])


def _to_float(value, line: int, column: str, path: Optional[str]) -> float:
    if value is None or (isinstance(value, float) and np.isnan(value)) or str(value).strip() == "":
        raise SampleParseError(f"missing value for {column}", line=line, path=path)
    try:
        out = float(value)
    except ValueError:
        raise SampleParseError(f"{column}: not a number: {value!r}", line=line, path=path) from None
    if not np.isfinite(out):
        raise SampleParseError(f"{column}: non-finite value {value!r}", line=line, path=path)
    return out


def read_samples(path: str) -> SampleSet:
    """Read a sample CSV; angles in degrees on disk, radians in memory.

    Leading `#` lines (config provenance) are skipped.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    comments, body = _split_comments(text)
    first = len(comments) + 1  # 1-based line of the header

    header_line = body.split("\n", 1)[0].strip()
    if header_line.split(",") != HEADER:
        raise SampleFormatError(f"{path}: unexpected header {header_line!r}, expected {','.join(HEADER)!r}")

    for offset, line in enumerate(body.split("\n")[1:], start=first + 1):
        if line.strip() and len(line.split(",")) != len(HEADER):
            raise SampleParseError(f"expected {len(HEADER)} fields, got {len(line.split(','))}",
                                   line=offset, path=path)

    df = pd.read_csv(io.StringIO(body), dtype=str, keep_default_na=False, skip_blank_lines=True)
    n = len(df)
    joints = np.zeros((n, N_JOINTS))
    cable = np.zeros(n)
    dial = np.zeros(n)
    plane = np.zeros(n, dtype=int)
    lines = [i for i, line in enumerate(body.split("\n")[1:], start=first + 1) if line.strip()]
    for i, (line_no, row) in enumerate(zip(lines, df.itertuples(index=False))):
        values = [_to_float(v, line_no, c, path) for v, c in zip(row, HEADER)]
        joints[i] = np.deg2rad(values[:N_JOINTS])
        cable[i], dial[i] = values[N_JOINTS], values[N_JOINTS + 1]
        pid = values[-1]
        if pid < 0 or pid != int(pid):
            raise SampleParseError(f"plane_id must be a non-negative integer, got {row[-1]!r}", line=line_no, path=path)
        plane[i] = int(pid)
    return SampleSet(joints=joints, cable_mm=cable, dial_mm=dial, plane_id=plane)


def samples_to_frame(samples: SampleSet) -> pd.DataFrame:
    df = pd.DataFrame(np.rad2deg(samples.joints), columns=JOINT_COLUMNS)
    df["cable_mm"] = samples.cable_mm
    df["dial_mm"] = samples.dial_mm
    df["plane_id"] = samples.plane_id.astype(int)
    return df


def write_samples(samples: SampleSet, path: str, comments: Sequence[str] = ()) -> None:
    """Write samples as UTF-8 CSV, optionally preceded by `# ...` comment lines."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for comment in comments:
            fh.write(f"{COMMENT_PREFIX} {comment}\n")
        samples_to_frame(samples).to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_ground_truth(gt: GroundTruth, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(gt.model_dump_json(indent=2))


def read_ground_truth(path: str) -> GroundTruth:
    with open(path, "r", encoding="utf-8") as fh:
        return GroundTruth.model_validate_json(fh.read())


class SampleParser:
    """Read one sample file or every `*.csv` sample file in a directory."""

    def __init__(self, source_path: str):
        self.source_path = source_path

    def _sample_files(self) -> List[str]:
        if os.path.isdir(self.source_path):
            return sorted(
                os.path.join(self.source_path, f)
                for f in os.listdir(self.source_path)
                if f.lower().endswith(".csv") and f.startswith("samples")
            )
        if os.path.isfile(self.source_path):
            return [self.source_path]
        raise FileNotFoundError(f"no sample file or directory at {self.source_path}")

    def parse(self, max_workers: int = 8) -> SampleSet:
        """Parse all files in parallel; the result follows sorted file order."""
        files = self._sample_files()
        if not files:
            raise FileNotFoundError(f"no sample files in {self.source_path}")
        parsed: Dict[str, SampleSet] = {}
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            futures = {ex.submit(read_samples, f): f for f in files}
            for fut in as_completed(futures):
                parsed[futures[fut]] = fut.result()
        samples = SampleSet.concat([parsed[f] for f in files])
        logger.info("read %d samples from %d file(s)", len(samples), len(files))
        return samples
