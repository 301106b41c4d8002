"""CSV writers for round traces, bound profiles and sweep tables.

Every file is written to a temporary sibling first and renamed into place.
"""

import csv
import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

from tenacity import (
    before_sleep_log,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

logger = logging.getLogger("nbafl.traces")

PathLike = Union[str, Path]

TRACE_HEADER = (
    "round",
    "train_loss",
    "test_loss",
    "test_acc",
    "sigma_uplink",
    "sigma_downlink",
    "sigma_aggregate",
    "scheduled_k",
    "seed",
)
SWEEP_LONG_HEADER = ("variable", "value", "seed", "final_train_loss", "final_test_acc", "error")
SWEEP_SUMMARY_HEADER = (
    "variable",
    "value",
    "n_seeds",
    "mean_final_train_loss",
    "stderr_final_train_loss",
    "mean_final_test_acc",
    "stderr_final_test_acc",
    "failed_cells",
)
COMPARISON_HEADER = ("round", "mean_train_loss_gap", "stderr", "bound", "dominated")


def trace_filename(seed: int) -> str:
    return f"run_{seed}.csv"


def format_value(value: Any) -> str:
    """Reals get 17 significant digits; None becomes an empty field."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def parse_real(field: str) -> Optional[float]:
    return None if field == "" else float(field)


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    retry=retry_if_exception_type(OSError),
    before_sleep=before_sleep_log(logger, logging.WARNING),
    reraise=True,
)
def _replace(src: str, dst: Path) -> None:
    os.replace(src, dst)


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Write text next to path, then rename it over path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        _replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.info(f"Wrote {path}")
    return path


def render_csv(header: Sequence[str], rows: Iterable[dict]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(row.get(column)) for column in header])
    return buffer.getvalue()


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[dict]) -> Path:
    return atomic_write_text(path, render_csv(header, rows))


def write_trace_csv(path: PathLike, traces: Sequence, seed: int) -> Path:
    """One row per round, columns exactly TRACE_HEADER."""
    return write_csv(path, TRACE_HEADER, (trace.to_row(seed) for trace in traces))


def read_csv(path: PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def read_trace_csv(path: PathLike) -> list[dict[str, float]]:
    """Parse a trace file back into numeric rows; rejects foreign headers."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_HEADER:
            raise ValueError(f"{path}: not a trace file (header {header!r})")
        rows = []
        for fields in reader:
            row = {column: parse_real(value) for column, value in zip(header, fields)}
            row["round"] = int(row["round"])
            row["scheduled_k"] = int(row["scheduled_k"])
            row["seed"] = int(row["seed"])
            rows.append(row)
    return rows


def write_profile_csv(path: PathLike, variable: str, rows: Sequence) -> Path:
    """Bound profile: the grid variable, its bound value and a regime flag."""
    header = (variable, "bound_value", "regime_flag")
    return write_csv(
        path,
        header,
        ({variable: row.x, "bound_value": row.value, "regime_flag": row.flag} for row in rows),
    )
