"""Seed-averaged summaries of run traces and their comparison with the bound."""

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import sem

from .bounds import LossRegularity, theorem2_recursion
from .privacy import downlink_sensitivity, gaussian_constant
from .traces import read_trace_csv

logger = logging.getLogger("nbafl.report")


def mean_and_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and standard error of the mean; a single value has stderr 0."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(sem(arr))


@dataclass(frozen=True)
class ComparisonRow:
    round: int
    mean_train_loss_gap: float
    stderr: float
    bound: Optional[float]

    @property
    def dominated(self) -> Optional[bool]:
        if self.bound is None:
            return None
        return self.mean_train_loss_gap <= self.bound

    def to_row(self) -> dict:
        return {
            "round": self.round,
            "mean_train_loss_gap": self.mean_train_loss_gap,
            "stderr": self.stderr,
            "bound": self.bound,
            "dominated": self.dominated,
        }


class TraceCollection:
    """Trace files of repeated runs (one per seed) of the same configuration."""

    def __init__(self):
        self.runs: dict[int, list[dict[str, float]]] = {}

    def add_file(self, path: Union[str, Path]):
        rows = read_trace_csv(path)
        if not rows:
            raise ValueError(f"{path}: trace has no rows")
        seed = rows[0]["seed"]
        if seed in self.runs:
            raise ValueError(f"{path}: duplicate trace for seed {seed}")
        if self.runs:
            expected = len(next(iter(self.runs.values())))
            if len(rows) != expected:
                raise ValueError(f"{path}: {len(rows)} rounds, other traces have {expected}")
        self.runs[seed] = rows
        logger.debug(f"Added trace for seed {seed} from {path}")

    @property
    def rounds(self) -> int:
        return len(next(iter(self.runs.values()))) if self.runs else 0

    def per_round(self, column: str) -> list[tuple[int, float, float]]:
        """(round, mean, stderr) of a trace column across seeds."""
        by_round: dict[int, list[float]] = defaultdict(list)
        for rows in self.runs.values():
            for row in rows:
                by_round[row["round"]].append(row[column])
        return [(t, *mean_and_stderr(values)) for t, values in sorted(by_round.items())]

    def get_summary(self) -> dict:
        if not self.runs:
            return {"n_seeds": 0, "message": "No traces loaded"}
        finals = [rows[-1] for rows in self.runs.values()]
        loss_mean, loss_se = mean_and_stderr([r["train_loss"] for r in finals])
        acc_mean, acc_se = mean_and_stderr([r["test_acc"] for r in finals])
        return {
            "n_seeds": len(self.runs),
            "rounds": self.rounds,
            "mean_final_train_loss": loss_mean,
            "stderr_final_train_loss": loss_se,
            "mean_final_test_acc": acc_mean,
            "stderr_final_test_acc": acc_se,
        }


def bound_trajectory(
    T: int,
    epsilon: float,
    delta: float,
    N: int,
    m: int,
    clip_c: float,
    reg: LossRegularity,
    mu: float,
) -> list[float]:
    """Per-round gap bound of a T-round all-client run, sensitivity 2C/(mN)."""
    ds = downlink_sensitivity(clip_c, m, 1.0 / N)
    return theorem2_recursion(T, epsilon, N, ds, gaussian_constant(delta), reg, mu)


def compare_with_bound(
    traces: TraceCollection, f_star: float, bounds: Optional[Sequence[float]]
) -> list[ComparisonRow]:
    """Join the seed-averaged gap F(w_t) - f_star with a per-round bound."""
    rows = []
    for t, mean, se in traces.per_round("train_loss"):
        bound = bounds[t - 1] if bounds is not None and t <= len(bounds) else None
        rows.append(ComparisonRow(t, mean - f_star, se, bound))
    dominated = sum(1 for r in rows if r.dominated)
    logger.info(f"Bound dominates the empirical gap on {dominated}/{len(rows)} rounds")
    return rows
