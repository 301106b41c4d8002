"""Experiment sweeps over one configuration variable and several seeds."""

import logging
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from .bounds import optimal_K
from .config import RunConfigFile
from .data_io import LabeledDataset
from .orchestrator import run_nbafl
from .parallel import map_ordered
from .privacy import ScheduleMode
from .report import mean_and_stderr
from .traces import (
    SWEEP_LONG_HEADER,
    SWEEP_SUMMARY_HEADER,
    trace_filename,
    write_csv,
    write_trace_csv,
)

logger = logging.getLogger("nbafl.sweep")

MIN_SEEDS_FOR_K_STAR = 5


class SweepVariable(str, Enum):
    EPSILON = "epsilon"
    N_CLIENTS = "n_clients"
    K_CLIENTS = "k_clients"
    ROUNDS = "rounds"


@dataclass
class SweepCell:
    variable: SweepVariable
    value: Any
    seed: int
    success: bool = False
    error: Optional[str] = None
    final_train_loss: Optional[float] = None
    final_test_acc: Optional[float] = None

    def to_row(self) -> dict:
        return {
            "variable": self.variable.value,
            "value": self.value,
            "seed": self.seed,
            "final_train_loss": self.final_train_loss,
            "final_test_acc": self.final_test_acc,
            "error": self.error,
        }


def apply_value(cfg: RunConfigFile, variable: SweepVariable, value, seed: int) -> RunConfigFile:
    """Config for one sweep cell. K = N switches to all-client scheduling."""
    variable = SweepVariable(variable)
    if variable is SweepVariable.EPSILON:
        return cfg.with_overrides(epsilon=float(value), seed=seed)
    if variable is SweepVariable.N_CLIENTS:
        return cfg.with_overrides(n_clients=int(value), seed=seed)
    if variable is SweepVariable.ROUNDS:
        return cfg.with_overrides(rounds=int(value), seed=seed)
    data = cfg.dict(exclude_none=True)
    data.pop("k_clients", None)
    if int(value) == cfg.n_clients:
        data["schedule"] = ScheduleMode.ALL_CLIENTS
    else:
        data.update(schedule=ScheduleMode.K_RANDOM, k_clients=int(value))
    return RunConfigFile(**data).with_overrides(seed=seed)


def parse_values(variable: SweepVariable, text: str) -> list:
    """Comma-separated sweep values; epsilon is real, the rest are integers."""
    cast = float if SweepVariable(variable) is SweepVariable.EPSILON else int
    values = [cast(part) for part in text.split(",") if part.strip()]
    if not values:
        raise ValueError("no sweep values given")
    return values


class SweepRunner:
    """Runs every (value, seed) cell; a failing cell is recorded and the sweep continues."""

    def __init__(
        self,
        cfg: RunConfigFile,
        variable: SweepVariable,
        values: list,
        seeds: int,
        train: LabeledDataset,
        test: LabeledDataset,
    ):
        if seeds < 1:
            raise ValueError(f"seeds must be >= 1, got {seeds}")
        self.cfg = cfg
        self.variable = SweepVariable(variable)
        self.values = list(values)
        self.seeds = seeds
        self.train = train
        self.test = test
        # seed j of every value is base + j, so values are compared on common random numbers
        self.cells = [
            SweepCell(self.variable, value, cfg.seed + j)
            for value in self.values
            for j in range(seeds)
        ]

    def _cell_dir(self, out_dir: Path, cell: SweepCell) -> Path:
        return out_dir / f"{self.variable.value}_{cell.value}"

    def _execute(self, cell: SweepCell, out_dir: Optional[Path]) -> SweepCell:
        logger.info(f"Sweep cell {self.variable.value}={cell.value} seed={cell.seed}")
        try:
            cfg = apply_value(self.cfg, self.variable, cell.value, cell.seed)
            result = run_nbafl(cfg.to_fl_config(), self.train, self.test)
            if out_dir is not None:
                write_trace_csv(
                    self._cell_dir(out_dir, cell) / trace_filename(cell.seed),
                    result.traces,
                    cell.seed,
                )
            final = result.final_row()
            cell.final_train_loss = final["train_loss"]
            cell.final_test_acc = final["test_acc"]
            cell.success = True
        except Exception as e:
            cell.success = False
            cell.error = f"{type(e).__name__}: {e}"
            logger.error(
                f"✗ Failed: {self.variable.value}={cell.value} seed={cell.seed} - {e}"
            )
        return cell

    def execute_all(self, jobs: int = 1, out_dir: Optional[Path] = None) -> dict[str, Any]:
        logger.info(f"Executing sweep of {len(self.cells)} cells")
        start = time.perf_counter()
        map_ordered(lambda cell: self._execute(cell, out_dir), self.cells, workers=jobs)
        failed = [c for c in self.cells if not c.success]
        summary = {
            "total": len(self.cells),
            "succeeded": len(self.cells) - len(failed),
            "failed": len(failed),
            "duration_seconds": time.perf_counter() - start,
        }
        logger.info(f"Sweep complete: {summary['succeeded']}/{summary['total']} cells succeeded")
        return summary

    def summary_rows(self) -> list[dict]:
        rows = []
        for value in self.values:
            cells = [c for c in self.cells if c.value == value]
            done = [c for c in cells if c.success]
            loss_mean, loss_se = mean_and_stderr([c.final_train_loss for c in done])
            acc_mean, acc_se = mean_and_stderr([c.final_test_acc for c in done])
            rows.append(
                {
                    "variable": self.variable.value,
                    "value": value,
                    "n_seeds": len(done),
                    "mean_final_train_loss": loss_mean if done else None,
                    "stderr_final_train_loss": loss_se if done else None,
                    "mean_final_test_acc": acc_mean if done else None,
                    "stderr_final_test_acc": acc_se if done else None,
                    "failed_cells": len(cells) - len(done),
                }
            )
        return rows

    def write(self, out_dir: Path) -> tuple[Path, Path]:
        long_path = write_csv(
            out_dir / "sweep_long.csv", SWEEP_LONG_HEADER, (c.to_row() for c in self.cells)
        )
        summary_path = write_csv(
            out_dir / "sweep_summary.csv", SWEEP_SUMMARY_HEADER, self.summary_rows()
        )
        return long_path, summary_path

    def optimal_k(self) -> Optional[int]:
        """K* over the seed-averaged final train losses of a k_clients sweep.

        None when no value has a successful cell. Lowest K wins ties.
        """
        if self.variable is not SweepVariable.K_CLIENTS:
            raise ValueError(f"K* needs a k_clients sweep, not {self.variable.value}")
        means = {
            row["value"]: row["mean_final_train_loss"]
            for row in self.summary_rows()
            if row["mean_final_train_loss"] is not None
        }
        if not means:
            return None
        if self.seeds < MIN_SEEDS_FOR_K_STAR:
            logger.warning(
                f"K* from {self.seeds} seed(s) per value, fewer than {MIN_SEEDS_FOR_K_STAR}"
            )
        K_star, _ = optimal_K(means.__getitem__, list(means))
        return K_star
