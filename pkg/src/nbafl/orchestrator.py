"""Noising-before-aggregation federated training loop.

Each round every scheduled client trains against the last broadcast, clips,
adds uplink noise and uploads; the server averages with equal weights, adds
downlink noise and broadcasts. Rounds are sequential; clients within a round
may run in threads because every noise draw has its own (round, client) stream.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as rngs
from .data_io import LabeledDataset, partition_iid, union
from .learning import (
    LossSpec,
    ModelParams,
    ProximalConfig,
    SolverDivergenceError,
    accuracy,
    clip,
    init_params,
    local_train,
    loss,
)
from .parallel import map_ordered
from .privacy import (
    ExposureModel,
    PrivacyDomainError,
    NoiseCalibration,
    PrivacyBudget,
    ScheduleMode,
    aggregate_sigma,
    sample_noise,
)

logger = logging.getLogger("nbafl.orchestrator")

WEIGHT_TOLERANCE = 1e-12


class AggregationError(ValueError):
    """Mismatched locals/weights or weights not summing to one."""


class RunAbortedError(RuntimeError):
    """A client's local solver diverged; carries the round index."""

    def __init__(self, round_index: int, client: int, cause: SolverDivergenceError):
        self.round_index = round_index
        self.client = client
        super().__init__(f"round {round_index}, client {client}: {cause}")


@dataclass(frozen=True)
class FLConfig:
    n_clients: int
    rounds: int
    epsilon: float
    delta: float
    clip_c: float
    shard_size: int
    prox: ProximalConfig
    model: LossSpec = field(default_factory=LossSpec)
    schedule: ScheduleMode = ScheduleMode.ALL_CLIENTS
    k_clients: Optional[int] = None
    uplink_exposures: int = 1
    master_seed: int = 0
    noiseless: bool = False

    def __post_init__(self):
        object.__setattr__(self, "schedule", ScheduleMode(self.schedule))
        if self.n_clients < 1 or self.rounds < 1 or self.shard_size < 1:
            raise PrivacyDomainError("n_clients, rounds and shard_size must be positive")
        if not self.clip_c > 0:
            raise PrivacyDomainError(f"clip_c must be positive, got {self.clip_c}")
        if self.schedule is ScheduleMode.K_RANDOM:
            if self.k_clients is None or not 1 < self.k_clients < self.n_clients:
                raise PrivacyDomainError(
                    f"K-random scheduling needs 1 < K < N, got K={self.k_clients}, "
                    f"N={self.n_clients}"
                )

    @property
    def mu(self) -> float:
        return self.prox.mu

    @property
    def participants(self) -> int:
        return self.k_clients if self.schedule is ScheduleMode.K_RANDOM else self.n_clients

    def budget(self) -> PrivacyBudget:
        return PrivacyBudget.calibrated(self.epsilon, self.delta)

    def exposures(self) -> ExposureModel:
        return ExposureModel(L=self.uplink_exposures, T=self.rounds)


def calibrate(config: FLConfig) -> NoiseCalibration:
    return aggregate_sigma(
        config.schedule,
        config.budget(),
        config.clip_c,
        config.shard_size,
        config.n_clients,
        config.k_clients,
        config.exposures(),
    )


@dataclass(frozen=True)
class RoundTrace:
    round: int
    scheduled: tuple
    train_loss: float
    test_loss: float
    test_acc: float
    sigma_uplink: float
    sigma_downlink: float
    sigma_aggregate: float
    exposures: tuple  # per-client upload counts after this round
    theta_max: float = 0.0

    def to_row(self, seed: int) -> dict:
        return {
            "round": self.round,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "test_acc": self.test_acc,
            "sigma_uplink": self.sigma_uplink,
            "sigma_downlink": self.sigma_downlink,
            "sigma_aggregate": self.sigma_aggregate,
            "scheduled_k": len(self.scheduled),
            "seed": seed,
        }


@dataclass
class RunResult:
    traces: list[RoundTrace]
    final_params: ModelParams
    config: FLConfig
    duration_seconds: float
    initial_train_loss: float

    def final_row(self) -> dict:
        return self.traces[-1].to_row(self.config.master_seed)


def select_clients(K: int, N: int, round_: int, master_seed: int) -> tuple:
    """K distinct client ids drawn uniformly for this round, in ascending order."""
    if not 1 <= K <= N:
        raise ValueError(f"K must satisfy 1 <= K <= N, got K={K}, N={N}")
    if K == N:
        return tuple(range(N))
    chosen = rngs.stream(master_seed, "schedule", round_).choice(N, size=K, replace=False)
    return tuple(sorted(int(i) for i in chosen))


def aggregate(locals_: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Weighted sum of client parameters, accumulated in client-index order."""
    if len(locals_) == 0 or len(locals_) != len(weights):
        raise AggregationError(f"{len(locals_)} locals for {len(weights)} weights")
    if abs(math.fsum(weights) - 1.0) > WEIGHT_TOLERANCE:
        raise AggregationError(f"weights sum to {math.fsum(weights)!r}, expected 1")
    total = np.zeros_like(locals_[0].values)
    for params, weight in zip(locals_, weights):
        total += weight * params.values
    return locals_[0].replace(total)


def run_nbafl(
    config: FLConfig,
    data: LabeledDataset,
    test: LabeledDataset,
    jobs: int = 1,
    on_round: Optional[Callable[[RoundTrace, ModelParams], None]] = None,
) -> RunResult:
    """Run the full training loop and return one trace row per aggregation round."""
    calibration = calibrate(config)
    sigma_up = 0.0 if config.noiseless else calibration.sigma_uplink
    sigma_down = 0.0 if config.noiseless else calibration.sigma_downlink
    sigma_agg = 0.0 if config.noiseless else calibration.sigma_aggregate

    seed = config.master_seed
    partition = partition_iid(
        data, config.n_clients, config.shard_size, rngs.stream(seed, "partition")
    )
    shards = [data.take(idx) for idx in partition.shards]
    train_union = union(data, partition)
    spec = config.model
    arch = spec.arch(data.n_features, data.n_classes)

    broadcast = init_params(arch, rngs.stream(seed, "init"))
    initial_train_loss = loss(broadcast, spec, train_union)
    counts = np.zeros(config.n_clients, dtype=np.int64)
    warned = False
    traces: list[RoundTrace] = []

    logger.info(
        f"Starting run: N={config.n_clients}, T={config.rounds}, "
        f"schedule={config.schedule.value}, eps={config.epsilon}, "
        f"sigma_U={sigma_up:.4g}, sigma_D={sigma_down:.4g}"
    )
    start = time.perf_counter()

    for t in range(1, config.rounds + 1):
        scheduled = select_clients(config.participants, config.n_clients, t, seed)
        anchor = broadcast

        def client_update(client: int, t=t, anchor=anchor):
            try:
                result = local_train(anchor, shards[client], spec, config.prox)
            except SolverDivergenceError as e:
                raise RunAbortedError(t, client, e) from e
            clipped = clip(result.params, config.clip_c)
            noise = sample_noise(
                arch.param_count, sigma_up, rngs.stream(seed, "uplink", t, client)
            )
            return clipped.replace(clipped.values + noise), result.theta

        outcomes = map_ordered(client_update, scheduled, workers=jobs)
        uploads = [params for params, _ in outcomes]
        weight = 1.0 / len(scheduled)
        aggregated = aggregate(uploads, [weight] * len(uploads))
        server_noise = sample_noise(arch.param_count, sigma_down, rngs.stream(seed, "downlink", t))
        broadcast = aggregated.replace(aggregated.values + server_noise)

        counts[list(scheduled)] += 1
        if not warned and counts.max() > config.uplink_exposures:
            logger.warning(
                f"Round {t}: a client has uploaded {counts.max()} times, "
                f"above the declared L={config.uplink_exposures}"
            )
            warned = True

        trace = RoundTrace(
            round=t,
            scheduled=scheduled,
            train_loss=loss(broadcast, spec, train_union),
            test_loss=loss(broadcast, spec, test),
            test_acc=accuracy(broadcast, spec, test),
            sigma_uplink=sigma_up,
            sigma_downlink=sigma_down,
            sigma_aggregate=sigma_agg,
            exposures=tuple(int(c) for c in counts),
            theta_max=max(theta for _, theta in outcomes),
        )
        traces.append(trace)
        logger.info(
            f"Round {t}/{config.rounds}: train_loss={trace.train_loss:.5f} "
            f"test_acc={trace.test_acc:.4f}"
        )
        if on_round is not None:
            on_round(trace, broadcast)

    duration = time.perf_counter() - start
    logger.info(f"Run finished in {duration:.2f}s")
    return RunResult(
        traces=traces,
        final_params=broadcast,
        config=config,
        duration_seconds=duration,
        initial_train_loss=initial_train_loss,
    )


def exposure_check(result: RunResult, L: int) -> bool:
    """True iff no client uploaded more often than it was scheduled, nor more than L times."""
    n = result.config.n_clients
    scheduled_counts = np.zeros(n, dtype=np.int64)
    for trace in result.traces:
        scheduled_counts[list(trace.scheduled)] += 1
    uploads = np.asarray(result.traces[-1].exposures) if result.traces else np.zeros(n)
    return bool(np.all(uploads <= scheduled_counts) and uploads.max() <= L)
