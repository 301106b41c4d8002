"""Convergence upper bounds for noised federated training and their inputs.

The bounds need five regularity constants of the global loss: smoothness rho,
Lipschitz constant beta, Polyak-Lojasiewicz constant l, gradient
dissimilarity B and initial gap Theta. ``estimate_regularity`` measures them
on a concrete task; the evaluators below turn them into bound values for the
all-client and the K-random schedules.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import yaml

from .data_io import LabeledDataset, Partition
from .learning import LossSpec, ModelParams, init_params, loss_and_gradient
from .privacy import BUndefinedError, gaussian_constant, ksched_coefficients, minimal_rounds_for_b
from .traces import atomic_write_text

logger = logging.getLogger("nbafl.bounds")

PL_GAP_FLOOR = 1e-10
DEGENERATE_GRAD = 1e-12


class RegimeError(ValueError):
    """Bound constants fall outside the regime where the bound is meaningful."""


class BoundUndefinedError(RegimeError):
    """The K-random log argument is not positive at this T."""

    def __init__(self, minimal_T: float):
        self.minimal_T = minimal_T
        super().__init__(f"bound-undefined: minimal T = {minimal_T:.6g}")


class DegenerateSampleError(RuntimeError):
    """Every sample point had a vanishing global gradient."""


@dataclass(frozen=True)
class LossRegularity:
    rho: float
    beta: float
    l: float  # noqa: E741
    B: float
    Theta: float
    divergence: tuple = field(default_factory=tuple)
    f_star: Optional[float] = None  # loss floor the gap constants were measured against

    def __post_init__(self):
        for name in ("rho", "beta", "l", "Theta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.B >= 1.0:
            raise ValueError(f"B must be >= 1, got {self.B}")
        object.__setattr__(self, "divergence", tuple(float(e) for e in self.divergence))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["divergence"] = list(self.divergence)
        return data


def save_regularity(reg: LossRegularity, path: Union[str, Path]) -> Path:
    return atomic_write_text(path, yaml.safe_dump(reg.to_dict(), sort_keys=False))


def load_regularity(path: Union[str, Path]) -> LossRegularity:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Regularity file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping of regularity constants")
    unknown = set(raw) - {"rho", "beta", "l", "B", "Theta", "divergence", "f_star"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    return LossRegularity(
        rho=float(raw["rho"]),
        beta=float(raw["beta"]),
        l=float(raw["l"]),
        B=float(raw["B"]),
        Theta=float(raw["Theta"]),
        divergence=tuple(raw.get("divergence") or ()),
        f_star=None if raw.get("f_star") is None else float(raw["f_star"]),
    )


@dataclass(frozen=True)
class BoundParams:
    lambda0: float
    lambda1: float
    lambda2: float
    P: float
    kappa0: float
    kappa1: float


@dataclass(frozen=True)
class KBoundParams:
    alpha0: float
    alpha1: float
    alpha2: float
    Q: float
    b: float
    gamma: float


@dataclass(frozen=True)
class ProfileRow:
    x: int
    value: Optional[float]
    flag: str  # ok | regime | undefined


# -- regularity estimation ---------------------------------------------------


def _global_loss_and_grad(
    values: np.ndarray, template: ModelParams, spec: LossSpec, shards: Sequence[LabeledDataset]
) -> tuple[float, np.ndarray, list[np.ndarray]]:
    params = template.replace(values)
    per_shard = [loss_and_gradient(params, spec, shard) for shard in shards]
    value = math.fsum(v for v, _ in per_shard) / len(shards)
    grads = [g for _, g in per_shard]
    return value, sum(grads) / len(shards), grads


def divergence_report(
    params: ModelParams, spec: LossSpec, shards: Sequence[LabeledDataset]
) -> tuple:
    """Per-client gradient divergence ||grad F_i(w) - grad F(w)|| at params."""
    _, grad, grads = _global_loss_and_grad(params.values, params, spec, shards)
    return tuple(float(np.linalg.norm(g - grad)) for g in grads)


def _descend(
    start: ModelParams, spec: LossSpec, shards: Sequence[LabeledDataset], steps: int
) -> list[tuple[np.ndarray, float, np.ndarray]]:
    """Gradient descent on the global loss with Armijo backtracking."""
    w = start.values.copy()
    value, grad, _ = _global_loss_and_grad(w, start, spec, shards)
    path = [(w, value, grad)]
    step = 1.0
    for _ in range(steps):
        sq = float(grad @ grad)
        if sq == 0.0:
            break
        while True:
            candidate = w - step * grad
            cand_value, cand_grad, _ = _global_loss_and_grad(candidate, start, spec, shards)
            if cand_value <= value - 0.5 * step * sq or step < 1e-12:
                break
            step *= 0.5
        w, value, grad = candidate, cand_value, cand_grad
        path.append((w, value, grad))
        step *= 2.0
    return path


def estimate_regularity(
    spec: LossSpec,
    data: LabeledDataset,
    partition: Partition,
    points: int,
    rng: np.random.Generator,
    init: Optional[ModelParams] = None,
    trajectory_steps: int = 400,
    jitter: float = 0.1,
) -> LossRegularity:
    """Measure rho, beta, l, B and Theta around a noiseless training trajectory.

    Sample points are trajectory points perturbed by Gaussian jitter of scale
    ``jitter * ||w||``. F* is approximated by the end of the trajectory.
    """
    shards = [data.take(idx) for idx in partition.shards]
    arch = spec.arch(data.n_features, data.n_classes)
    start = init if init is not None else init_params(arch, rng)
    path = _descend(start, spec, shards, trajectory_steps)
    f_star = min(value for _, value, _ in path)
    theta = path[0][1] - f_star

    pl_ratios = [
        float(g @ g) / (2.0 * (value - f_star))
        for _, value, g in path
        if value - f_star >= PL_GAP_FLOOR
    ]
    if not pl_ratios:
        raise DegenerateSampleError("trajectory converged immediately; PL constant undefined")

    anchors = [path[i][0] for i in np.linspace(0, len(path) - 1, points).round().astype(int)]
    rho = 0.0
    beta = max(float(np.linalg.norm(g)) for _, _, g in path)
    B = 1.0
    divergence = np.zeros(len(shards))
    used = 0
    previous = None
    for anchor in anchors:
        scale = jitter * float(np.linalg.norm(anchor)) / math.sqrt(anchor.size)
        point = anchor + rng.normal(0.0, scale, size=anchor.size) if scale > 0 else anchor
        _, grad, grads = _global_loss_and_grad(point, start, spec, shards)
        _, anchor_grad, _ = _global_loss_and_grad(anchor, start, spec, shards)
        beta = max(beta, float(np.linalg.norm(grad)))
        for other, other_grad in ((anchor, anchor_grad), previous or (None, None)):
            if other is None:
                continue
            dist = float(np.linalg.norm(point - other))
            if dist > 0.0:
                rho = max(rho, float(np.linalg.norm(grad - other_grad)) / dist)
        previous = (point, grad)

        grad_sq = float(grad @ grad)
        if math.sqrt(grad_sq) < DEGENERATE_GRAD:
            logger.warning(
                f"Skipping degenerate sample point with gradient norm {math.sqrt(grad_sq):.3e}"
            )
            continue
        eps = np.array([float(np.linalg.norm(g - grad)) for g in grads])
        divergence = np.maximum(divergence, eps)
        B = max(B, math.sqrt(1.0 + float(np.mean(eps**2)) / grad_sq))
        used += 1

    if used == 0:
        raise DegenerateSampleError(f"all {len(anchors)} sample points had vanishing gradients")
    if rho == 0.0:
        raise DegenerateSampleError("no sample pair with distinct points; smoothness undefined")

    reg = LossRegularity(
        rho=rho,
        beta=beta,
        l=min(pl_ratios),
        B=B,
        Theta=theta,
        divergence=tuple(divergence),
        f_star=f_star,
    )
    logger.info(
        f"Estimated regularity from {used} sample points: rho={reg.rho:.4g} beta={reg.beta:.4g} "
        f"l={reg.l:.4g} B={reg.B:.4g} Theta={reg.Theta:.4g}"
    )
    return reg


# -- all-client bound ----------------------------------------------------------


def lambda_coeffs(mu: float, rho: float, B: float) -> tuple[float, float, float]:
    """Per-round loss-increment coefficients (lambda0, lambda1, lambda2); needs mu > rho."""
    if not mu > rho:
        raise RegimeError(f"mu must exceed rho, got mu={mu}, rho={rho}")
    lambda0 = rho / 2.0
    lambda1 = 1.0 / mu + rho * B / mu
    lambda2 = -1.0 / mu + rho * B / mu**2 + rho * B**2 / (2.0 * mu**2)
    return lambda0, lambda1, lambda2


def noise_norm_moments(sigma_A: float, n_dim_eff: int) -> tuple[float, float]:
    """(E||n||, E||n||^2) as used by the bound: sigma sqrt(2n/pi) and sigma^2 n."""
    if sigma_A < 0:
        raise ValueError(f"sigma_A must be non-negative, got {sigma_A}")
    return sigma_A * math.sqrt(2.0 * n_dim_eff / math.pi), sigma_A**2 * n_dim_eff


def bound_params(
    reg: LossRegularity,
    mu: float,
    N: int,
    c: float,
    ds_downlink: float,
    n_dim_eff: Optional[int] = None,
) -> BoundParams:
    """Lambdas, contraction factor P and the noise growth constants kappa0, kappa1.

    With these, the bound reads P^T Theta + (kappa1 T/eps + kappa0 T^2/eps^2)(1 - P^T).
    """
    lambda0, lambda1, lambda2 = lambda_coeffs(mu, reg.rho, reg.B)
    P = 1.0 + 2.0 * reg.l * lambda2
    if not 0.0 < P < 1.0:
        raise RegimeError(f"contraction factor P={P:.6g} outside (0, 1); lambda2={lambda2:.6g}")
    n_eff = N if n_dim_eff is None else n_dim_eff
    kappa1 = lambda1 * reg.beta * c * ds_downlink * math.sqrt(2.0 * n_eff / math.pi) / (1.0 - P)
    kappa0 = lambda0 * (c * ds_downlink) ** 2 * n_eff / (1.0 - P)
    return BoundParams(lambda0, lambda1, lambda2, P, kappa0, kappa1)


def _closed_form(T: int, epsilon: float, theta: float, bp: BoundParams) -> float:
    PT = bp.P**T
    growth = bp.kappa1 * T / epsilon + bp.kappa0 * T**2 / epsilon**2
    return PT * theta + growth * (1.0 - PT)


def _check_T(T: int, epsilon: float) -> None:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")


def theorem2_bound_general(
    T: int,
    epsilon: float,
    N: int,
    ds_downlink: float,
    c: float,
    reg: LossRegularity,
    mu: float,
    n_dim_eff: Optional[int] = None,
) -> float:
    """All-client bound with an explicit aggregate sensitivity ds_downlink."""
    _check_T(T, epsilon)
    return _closed_form(T, epsilon, reg.Theta, bound_params(reg, mu, N, c, ds_downlink, n_dim_eff))


def theorem2_bound(
    T: int,
    epsilon: float,
    N: int,
    m: int,
    clip_c: float,
    delta: float,
    reg: LossRegularity,
    mu: float,
) -> float:
    """All-client bound with the normalised sensitivity 1/(mN).

    clip_c does not enter this form; pass ds_downlink = 2C/(mN) to
    ``theorem2_bound_general`` for the clip-aware variant.
    """
    c = gaussian_constant(delta)
    return theorem2_bound_general(T, epsilon, N, 1.0 / (m * N), c, reg, mu)


def theorem2_recursion(
    T: int,
    epsilon: float,
    N: int,
    ds_downlink: float,
    c: float,
    reg: LossRegularity,
    mu: float,
    n_dim_eff: Optional[int] = None,
) -> list[float]:
    """Round-by-round gap bound G_1..G_T from G_{t+1} = P G_t + per-round noise penalty."""
    _check_T(T, epsilon)
    lambda0, lambda1, lambda2 = lambda_coeffs(mu, reg.rho, reg.B)
    P = 1.0 + 2.0 * reg.l * lambda2
    if not 0.0 < P < 1.0:
        raise RegimeError(f"contraction factor P={P:.6g} outside (0, 1)")
    sigma_A = c * T * ds_downlink / epsilon
    mean, second = noise_norm_moments(sigma_A, N if n_dim_eff is None else n_dim_eff)
    penalty = lambda1 * reg.beta * mean + lambda0 * second
    gap = reg.Theta
    out = []
    for _ in range(T):
        gap = P * gap + penalty
        out.append(gap)
    return out


def bound_curvature(T: float, epsilon: float, bp: BoundParams, theta: float) -> float:
    """Second derivative in continuous T of the closed-form all-client bound."""
    PT = bp.P**T
    lnP = math.log(bp.P)
    g = bp.kappa1 * T / epsilon + bp.kappa0 * T**2 / epsilon**2
    dg = bp.kappa1 / epsilon + 2.0 * bp.kappa0 * T / epsilon**2
    d2g = 2.0 * bp.kappa0 / epsilon**2
    return (theta - g) * PT * lnP**2 - 2.0 * dg * PT * lnP + d2g * (1.0 - PT)


def lemma3_increment(
    grad_norm: float,
    noise_norm_mean: float,
    noise_norm_sq_mean: float,
    coeffs: Sequence[float],
) -> float:
    """Upper bound on one round's expected loss change; coeffs = (lambda0, lambda1, lambda2)."""
    lambda0, lambda1, lambda2 = coeffs
    return (
        lambda2 * grad_norm**2
        + lambda1 * noise_norm_mean * grad_norm
        + lambda0 * noise_norm_sq_mean
    )


# -- K-random bound ------------------------------------------------------------


def alpha_coeffs(mu: float, rho: float, B: float, K: int, N: int) -> tuple[float, float, float]:
    """(alpha0, alpha1, alpha2) of the K-random bound."""
    if not 1 <= K <= N:
        raise ValueError(f"K must satisfy 1 <= K <= N, got K={K}, N={N}")
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    sqrt_k = math.sqrt(K)
    alpha0 = 2.0 * rho * K / N + rho
    alpha1 = 1.0 + 2.0 * rho * B / mu + 2.0 * rho * B * sqrt_k / (mu * N)
    alpha2 = (
        rho * B**2 / 2.0
        + rho * B
        + rho * B**2 / K
        + 2.0 * rho * B**2 / sqrt_k
        + mu * B / sqrt_k
        - mu
    ) / mu**2
    return alpha0, alpha1, alpha2


def _log_argument(epsilon: float, T: int, K: int, N: int) -> float:
    ratio = N / K
    return 1.0 - ratio + ratio * math.exp(-epsilon / T)


def k_bound_params(
    reg: LossRegularity, mu: float, K: int, N: int, epsilon: float, T: int, L: int = 1
) -> KBoundParams:
    alpha0, alpha1, alpha2 = alpha_coeffs(mu, reg.rho, reg.B, K, N)
    Q = 1.0 + 2.0 * reg.l * alpha2
    if not 0.0 < Q < 1.0:
        raise RegimeError(f"contraction factor Q={Q:.6g} outside (0, 1); alpha2={alpha2:.6g}")
    try:
        b, gamma = ksched_coefficients(epsilon, T, K, N, L)
    except BUndefinedError as e:
        raise BoundUndefinedError(e.minimal_T) from e
    return KBoundParams(alpha0, alpha1, alpha2, Q, b, gamma)


def theorem3_bound(
    T: int,
    epsilon: float,
    K: int,
    N: int,
    m: int,
    clip_c: float,
    delta: float,
    reg: LossRegularity,
    mu: float,
) -> float:
    """Bound on the expected gap after T rounds when K of N clients upload per round."""
    _check_T(T, epsilon)
    if not 1 <= K <= N:
        raise ValueError(f"K must satisfy 1 <= K <= N, got K={K}, N={N}")
    arg = _log_argument(epsilon, T, K, N)
    if arg <= 0.0:
        raise BoundUndefinedError(minimal_rounds_for_b(epsilon, K, N))
    kb = k_bound_params(reg, mu, K, N, epsilon, T)
    c = gaussian_constant(delta)
    log_arg = math.log(arg)
    noise = c * kb.alpha1 * reg.beta / (-m * K * log_arg) * math.sqrt(2.0 / math.pi) + (
        c**2 * kb.alpha0 / (m**2 * K**2 * log_arg**2)
    )
    QT = kb.Q**T
    return QT * reg.Theta + (1.0 - QT) / (1.0 - kb.Q) * noise


# -- grid scans ----------------------------------------------------------------


def bound_profile(evaluator: Callable[[int], float], grid: Sequence[int]) -> list[ProfileRow]:
    """Evaluate on every grid point, flagging points outside the bound's regime."""
    rows = []
    for x in grid:
        try:
            rows.append(ProfileRow(int(x), float(evaluator(int(x))), "ok"))
        except BoundUndefinedError:
            rows.append(ProfileRow(int(x), None, "undefined"))
        except RegimeError:
            rows.append(ProfileRow(int(x), None, "regime"))
    return rows


def optimal_T(evaluator: Callable[[int], float], grid_max: int) -> tuple[int, bool]:
    """Grid argmin of T over [1, grid_max] and whether second differences stay non-negative."""
    if grid_max < 1:
        raise ValueError(f"grid_max must be >= 1, got {grid_max}")
    values = np.array([evaluator(T) for T in range(1, grid_max + 1)], dtype=np.float64)
    T_star = int(np.argmin(values)) + 1
    if values.size < 3:
        return T_star, True
    second = np.diff(values, n=2)
    tolerance = 1e-12 * float(np.max(np.abs(values)))
    return T_star, bool(np.all(second >= -tolerance))


def optimal_K(
    evaluator: Callable[[int], float], K_grid: Sequence[int]
) -> tuple[int, list[tuple[int, float]]]:
    """Grid argmin over K (lowest K on ties) and the full (K, value) profile."""
    if not K_grid:
        raise ValueError("K_grid must not be empty")
    profile = [(int(K), float(evaluator(int(K)))) for K in K_grid]
    K_star = min(profile, key=lambda kv: (kv[1], kv[0]))[0]
    return K_star, profile
