"""Sensitivity, Gaussian noise calibration and mechanism auditing.

Uplink noise protects each client's uploads, downlink noise protects the
aggregate broadcast by the server. Calibration follows the noising-before-
aggregation scheme for both all-client and K-random scheduling.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.stats import norm

logger = logging.getLogger("nbafl.privacy")


class PrivacyDomainError(ValueError):
    """A privacy parameter lies outside its mathematical domain."""


class BUndefinedError(PrivacyDomainError):
    """The K-random coefficient b has a non-positive log argument at this T."""

    def __init__(self, minimal_T: float):
        self.minimal_T = minimal_T
        super().__init__(f"b-undefined: minimal T = {minimal_T:.6g}")


class ScheduleMode(str, Enum):
    ALL_CLIENTS = "all"
    K_RANDOM = "krandom"


def gaussian_constant(delta: float) -> float:
    """Return c = sqrt(2 ln(1.25/delta)) for the Gaussian mechanism."""
    if not 0.0 < delta < 1.0:
        raise PrivacyDomainError(f"delta must be in (0,1), got {delta}")
    return math.sqrt(2.0 * math.log(1.25 / delta))


@dataclass(frozen=True)
class PrivacyBudget:
    """Target (epsilon, delta) together with the Gaussian constant c."""

    epsilon: float
    delta: float
    c: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise PrivacyDomainError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise PrivacyDomainError(f"delta must be in (0,1), got {self.delta}")
        if not self.c > 0:
            raise PrivacyDomainError(f"c must be positive, got {self.c}")

    @classmethod
    def calibrated(cls, epsilon: float, delta: float) -> "PrivacyBudget":
        # The constant is only proven for epsilon < 1; it is applied unchanged above that.
        if epsilon >= 1.0:
            logger.warning(
                f"epsilon={epsilon} >= 1: Gaussian constant applied outside its proven range"
            )
        return cls(epsilon=float(epsilon), delta=float(delta), c=gaussian_constant(delta))


@dataclass(frozen=True)
class ExposureModel:
    """Threat model: L uplink exposures per client, T downlink broadcasts."""

    L: int
    T: int

    def __post_init__(self):
        if self.L < 1 or self.T < 1:
            raise PrivacyDomainError(f"L and T must be positive, got L={self.L}, T={self.T}")
        if self.L > self.T:
            raise PrivacyDomainError(f"L must not exceed T, got L={self.L}, T={self.T}")


def uplink_sensitivity(clip_c: float, m: int) -> float:
    """Sensitivity of one clipped upload on a local dataset of size m: 2C/m."""
    if not clip_c > 0:
        raise PrivacyDomainError(f"clip_c must be positive, got {clip_c}")
    if m < 1:
        raise PrivacyDomainError(f"m must be >= 1, got {m}")
    return 2.0 * clip_c / m


def downlink_sensitivity(clip_c: float, m: int, weight: float) -> float:
    """Sensitivity of the weighted aggregate with respect to one client: 2C p_i / m."""
    if not 0.0 < weight <= 1.0:
        raise PrivacyDomainError(f"weight must be in (0,1], got {weight}")
    return uplink_sensitivity(clip_c, m) * weight


@dataclass(frozen=True)
class SensitivityReport:
    clip_c: float
    m: int
    n_clients: int
    ds_uplink: float
    ds_downlink: float

    @classmethod
    def from_params(cls, clip_c: float, m: int, n_clients: int) -> "SensitivityReport":
        if n_clients < 1:
            raise PrivacyDomainError(f"n_clients must be >= 1, got {n_clients}")
        return cls(
            clip_c=clip_c,
            m=m,
            n_clients=n_clients,
            ds_uplink=uplink_sensitivity(clip_c, m),
            ds_downlink=downlink_sensitivity(clip_c, m, 1.0 / n_clients),
        )


def uplink_sigma(budget: PrivacyBudget, ds_uplink: float, L: int) -> float:
    """Per-client noise std c L ds / epsilon."""
    return budget.c * L * ds_uplink / budget.epsilon


def downlink_sigma_all(
    budget: PrivacyBudget, clip_c: float, m: int, N: int, exposures: ExposureModel
) -> float:
    """Server noise std when all N clients upload every round.

    Zero when T <= L sqrt(N): the uplink noise averaged over N clients already
    covers the T broadcasts.
    """
    if N < 1:
        raise PrivacyDomainError(f"N must be >= 1, got {N}")
    L, T = exposures.L, exposures.T
    # integer comparison keeps the T = L sqrt(N) boundary exact
    if T * T <= L * L * N:
        return 0.0
    return 2.0 * budget.c * clip_c * math.sqrt(T * T - L * L * N) / (m * N * budget.epsilon)


def _check_k(K: int, N: int) -> None:
    if not 1 <= K <= N:
        raise PrivacyDomainError(f"K must satisfy 1 <= K <= N, got K={K}, N={N}")


def minimal_rounds_for_b(epsilon: float, K: int, N: int) -> float:
    """Smallest T (exclusive) for which b is defined: -epsilon / ln(1 - K/N)."""
    _check_k(K, N)
    if K == N:
        return 0.0
    return -epsilon / math.log(1.0 - K / N)


def _b_coeff(epsilon: float, T: int, K: int, N: int) -> float:
    ratio = N / K
    arg = 1.0 - ratio + ratio * math.exp(-epsilon / T)
    if arg <= 0.0:
        raise BUndefinedError(minimal_rounds_for_b(epsilon, K, N))
    return -(T / epsilon) * math.log(arg)


def _gamma_coeff(epsilon: float, K: int, N: int, L: int) -> float:
    q = K / N
    return -math.log(1.0 - q + q * math.exp(-epsilon / (L * math.sqrt(K))))


def ksched_coefficients(epsilon: float, T: int, K: int, N: int, L: int) -> tuple[float, float]:
    """Return (b, gamma) for K-random scheduling.

    Raises BUndefinedError with the minimal admissible T when the log argument
    of b is not positive.
    """
    _check_k(K, N)
    if K == N:
        return 1.0, epsilon / (L * math.sqrt(N))
    return _b_coeff(epsilon, T, K, N), _gamma_coeff(epsilon, K, N, L)


def downlink_sigma_ksched(
    budget: PrivacyBudget, clip_c: float, m: int, K: int, N: int, exposures: ExposureModel
) -> float:
    """Server noise std under K-random scheduling; zero when T <= epsilon/gamma."""
    _check_k(K, N)
    if K == N:
        return downlink_sigma_all(budget, clip_c, m, N, exposures)
    L, T = exposures.L, exposures.T
    eps = budget.epsilon
    gamma = _gamma_coeff(eps, K, N, L)
    if T <= eps / gamma:
        return 0.0
    b = _b_coeff(eps, T, K, N)
    radicand = (T / b) ** 2 - L * L * K
    if radicand <= 0.0:
        logger.warning(
            f"Zero-noise conditions disagree at T={T}, K={K}: "
            f"T > eps/gamma={eps / gamma:.6g} but T <= b L sqrt(K)={b * L * math.sqrt(K):.6g}"
        )
        return 0.0
    return 2.0 * budget.c * clip_c * math.sqrt(radicand) / (m * K * eps)


@dataclass(frozen=True)
class NoiseCalibration:
    sigma_uplink: float
    sigma_downlink: float
    sigma_aggregate: float
    mode: ScheduleMode
    k: Optional[int] = None
    b_coeff: Optional[float] = None
    gamma: Optional[float] = None
    minimal_T: Optional[float] = None


def aggregate_sigma(
    mode: ScheduleMode,
    budget: PrivacyBudget,
    clip_c: float,
    m: int,
    N: int,
    K: Optional[int],
    exposures: ExposureModel,
) -> NoiseCalibration:
    """Fill a NoiseCalibration for the given scheduling mode.

    Client weights are always equal (1/N or 1/K); unequal weights are never
    calibrated.
    """
    mode = ScheduleMode(mode)
    s_up = uplink_sigma(budget, uplink_sensitivity(clip_c, m), exposures.L)
    if mode is ScheduleMode.ALL_CLIENTS:
        s_down = downlink_sigma_all(budget, clip_c, m, N, exposures)
        return NoiseCalibration(
            sigma_uplink=s_up,
            sigma_downlink=s_down,
            sigma_aggregate=math.sqrt(s_down**2 + s_up**2 / N),
            mode=mode,
        )

    if K is None:
        raise PrivacyDomainError("K is required for K-random scheduling")
    _check_k(K, N)
    s_down = downlink_sigma_ksched(budget, clip_c, m, K, N, exposures)
    gamma = (
        budget.epsilon / (exposures.L * math.sqrt(N))
        if K == N
        else _gamma_coeff(budget.epsilon, K, N, exposures.L)
    )
    try:
        b, _ = ksched_coefficients(budget.epsilon, exposures.T, K, N, exposures.L)
    except BUndefinedError:
        b = None
    return NoiseCalibration(
        sigma_uplink=s_up,
        sigma_downlink=s_down,
        sigma_aggregate=math.sqrt(s_down**2 + s_up**2 / K),
        mode=mode,
        k=K,
        b_coeff=b,
        gamma=gamma,
        minimal_T=minimal_rounds_for_b(budget.epsilon, K, N),
    )


def sample_noise(dim: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. N(0, sigma^2) vector; the zero vector when sigma is 0."""
    if sigma < 0:
        raise PrivacyDomainError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0.0:
        return np.zeros(dim)
    return rng.normal(0.0, sigma, size=dim)


def analytic_delta(sigma: float, ds: float, epsilon: float) -> float:
    """Exact delta(epsilon) of the scalar Gaussian mechanism with std sigma and sensitivity ds."""
    mu = ds / sigma
    value = norm.cdf(-epsilon / mu + mu / 2.0) - math.exp(epsilon) * norm.cdf(
        -epsilon / mu - mu / 2.0
    )
    return max(0.0, float(value))


@dataclass(frozen=True)
class AuditReport:
    sigma: float
    ds: float
    epsilon: float
    delta: float
    samples: int
    estimate: float  # mass where the privacy-loss ratio exceeds e^epsilon
    half_width: float
    tight_estimate: float
    analytic: float
    passed: bool


def audit_mechanism(
    sigma: float,
    ds: float,
    epsilon: float,
    delta: float,
    samples: int,
    rng: np.random.Generator,
    z: float = 3.0,
) -> AuditReport:
    """Monte-Carlo audit of the Gaussian mechanism on adjacent inputs 0 and ds."""
    if not sigma > 0:
        raise PrivacyDomainError(f"sigma must be positive, got {sigma}")
    if samples < 100_000:
        raise PrivacyDomainError(f"audit needs at least 1e5 samples, got {samples}")

    x = rng.normal(0.0, sigma, size=samples)
    # ln(p_0(x) / p_ds(x)) for outputs of the mechanism on input 0
    loss = (ds * ds - 2.0 * x * ds) / (2.0 * sigma * sigma)
    estimate = float(np.mean(loss > epsilon))
    half_width = z * math.sqrt(estimate * (1.0 - estimate) / samples)
    tight = float(np.mean(np.clip(1.0 - np.exp(np.minimum(epsilon - loss, 50.0)), 0.0, None)))

    report = AuditReport(
        sigma=sigma,
        ds=ds,
        epsilon=epsilon,
        delta=delta,
        samples=samples,
        estimate=estimate,
        half_width=half_width,
        tight_estimate=tight,
        analytic=analytic_delta(sigma, ds, epsilon),
        passed=estimate <= delta + half_width,
    )
    verdict = "PASS" if report.passed else "FAIL"
    logger.info(
        f"Audit sigma={sigma:.6g} eps={epsilon}: estimate={estimate:.6g} "
        f"+/- {half_width:.3g} (delta={delta}) -> {verdict}"
    )
    return report
