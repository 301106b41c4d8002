"""Tests for regularity estimation and the convergence bounds."""

import math

import numpy as np
import pytest

from nbafl.bounds import (
    BoundUndefinedError,
    DegenerateSampleError,
    LossRegularity,
    RegimeError,
    alpha_coeffs,
    bound_curvature,
    bound_params,
    bound_profile,
    divergence_report,
    estimate_regularity,
    k_bound_params,
    lambda_coeffs,
    lemma3_increment,
    load_regularity,
    noise_norm_moments,
    optimal_K,
    optimal_T,
    save_regularity,
    theorem2_bound,
    theorem2_bound_general,
    theorem2_recursion,
    theorem3_bound,
)
from nbafl.data_io import LabeledDataset, Partition, synth_classification
from nbafl.learning import LossKind, LossSpec, ModelArch, ModelParams, init_params
from nbafl.privacy import gaussian_constant
from nbafl.rng import stream

REG = LossRegularity(rho=1.0, beta=1.0, l=0.5, B=1.0, Theta=1.0)


def closed_form(T, epsilon, bp, theta):
    PT = bp.P**T
    return PT * theta + (bp.kappa1 * T / epsilon + bp.kappa0 * T**2 / epsilon**2) * (1 - PT)


class TestLossRegularity:
    """Test the regularity record."""

    def test_b_at_least_one(self):
        """B below 1 is rejected."""
        with pytest.raises(ValueError):
            LossRegularity(rho=1, beta=1, l=1, B=0.9, Theta=1)

    def test_positive(self):
        """Constants must be positive."""
        with pytest.raises(ValueError):
            LossRegularity(rho=0, beta=1, l=1, B=1, Theta=1)

    def test_yaml_round_trip(self, tmp_path):
        """Saved constants load back unchanged."""
        reg = LossRegularity(1.5, 2.0, 0.25, 1.2, 3.0, divergence=(0.1, 0.2), f_star=0.05)
        path = save_regularity(reg, tmp_path / "reg.yml")
        assert load_regularity(path) == reg

    def test_yaml_unknown_key(self, tmp_path):
        """Unknown keys are refused."""
        path = tmp_path / "reg.yml"
        path.write_text("rho: 1\nbeta: 1\nl: 1\nB: 1\nTheta: 1\nsigma: 2\n")
        with pytest.raises(ValueError, match="unknown keys"):
            load_regularity(path)


def quadratic_task(a: float, m: int = 4):
    spec = LossSpec(kind=LossKind.QUADRATIC, curvature=a)
    data = LabeledDataset(np.zeros((2 * m, 1)), np.zeros(2 * m, dtype=np.int64), 1)
    partition = Partition(shards=(np.arange(0, m), np.arange(m, 2 * m)), shard_size=m)
    return spec, data, partition


class TestEstimateRegularity:
    """Test empirical constants."""

    def test_quadratic_oracle(self):
        """F = a w^2 / 2: rho and l equal a, Theta equals a w0^2 / 2."""
        a, w0 = 2.5, 1.5
        spec, data, partition = quadratic_task(a)
        init = ModelParams(np.array([w0]), spec.arch(1, 1))
        reg = estimate_regularity(spec, data, partition, 8, stream(0, "regularity"), init=init)
        assert reg.rho == pytest.approx(a, rel=0.05)
        assert reg.l == pytest.approx(a, rel=0.05)
        assert reg.Theta == pytest.approx(a * w0**2 / 2, rel=0.05)
        assert reg.beta >= a * w0
        assert reg.B == pytest.approx(1.0, abs=1e-9)
        assert reg.f_star == pytest.approx(0.0, abs=1e-6)

    def test_identical_shards(self):
        """Duplicated shards have zero divergence and B = 1."""
        base = synth_classification(40, 3, 2, 2.0, stream(5, "synth"))
        data = LabeledDataset(
            np.vstack([base.features, base.features]),
            np.concatenate([base.labels, base.labels]),
            2,
        )
        partition = Partition(shards=(np.arange(0, 40), np.arange(40, 80)), shard_size=40)
        reg = estimate_regularity(
            LossSpec(l2_reg=1e-2), data, partition, 6, stream(1, "regularity"), trajectory_steps=50
        )
        assert reg.B == pytest.approx(1.0, abs=1e-9)
        assert all(e == pytest.approx(0.0, abs=1e-12) for e in reg.divergence)

    def test_distinct_shards(self):
        """Different shards give B >= 1 and one divergence entry per client."""
        data = synth_classification(90, 3, 3, 1.0, stream(6, "synth"))
        partition = Partition(
            shards=tuple(np.arange(i * 30, (i + 1) * 30) for i in range(3)), shard_size=30
        )
        reg = estimate_regularity(
            LossSpec(l2_reg=1e-2), data, partition, 6, stream(2, "regularity"), trajectory_steps=50
        )
        assert reg.B >= 1.0
        assert len(reg.divergence) == 3
        assert reg.rho > 0 and reg.beta > 0 and reg.l > 0

    def test_start_at_minimum(self):
        """A trajectory with no gap has no PL constant."""
        spec, data, partition = quadratic_task(1.0)
        init = ModelParams(np.zeros(1), spec.arch(1, 1))
        with pytest.raises(DegenerateSampleError):
            estimate_regularity(spec, data, partition, 4, stream(0, "regularity"), init=init)

    def test_divergence_report(self):
        """Identical shards report zero divergence."""
        base = synth_classification(20, 3, 2, 2.0, stream(7, "synth"))
        params = init_params(ModelArch(3, 2), stream(7, "init"))
        assert divergence_report(params, LossSpec(), [base, base]) == (0.0, 0.0)


class TestLambdaCoefficients:
    """Test per-round increment coefficients."""

    def test_worked_example(self):
        """rho=1, B=1, mu=4 gives lambda2 = -0.15625."""
        lambda0, lambda1, lambda2 = lambda_coeffs(4.0, 1.0, 1.0)
        assert lambda0 == 0.5
        assert lambda1 == pytest.approx(0.5)
        assert lambda2 == pytest.approx(-0.15625, abs=1e-15)

    def test_lambda0_independent(self):
        """lambda0 = rho / 2 whatever mu and B."""
        assert lambda_coeffs(10.0, 2.0, 3.0)[0] == lambda_coeffs(50.0, 2.0, 1.0)[0] == 1.0

    def test_small_rho_limit(self):
        """lambda2 tends to -1/mu as rho vanishes."""
        assert lambda_coeffs(4.0, 1e-12, 1.0)[2] == pytest.approx(-0.25, abs=1e-10)

    def test_mu_must_exceed_rho(self):
        """mu <= rho is out of regime."""
        with pytest.raises(RegimeError):
            lambda_coeffs(1.0, 1.0, 1.0)

    def test_increment(self):
        """No noise means descent; no gradient means a pure noise penalty."""
        coeffs = lambda_coeffs(4.0, 1.0, 1.0)
        assert lemma3_increment(1.0, 0.0, 0.0, coeffs) < 0
        assert lemma3_increment(0.0, 0.3, 0.2, coeffs) == pytest.approx(0.5 * 0.2)


def random_in_regime(rng):
    rho = rng.uniform(0.1, 2.0)
    B = rng.uniform(1.0, 2.0)
    mu = (rho * B + rho * B**2 / 2) * rng.uniform(1.5, 20.0)
    lambda2 = lambda_coeffs(mu, rho, B)[2]
    l = rng.uniform(0.05, 0.99) / (2 * abs(lambda2))  # noqa: E741
    return LossRegularity(rho, rng.uniform(0.1, 5.0), l, B, rng.uniform(0.1, 10.0)), mu


class TestTheorem2:
    """Test the all-client bound."""

    def test_closed_form_matches_recursion(self):
        """The closed form equals the unrolled recursion to 1e-10 for T <= 200."""
        rng = np.random.default_rng(42)
        for _ in range(100):
            reg, mu = random_in_regime(rng)
            N = int(rng.integers(2, 101))
            T = int(rng.integers(1, 201))
            eps = rng.uniform(1.0, 100.0)
            ds = rng.uniform(1e-4, 1e-1)
            c = gaussian_constant(rng.uniform(1e-4, 0.5))
            closed = theorem2_bound_general(T, eps, N, ds, c, reg, mu)
            unrolled = theorem2_recursion(T, eps, N, ds, c, reg, mu)[-1]
            assert unrolled == pytest.approx(closed, rel=1e-10)

    def test_normalised_form(self):
        """The normalised form uses sensitivity 1/(mN) and ignores clip_c."""
        c = gaussian_constant(0.01)
        expected = theorem2_bound_general(25, 60.0, 50, 1 / (100 * 50), c, REG, 4.0)
        assert theorem2_bound(25, 60.0, 50, 100, 1.0, 0.01, REG, 4.0) == expected
        assert theorem2_bound(25, 60.0, 50, 100, 7.0, 0.01, REG, 4.0) == expected

    def test_verbatim_kappas(self):
        """kappa0 and kappa1 reduce to their 1/(mN) expressions."""
        c, m, N = gaussian_constant(0.01), 100, 50
        bp = bound_params(REG, 4.0, N, c, 1 / (m * N))
        k1 = bp.lambda1 * REG.beta * c * math.sqrt(2 / (N * math.pi)) / (m * (1 - bp.P))
        k0 = bp.lambda0 * c**2 / (m**2 * (1 - bp.P) * N)
        assert bp.kappa1 == pytest.approx(k1, rel=1e-12)
        assert bp.kappa0 == pytest.approx(k0, rel=1e-12)
        assert bp.P == pytest.approx(0.84375)

    def test_decreasing_in_epsilon(self):
        """Doubling epsilon lowers the bound."""
        for T in (1, 10, 50):
            low = theorem2_bound(T, 30.0, 50, 1, 1.0, 0.01, REG, 4.0)
            high = theorem2_bound(T, 60.0, 50, 1, 1.0, 0.01, REG, 4.0)
            assert high < low

    def test_decreasing_in_clients(self):
        """More clients lower the bound."""
        values = [theorem2_bound(20, 60.0, N, 1, 1.0, 0.01, REG, 4.0) for N in (10, 20, 50, 100)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_large_T_asymptote(self):
        """For large T the bound follows the noise growth term."""
        c = gaussian_constant(0.01)
        bp = bound_params(REG, 4.0, 50, c, 1 / 50)
        T = 400
        asymptote = bp.kappa1 * T / 60 + bp.kappa0 * T**2 / 3600
        assert theorem2_bound(T, 60.0, 50, 1, 1.0, 0.01, REG, 4.0) == pytest.approx(
            asymptote, rel=1e-9
        )

    def test_regime(self):
        """P outside (0, 1) is a regime error."""
        with pytest.raises(RegimeError):
            theorem2_bound(10, 60.0, 50, 1, 1.0, 0.01, REG, 0.5)
        steep = LossRegularity(rho=1.0, beta=1.0, l=100.0, B=1.0, Theta=1.0)
        with pytest.raises(RegimeError):
            theorem2_bound(10, 60.0, 50, 1, 1.0, 0.01, steep, 4.0)

    def test_curvature_matches_finite_difference(self):
        """The analytic second derivative matches a central difference."""
        c = gaussian_constant(0.01)
        bp = bound_params(REG, 4.0, 50, c, 1 / 50)
        h = 1e-3
        for T in (2.0, 11.0, 40.0):
            numeric = (
                closed_form(T + h, 60.0, bp, 1.0)
                - 2 * closed_form(T, 60.0, bp, 1.0)
                + closed_form(T - h, 60.0, bp, 1.0)
            ) / h**2
            assert bound_curvature(T, 60.0, bp, 1.0) == pytest.approx(numeric, rel=1e-4)


class TestOptimalT:
    """Test the T grid scan."""

    def test_decreasing_profile(self):
        """Negligible noise puts T* at the grid end."""
        assert optimal_T(lambda T: 0.5**T, 30) == (30, True)

    def test_increasing_profile(self):
        """Dominant noise puts T* at 1."""
        assert optimal_T(lambda T: float(T), 30) == (1, True)

    def test_interior_and_convex(self):
        """Moderate noise gives an interior, convex minimum."""
        T_star, convex = optimal_T(
            lambda T: theorem2_bound(T, 60.0, 50, 1, 1.0, 0.01, REG, 4.0), 100
        )
        assert T_star == 11
        assert convex

    def test_nondecreasing_in_epsilon(self):
        """Looser privacy allows more rounds."""
        stars = [
            optimal_T(lambda T, e=e: theorem2_bound(T, e, 50, 1, 1.0, 0.01, REG, 4.0), 100)[0]
            for e in (50.0, 60.0, 100.0)
        ]
        assert stars == sorted(stars)
        assert all(1 < s < 100 for s in stars)

    def test_non_convex(self):
        """A negative second difference is reported."""
        assert optimal_T(lambda T: [3.0, 1.0, 2.0, 2.5, 2.6][T - 1], 5) == (2, False)


class TestTheorem3:
    """Test the K-random bound."""

    def test_undefined_below_minimal_T(self):
        """K=20, N=50, eps=60, T=25 is undefined; minimal T about 117.45."""
        with pytest.raises(BoundUndefinedError) as exc:
            theorem3_bound(25, 60.0, 20, 50, 1, 1.0, 0.01, REG, 4.0)
        assert exc.value.minimal_T == pytest.approx(-60 / math.log(1 - 20 / 50), abs=1e-9)
        assert abs(exc.value.minimal_T - 117.45) < 1
        assert "bound-undefined" in str(exc.value)

    def test_decreasing_in_epsilon(self):
        """At K=20, T=150 the bound falls as epsilon grows."""
        values = [
            theorem3_bound(150, eps, 20, 50, 1, 1.0, 0.01, REG, 4.0)
            for eps in range(20, 71, 10)
        ]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_alpha_and_q(self):
        """Coefficients for rho=1, B=1, mu=4, K=20, N=50."""
        alpha0, alpha1, alpha2 = alpha_coeffs(4.0, 1.0, 1.0, 20, 50)
        assert alpha0 == pytest.approx(1.8)
        assert alpha1 == pytest.approx(1.5 + 2 * math.sqrt(20) / 200)
        kb = k_bound_params(REG, 4.0, 20, 50, 60.0, 150)
        assert kb.Q == pytest.approx(1 + alpha2)
        assert 0 < kb.Q < 1

    def test_k_params_undefined(self):
        """Below the minimal T the coefficients are undefined."""
        with pytest.raises(BoundUndefinedError):
            k_bound_params(REG, 4.0, 20, 50, 60.0, 25)

    def test_profile_flags(self):
        """Grid points below the minimal T are flagged rather than raised."""
        rows = bound_profile(
            lambda T: theorem3_bound(T, 60.0, 20, 50, 1, 1.0, 0.01, REG, 4.0), [25, 117, 118, 150]
        )
        assert [r.flag for r in rows] == ["undefined", "undefined", "ok", "ok"]
        assert rows[0].value is None and rows[-1].value > 0


class TestOptimalK:
    """Test the K grid scan."""

    def test_interior(self):
        """A U-shaped profile gives its minimum."""
        K_star, profile = optimal_K(lambda K: (K - 7) ** 2, range(2, 15))
        assert K_star == 7
        assert len(profile) == 13

    def test_ties_pick_lowest(self):
        """Ties resolve to the smallest K."""
        assert optimal_K(lambda K: 1.0, [5, 3, 9])[0] == 3

    def test_empty(self):
        """An empty grid is an error."""
        with pytest.raises(ValueError):
            optimal_K(lambda K: 0.0, [])


class TestNoiseMoments:
    """Test the noise norm moments."""

    def test_scalar_half_normal(self):
        """One dimension gives sigma sqrt(2/pi)."""
        assert noise_norm_moments(2.0, 1)[0] == pytest.approx(2.0 * math.sqrt(2 / math.pi))

    def test_second_moment(self):
        """second / n = sigma^2."""
        for sigma in (0.0, 0.5, 3.0):
            assert noise_norm_moments(sigma, 7)[1] / 7 == pytest.approx(sigma**2)

    def test_monte_carlo_l1(self):
        """The mean matches the l1 norm of a 50-dim Gaussian over sqrt(50)."""
        draws = stream(0, "regularity").normal(size=(20000, 50))
        empirical = np.abs(draws).sum(axis=1).mean() / math.sqrt(50)
        assert empirical == pytest.approx(noise_norm_moments(1.0, 50)[0], rel=0.01)

    def test_negative_sigma(self):
        """Negative sigma is rejected."""
        with pytest.raises(ValueError):
            noise_norm_moments(-1.0, 3)
