import math

import numpy as np
import pytest
from scipy.stats import norm

import switching_pcem.analysis as analysis
from switching_pcem.analysis import (
    AllOverflowed,
    DegenerateFit,
    InsufficientLadder,
    OverflowPresent,
    QuadratureNonConvergent,
    check_ladder,
    closed_form_second_moment,
    continuous_stability_boundary,
    error_stats,
    fit_strong_order,
    is_stable,
    monte_carlo_error,
    path_spread,
    scan_stability_region,
    stability_boundary,
    state_p_stable,
    sup_squared_error,
    transfer_moment,
    transfer_moments,
)
from switching_pcem.ctmc import validate_generator
from switching_pcem.errors import ValidationError
from switching_pcem.models import StabilityTestModel, exact_linear_moment, linear_model
from switching_pcem.schemes import SchemeParams, SchemePreset, transfer_coefficients
from switching_pcem.simulate import (
    ReplicationErrors,
    SeedPair,
    build_grid,
    run_replications,
    simulate_coupled,
    simulate_path,
)


LAMBDA_DT = np.linspace(-3.0, -0.01, 30)
ALPHA = np.linspace(0.0, 0.97, 30)
STANDARD_NORMAL_MOMENTS = [1, 0, 1, 0, 3, 0, 15, 0, 105]


def first_absolute_moment(c0, c1, c2):
    """E|c0 + c1 Z + c2 Z^2| with c2 >= 0, from the normal cdf and pdf"""
    if c2 == 0.0:
        sigma = abs(c1)
        return c0 * (1.0 - 2.0 * norm.cdf(-c0 / sigma)) + 2.0 * sigma * norm.pdf(c0 / sigma)
    disc = c1 * c1 - 4.0 * c2 * c0
    mean = c0 + c2
    if disc <= 0.0:
        return mean

    def antiderivative(z):
        return c0 * norm.cdf(z) - c1 * norm.pdf(z) + c2 * (norm.cdf(z) - z * norm.pdf(z))

    lo = (-c1 - math.sqrt(disc)) / (2.0 * c2)
    hi = (-c1 + math.sqrt(disc)) / (2.0 * c2)
    # G is negative between its roots.
    return mean - 2.0 * (antiderivative(hi) - antiderivative(lo))


class TestSupSquaredError:
    """Test suite for the per-path error statistic"""

    def test_deterministic_value(self):
        """Test zero noise gives the Euler versus exponential gap"""
        model = linear_model([1.0], [0.0])
        generator = validate_generator([[0.0]])
        grid = build_grid(1.0, 0.1)
        coupled = simulate_coupled(
            model, SchemePreset.EM.params, grid, 1.0, 1, SeedPair.for_replication(0, 0), generator
        )
        k = np.arange(11)
        expected = np.max((1.1**k - np.exp(0.1 * k)) ** 2)
        assert sup_squared_error(coupled) == pytest.approx(expected, rel=1e-12)

    def test_overflow_carries_prefix_value(self):
        """Test an overflowed member raises with the finite-prefix sup"""
        model = linear_model([-1000.0], [0.0])
        generator = validate_generator([[0.0]])
        grid = build_grid(100.0, 0.1)
        coupled = simulate_coupled(
            model, SchemePreset.EM.params, grid, 1.0, 1, SeedPair.for_replication(0, 0), generator
        )
        with pytest.raises(OverflowPresent) as info:
            sup_squared_error(coupled)
        assert info.value.overflow_index == coupled.numeric.overflow_index
        assert info.value.value > 1e100


class TestErrorStats:
    """Test suite for Monte Carlo reduction"""

    def make(self, values, overflowed):
        return ReplicationErrors(
            label="EM",
            params=SchemePreset.EM.params,
            sup_sq=np.array(values, dtype=float),
            overflowed=np.array(overflowed, dtype=bool),
        )

    def test_mean_and_standard_error(self):
        """Test the mean and s / sqrt(n) over finite replications"""
        stats = error_stats(self.make([1.0, 2.0, 3.0, 100.0], [False, False, False, True]))
        assert stats.n_replications == 4
        assert stats.overflow_count == 1
        assert stats.mean_sup_sq == pytest.approx(2.0)
        assert stats.std_error == pytest.approx(1.0 / math.sqrt(3.0))

    def test_all_overflowed(self):
        """Test AllOverflowed when nothing is finite"""
        with pytest.raises(AllOverflowed):
            error_stats(self.make([0.0, 0.0], [True, True]))

    def test_monte_carlo_error_matches_engine(self):
        """Test monte_carlo_error reduces the replication engine output"""
        model = linear_model([0.15, 0.05], [0.1, 0.1])
        generator = validate_generator([[-0.5, 0.5], [0.5, -0.5]])
        grid = build_grid(1.0, 0.05)
        params = SchemePreset.SYMMETRIC.params
        stats = monte_carlo_error(model, params, grid, 10.0, 1, 8, 3, generator)
        (errors,) = run_replications(model, [("x", params)], grid, 10.0, 1, generator, 8, 3)
        assert stats.mean_sup_sq == float(np.mean(errors.sup_sq))
        assert stats.n_replications == 8

    def test_monte_carlo_needs_two_replications(self):
        """Test a single replication is rejected"""
        model = linear_model([0.1], [0.1])
        with pytest.raises(ValidationError):
            monte_carlo_error(
                model, SchemePreset.EM.params, build_grid(1.0, 0.1), 1.0, 1, 1, 0, validate_generator([[0.0]])
            )


class TestFitStrongOrder:
    """Test suite for log-log order fits"""

    def test_exact_power_law(self):
        """Test mean = C dt recovers slope 1 and strong order 1/2"""
        fit = fit_strong_order([(dt, 3.0 * dt) for dt in (0.1, 0.01, 0.001)])
        assert fit.slope == pytest.approx(1.0)
        assert fit.intercept == pytest.approx(math.log(3.0))
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.strong_order == pytest.approx(0.5)

    def test_reference_table_columns(self):
        """Test fits on tabulated means for EM and symmetric PCEM"""
        deltas = [0.1, 0.01, 0.001, 0.0001, 0.00001]
        em = fit_strong_order(zip(deltas, [9702.4683, 376.9640, 24.0510, 3.0465, 0.1968]))
        symmetric = fit_strong_order(zip(deltas, [15.5672, 0.2299, 0.0017, 2.16e-05, 1.48e-07]))
        assert em.slope == pytest.approx(1.148, abs=0.01)
        assert symmetric.slope == pytest.approx(2.007, abs=0.01)

    def test_deterministic_euler_slope(self):
        """Test zero-noise Euler errors give slope 2"""
        model = linear_model([1.0], [0.0])
        generator = validate_generator([[0.0]])
        points = []
        for dt in (0.1, 0.01, 0.001):
            stats = monte_carlo_error(model, SchemePreset.EM.params, build_grid(1.0, dt), 1.0, 1, 2, 0, generator)
            points.append((dt, stats.mean_sup_sq))
        assert fit_strong_order(points).slope == pytest.approx(2.0, abs=0.1)

    @pytest.mark.parametrize(
        "deltas",
        [[0.1, 0.01], [0.1, 0.05, 0.02], [0.1, 0.1, 0.001], [0.1, -0.01, 0.001]],
    )
    def test_insufficient_ladder(self, deltas):
        """Test short, narrow, repeated or negative ladders are rejected"""
        with pytest.raises(InsufficientLadder):
            check_ladder(deltas)
        with pytest.raises(InsufficientLadder):
            fit_strong_order([(dt, 1.0) for dt in deltas])

    @pytest.mark.parametrize("bad", [0.0, -1.0, math.nan])
    def test_degenerate_means(self, bad):
        """Test non-positive or non-finite means raise DegenerateFit"""
        with pytest.raises(DegenerateFit):
            fit_strong_order([(0.1, 1.0), (0.01, bad), (0.001, 0.01)])


class TestTransferMoments:
    """Test suite for E[G^p] on the test equation"""

    @pytest.mark.parametrize("preset", list(SchemePreset))
    def test_second_moment_closed_form_on_lattice(self, preset):
        """Test quadrature matches c0^2 + c1^2 + 3 c2^2 + 2 c0 c2 on a 30x30 lattice"""
        grid_l, grid_a = np.meshgrid(LAMBDA_DT, ALPHA, indexing="ij")
        quadrature = transfer_moments(preset.params, grid_l, grid_a, 2.0)
        closed = closed_form_second_moment(preset.params, grid_l, grid_a)
        assert np.all(np.abs(quadrature - closed) <= 1e-10 * np.maximum(1.0, np.abs(closed)))

    def test_fourth_moment_by_polynomial_expansion(self):
        """Test p = 4 against the expanded polynomial and normal moments"""
        params = SchemeParams.scalar(0.3, 0.6)
        for lambda_dt, alpha in [(-0.5, 0.2), (-2.0, 0.8), (-0.05, 0.0)]:
            c = [float(v) for v in transfer_coefficients(params, lambda_dt, alpha)]
            expanded = np.polynomial.polynomial.polypow(c, 4)
            expanded = np.pad(expanded, (0, len(STANDARD_NORMAL_MOMENTS) - len(expanded)))
            exact = float(np.dot(expanded, STANDARD_NORMAL_MOMENTS))
            assert transfer_moment(params, lambda_dt, alpha, 4.0) == pytest.approx(exact, rel=1e-10)

    def test_non_convergence_reports_node(self, mocker):
        """Test a quadrature that never settles names the offending node"""
        mocker.patch.object(analysis, "quad", return_value=(1.0, 1.0, {}, "roundoff error is detected"))
        with pytest.raises(QuadratureNonConvergent) as info:
            transfer_moment(SchemePreset.FULLY_IMPLICIT.params, -2.5, 0.9, 0.5)
        assert info.value.lambda_dt == -2.5
        assert info.value.alpha == 0.9

    @pytest.mark.parametrize("p", [0.5, 1.0, 3.0])
    @pytest.mark.parametrize("preset", list(SchemePreset))
    def test_non_even_orders_on_lattice(self, preset, p):
        """Test fractional and odd p give finite moments with |c0|^p on the noiseless column"""
        lambda_dt = np.linspace(-3.0, -0.01, 8)
        alpha = np.linspace(0.0, 0.97, 8)
        region = scan_stability_region(preset.params, p, lambda_dt, alpha)
        assert np.all(np.isfinite(region.moments))
        assert np.all(region.moments >= 0.0)
        c0, _, _ = transfer_coefficients(preset.params, lambda_dt, 0.0)
        np.testing.assert_allclose(region.moments[:, 0], np.abs(c0) ** p, rtol=1e-12)

    @pytest.mark.parametrize("preset", list(SchemePreset))
    def test_masks_shrink_as_p_grows(self, preset):
        """Test a node stable in p-th moment is stable in every lower moment"""
        lambda_dt = np.linspace(-3.0, -0.01, 8)
        alpha = np.linspace(0.0, 0.97, 8)
        masks = [scan_stability_region(preset.params, p, lambda_dt, alpha).mask for p in (0.5, 1.0, 3.0)]
        assert np.all(masks[1] <= masks[0])
        assert np.all(masks[2] <= masks[1])

    @pytest.mark.parametrize(
        "params, lambda_dt, alpha",
        [
            (SchemePreset.EM.params, -0.5, 0.3),
            (SchemePreset.EM.params, -1.0, 0.2),
            (SchemePreset.EM.params, -2.5, 0.6),
            (SchemePreset.SYMMETRIC.params, -3.0, 0.9),
            (SchemePreset.SYMMETRIC.params, -0.5, 0.9),
            (SchemePreset.FULLY_IMPLICIT.params, -2.0, 0.8),
            (SchemePreset.SEMI_DIFFUSION_IMPLICIT.params, -1.5, 0.7),
        ],
    )
    def test_first_absolute_moment_closed_form(self, params, lambda_dt, alpha):
        """Test p = 1 against E|G| from normal integrals between the roots of G"""
        c0, c1, c2 = (float(c) for c in transfer_coefficients(params, lambda_dt, alpha))
        assert transfer_moment(params, lambda_dt, alpha, 1.0) == pytest.approx(
            first_absolute_moment(c0, c1, c2), rel=1e-8
        )

    @pytest.mark.parametrize("preset", list(SchemePreset))
    def test_orders_near_two_agree_with_hermite(self, preset):
        """Test the root-split integral just above p = 2 matches the exact p = 2 moment"""
        for lambda_dt, alpha in [(-2.0, 0.8), (-0.7, 0.5), (-2.588, 0.268)]:
            exact = transfer_moment(preset.params, lambda_dt, alpha, 2.0)
            nearby = transfer_moment(preset.params, lambda_dt, alpha, 2.0 + 1e-9)
            assert nearby == pytest.approx(exact, rel=1e-7)

    @pytest.mark.parametrize("lambda_dt, alpha, p", [(0.5, 0.1, 2.0), (-1.0, 1.0, 2.0), (-1.0, 0.1, 0.0)])
    def test_domain(self, lambda_dt, alpha, p):
        """Test lambda dt < 0, alpha in [0, 1) and p > 0 are enforced"""
        with pytest.raises(ValidationError):
            transfer_moment(SchemePreset.EM.params, lambda_dt, alpha, p)


class TestStabilityRegion:
    """Test suite for lattice scans and boundaries"""

    def test_euler_deterministic_column(self):
        """Test EM at alpha = 0, p = 2 is stable exactly on (-2, 0)"""
        region = scan_stability_region(SchemePreset.EM.params, 2.0, LAMBDA_DT, ALPHA, scheme="EM")
        assert region.moments.shape == (30, 30)
        np.testing.assert_array_equal(region.mask[:, 0], LAMBDA_DT > -2.0)
        assert region.scheme == "EM"
        assert region.stable_count == int(region.mask.sum())

    def test_symmetric_and_euler_second_moment_regions(self):
        """Test the p = 2 regions share the noiseless column but neither contains the other"""
        em = scan_stability_region(SchemePreset.EM.params, 2.0, LAMBDA_DT, ALPHA)
        symmetric = scan_stability_region(SchemePreset.SYMMETRIC.params, 2.0, LAMBDA_DT, ALPHA)
        np.testing.assert_array_equal(em.mask[:, 0], symmetric.mask[:, 0])
        assert (em.stable_count, symmetric.stable_count) == (342, 337)

        em_only = em.mask & ~symmetric.mask
        symmetric_only = symmetric.mask & ~em.mask
        assert int(em_only.sum()) == 23
        assert int(symmetric_only.sum()) == 18
        # The 3 eta^2 s^4 term of E[G^2] dominates at large |lambda dt|.
        rows, _ = np.nonzero(em_only)
        assert np.all(LAMBDA_DT[rows] < -2.0)

        point = em.point(4, 8)
        assert point.lambda_dt == pytest.approx(-2.5876, abs=1e-4)
        assert point.alpha == pytest.approx(0.2676, abs=1e-4)
        assert point.moment == pytest.approx(0.9938, abs=1e-4)
        assert symmetric.point(4, 8).moment == pytest.approx(1.4450, abs=1e-4)

    def test_point_view(self):
        """Test point(i, j) exposes one lattice node"""
        region = scan_stability_region(SchemePreset.EM.params, 2.0, LAMBDA_DT, ALPHA)
        point = region.point(29, 0)
        assert point.lambda_dt == pytest.approx(-0.01)
        assert point.moment == pytest.approx(0.99**2)
        assert point.stable

    def test_boundary_tolerance(self):
        """Test moments within 1e-10 of one count as unstable"""
        assert not is_stable(1.0)
        assert not is_stable(1.0 - 1e-11)
        assert is_stable(0.5)

    def test_euler_boundary(self):
        """Test EM at alpha = 0, p = 2 crosses at lambda dt = -2"""
        assert stability_boundary(SchemePreset.EM.params, 0.0, 2.0) == pytest.approx(-2.0, abs=1e-8)

    def test_boundary_of_unconditionally_stable_scheme(self):
        """Test a scheme stable down to the search limit returns the limit"""
        assert stability_boundary(SchemePreset.DRIFT_IMPLICIT.params, 0.0, 2.0, lo=-0.5) == -0.5

    def test_boundary_of_unstable_scheme(self):
        """Test None when the scheme is unstable next to zero"""
        assert stability_boundary(SchemePreset.EM.params, 0.9, 2.0) is None

    def test_state_wise_region_equals_scalar_region(self):
        """Test a two-regime model sweeping the lattice reproduces the scalar mask"""
        for preset in (SchemePreset.EM, SchemePreset.SYMMETRIC, SchemePreset.SEMI_DIFFUSION_IMPLICIT):
            region = scan_stability_region(preset.params, 2.0, LAMBDA_DT, ALPHA)
            for i, lambda_dt in enumerate(LAMBDA_DT):
                for j, alpha in enumerate(ALPHA):
                    model = StabilityTestModel(alpha=(alpha, alpha), lam=(lambda_dt, lambda_dt))
                    verdict = state_p_stable(model, preset.params, 1.0, 2.0)
                    assert verdict.overall == region.mask[i, j]

    def test_one_unstable_regime_breaks_state_stability(self):
        """Test the overall verdict is the conjunction over regimes"""
        model = StabilityTestModel(alpha=(0.0, 0.0), lam=(-1.0, -25.0))
        verdict = state_p_stable(model, SchemePreset.EM.params, 0.1, 2.0)
        assert verdict.per_regime == (True, False)
        assert not verdict.overall
        assert state_p_stable(model, SchemePreset.EM.params, 0.01, 2.0).overall


class TestContinuousBoundary:
    """Test suite for the continuous p-stability criterion"""

    @pytest.mark.parametrize("p", [0.5, 1.0, 2.0, 4.0])
    def test_agrees_with_exact_moment(self, p):
        """Test the exact moment decays just below the boundary and grows just above"""
        boundary = continuous_stability_boundary(p)
        assert boundary == pytest.approx(1.0 / (1.0 + p / 2.0))
        below = StabilityTestModel(alpha=(boundary - 1e-3,), lam=(-1.0,))
        above = StabilityTestModel(alpha=(boundary + 1e-3,), lam=(-1.0,))
        assert exact_linear_moment(below, p, 1.0, 1.0) < 1.0
        assert exact_linear_moment(above, p, 1.0, 1.0) > 1.0

    def test_requires_positive_p(self):
        """Test p must be positive"""
        with pytest.raises(ValidationError):
            continuous_stability_boundary(0.0)


class TestPathSpread:
    """Test suite for the scheme divergence diagnostic"""

    def test_identical_and_diverging_paths(self):
        """Test zero spread for one scheme and a positive spread across schemes"""
        model = linear_model([0.15, 0.05], [0.1, 0.1])
        generator = validate_generator([[-0.5, 0.5], [0.5, -0.5]])
        grid = build_grid(1.0, 0.1)
        seeds = SeedPair.for_replication(4, 0)
        em = simulate_path(model, SchemePreset.EM.params, grid, 10.0, 1, seeds, generator)
        symmetric = simulate_path(model, SchemePreset.SYMMETRIC.params, grid, 10.0, 1, seeds, generator)
        assert path_spread([em]) == 0.0
        assert path_spread([em, em]) == 0.0
        expected = float(np.max(np.abs(em.states - symmetric.states)))
        assert path_spread([em, symmetric]) == pytest.approx(expected)
