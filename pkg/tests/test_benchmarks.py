"""Tests for the benchmark families and the measurement kit.

The closed-form solutions are the ground truth for every convergence
table, so each family is checked here against its own PDE by finite
differences (independent of the propagator code), and the box-integral
helpers are checked against direct numerical quadrature.
"""

import math

import numpy as np
import numpy.testing as nptest
import pytest
from scipy.integrate import quad, solve_ivp

from ttmfg.basis import BasisSpec
from ttmfg.cross import cross_fit
from ttmfg.benchmarks import (
    ErrorPair,
    ValidationSet,
    advection_diffusion_problem,
    compute_errors,
    conservation_defects,
    convergence_order,
    fit_scaling,
    grid_sl_reference,
    local_mfg_problem,
    nonlocal_mfg_problem,
    positivity_probe,
    positivity_probe_points,
    positivity_problem,
    relative_errors,
)

# finite-difference helpers; h = 1e-4 keeps the second-derivative
# truncation and roundoff both below the 1e-6 residual budget
H_FIRST = 1e-6
H_SECOND = 1e-4
H_TIME = 1e-5


def fd_time(f, pts, t):
    return (f(pts, t + H_TIME) - f(pts, t - H_TIME)) / (2.0 * H_TIME)


def fd_grad(f, pts, t):
    out = np.zeros_like(pts)
    for i in range(pts.shape[1]):
        shift = np.zeros(pts.shape[1])
        shift[i] = H_FIRST
        out[:, i] = (f(pts + shift, t) - f(pts - shift, t)) / (2.0 * H_FIRST)
    return out


def fd_laplacian(f, pts, t):
    base = f(pts, t)
    acc = np.zeros(len(pts))
    for i in range(pts.shape[1]):
        shift = np.zeros(pts.shape[1])
        shift[i] = H_SECOND
        acc += f(pts + shift, t) - 2.0 * base + f(pts - shift, t)
    return acc / H_SECOND**2


def fd_divergence(field, pts, t):
    acc = np.zeros(len(pts))
    for i in range(pts.shape[1]):
        shift = np.zeros(pts.shape[1])
        shift[i] = H_FIRST
        acc += (field(pts + shift, t)[:, i]
                - field(pts - shift, t)[:, i]) / (2.0 * H_FIRST)
    return acc


def interior_cloud(dim, half_width, n=100, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.9 * half_width, 0.9 * half_width, (n, dim))


class TestValidationSet:
    def test_deterministic_for_fixed_seed(self):
        a = ValidationSet.draw(3, 2.5, 500, seed=1)
        b = ValidationSet.draw(3, 2.5, 500, seed=1)
        nptest.assert_array_equal(a.points, b.points)

    def test_seed_changes_cloud(self):
        a = ValidationSet.draw(2, 1.0, 200, seed=1)
        b = ValidationSet.draw(2, 1.0, 200, seed=2)
        assert np.max(np.abs(a.points - b.points)) > 1e-3

    def test_range_and_shape(self):
        vset = ValidationSet.draw(4, 0.3, 1000, seed=7)
        assert vset.points.shape == (1000, 4)
        assert len(vset) == 1000
        assert np.all(np.abs(vset.points) <= 0.3)

    def test_default_size_is_1e5(self):
        vset = ValidationSet.draw(1, 1.0)
        assert len(vset) == 100_000


class TestErrorMetrics:
    def test_exact_match_gives_zero(self):
        exact = np.linspace(1.0, 2.0, 50)
        pair = relative_errors(exact, exact)
        assert pair == ErrorPair(0.0, 0.0, False, 0)

    def test_uniform_scaling_gives_relative_error(self):
        exact = np.linspace(0.5, 3.0, 64)
        pair = relative_errors(1.01 * exact, exact)
        nptest.assert_allclose(pair.e2, 0.01, rtol=1e-12)
        nptest.assert_allclose(pair.einf, 0.01, rtol=1e-12)

    def test_all_zero_exact_flags_absolute(self):
        pair = relative_errors(np.array([1e-3, -1e-3]), np.zeros(2))
        assert pair.absolute
        nptest.assert_allclose(pair.e2, math.sqrt(2.0) * 1e-3)
        assert math.isnan(pair.einf)

    def test_near_zero_denominators_are_counted_not_dropped(self):
        exact = np.array([1.0, 1e-15, -2.0])
        pair = relative_errors(exact, exact)
        assert pair.n_guarded == 1
        assert pair.e2 == 0.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shape"):
            relative_errors(np.zeros(3), np.zeros(4))

    def test_compute_errors_rejects_vanishing_exact(self):
        vset = ValidationSet.draw(2, 1.0, 50, seed=3)
        with pytest.raises(ValueError, match="vanishes"):
            compute_errors(lambda p: np.ones(len(p)),
                           lambda p: np.zeros(len(p)), vset)

    def test_compute_errors_evaluates_on_the_cloud(self):
        vset = ValidationSet.draw(2, 1.0, 400, seed=5)
        exact = lambda p: 1.0 + p[:, 0] ** 2
        pair = compute_errors(lambda p: exact(p) + 1e-4, exact, vset)
        assert 0 < pair.e2 < 1e-3
        assert 0 < pair.einf < 1e-3


class TestConvergenceOrder:
    def test_exact_halving_law(self):
        nptest.assert_allclose(convergence_order([4e-4, 1e-4]), [2.0])

    def test_reference_second_order_ladder(self):
        errors = [1.25e-4, 3.02e-5, 7.43e-6, 1.84e-6, 4.59e-7]
        orders = convergence_order(errors)
        nptest.assert_allclose(orders, [2.05, 2.02, 2.01, 2.0], atol=5e-3)

    def test_constant_errors_give_order_zero(self):
        nptest.assert_allclose(convergence_order([1e-3, 1e-3, 1e-3]), 0.0)

    def test_non_positive_entries_yield_nan(self):
        orders = convergence_order([1e-2, 0.0, 1e-3])
        assert np.isnan(orders).all()

    def test_single_error_raises(self):
        with pytest.raises(ValueError, match="two errors"):
            convergence_order([1e-3])


class TestTransportFamily:
    def test_default_horizon_halves_the_amplitude(self):
        prob = advection_diffusion_problem(3, nu=0.1)
        assert abs(prob.horizon - 0.23410) < 1e-4
        decay = math.exp(-0.1 * math.pi**2 * 3 * prob.horizon)
        nptest.assert_allclose(decay, 0.5, rtol=1e-12)

    def test_density_at_offset_point_is_baseline(self):
        prob = advection_diffusion_problem(4)
        offsets = (np.arange(4) / 4)[None]
        nptest.assert_allclose(prob.exact.density(offsets, 0.0), 2.0)

    def test_velocity_is_unit_in_every_axis(self):
        prob = advection_diffusion_problem(2)
        pts = interior_cloud(2, 1.0, n=10)
        nptest.assert_array_equal(prob.velocity(pts, 0.3), np.ones((10, 2)))

    @pytest.mark.parametrize("dim", [1, 3])
    def test_density_solves_the_transport_equation(self, dim):
        prob = advection_diffusion_problem(dim, nu=0.1)
        m = prob.exact.density
        pts = interior_cloud(dim, 1.0)
        for t in (0.1 * prob.horizon, 0.6 * prob.horizon):
            residual = (fd_time(m, pts, t)
                        + fd_divergence(
                            lambda p, s: m(p, s)[:, None] * prob.velocity(p, s),
                            pts, t)
                        - prob.viscosity * fd_laplacian(m, pts, t))
            assert np.max(np.abs(residual)) < 1e-6

    def test_positivity_variant_solves_its_equation(self):
        prob = positivity_problem(dim=8)
        m = prob.exact.density
        pts = interior_cloud(8, 1.0)
        t = 0.5 * prob.horizon
        residual = (fd_time(m, pts, t)
                    + fd_divergence(
                        lambda p, s: m(p, s)[:, None] * prob.velocity(p, s),
                        pts, t)
                    - prob.viscosity * fd_laplacian(m, pts, t))
        assert np.max(np.abs(residual)) < 1e-6

    def test_probe_points_sit_on_the_diagonal(self):
        prob = positivity_problem()
        probes = positivity_probe_points(8, prob.horizon)
        assert probes.shape == (8, 8)
        assert np.all(probes == probes[:, :1])

    def test_exact_final_density_vanishes_at_probes(self):
        prob = positivity_problem()
        probes = positivity_probe_points(8, prob.horizon)
        vals = prob.exact.density(probes, prob.horizon)
        nptest.assert_allclose(vals, 0.0, atol=1e-12)
        assert positivity_probe(
            lambda p: prob.exact.density(p, prob.horizon), probes) == \
            pytest.approx(0.0, abs=1e-12)

    def test_box_mass_matches_quadrature_1d(self):
        prob = advection_diffusion_problem(1, nu=0.1)
        t = 0.4 * prob.horizon
        ref, _ = quad(lambda x: prob.exact.density(np.array([[x]]), t)[0],
                      -1.0, 1.0, epsabs=1e-12)
        nptest.assert_allclose(prob.exact.box_mass(t), ref, atol=1e-10)

    def test_box_moment_matches_quadrature_1d(self):
        prob = advection_diffusion_problem(1, nu=0.1)
        t = 0.7 * prob.horizon
        ref, _ = quad(lambda x: x * prob.exact.density(np.array([[x]]), t)[0],
                      -1.0, 1.0, epsabs=1e-12)
        nptest.assert_allclose(prob.exact.box_moments(t), [ref], atol=1e-10)

    def test_multivariate_box_moments_vanish_by_symmetry(self):
        prob = advection_diffusion_problem(3, nu=0.1)
        nptest.assert_array_equal(prob.exact.box_moments(0.1), np.zeros(3))

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError, match="dim"):
            advection_diffusion_problem(0)
        with pytest.raises(ValueError, match="nu"):
            advection_diffusion_problem(2, nu=0.0)


class TestLocalMfgFamily:
    @pytest.mark.parametrize("beta,gamma", [(1.0, 0.1), (0.08, 0.1), (1.0, 0.0)])
    def test_value_solves_the_hjb_equation(self, beta, gamma):
        problem, exact = local_mfg_problem(3, nu=1.0, beta=beta, gamma=gamma)
        u, m = exact.value, exact.density
        pts = interior_cloud(3, 1.0)
        for t in (0.2, 0.8):
            grad = fd_grad(u, pts, t)
            residual = (-fd_time(u, pts, t)
                        - problem.viscosity * fd_laplacian(u, pts, t)
                        + 0.5 * np.sum(grad**2, axis=1)
                        - 0.5 * beta * np.sum(pts**2, axis=1)
                        - gamma * np.log(m(pts, t)))
            assert np.max(np.abs(residual)) < 1e-6

    def test_density_is_stationary_under_the_exact_policy(self):
        problem, exact = local_mfg_problem(3, nu=1.0, beta=0.08)
        m, q = exact.density, exact.policy

        def flux(pts, t):
            return m(pts, t)[:, None] * q(pts, t)

        pts = interior_cloud(3, 1.0)
        residual = (fd_time(m, pts, 0.5)
                    - problem.viscosity * fd_laplacian(m, pts, 0.5)
                    - fd_divergence(flux, pts, 0.5))
        assert np.max(np.abs(residual)) < 1e-6

    def test_policy_is_the_value_gradient(self):
        _, exact = local_mfg_problem(2, beta=0.08)
        pts = interior_cloud(2, 1.0, n=50)
        nptest.assert_allclose(exact.policy(pts, 0.3),
                               fd_grad(exact.value, pts, 0.3), atol=1e-8)

    def test_gamma_zero_collapses_alpha_to_sqrt_beta(self):
        problem, exact = local_mfg_problem(
            3, nu=0.01, beta=1.0, gamma=0.0, half_width=0.1, horizon=0.02)
        pts = np.array([[0.1, 0.0, 0.0]])
        # u(x, 0) = alpha |x|^2 / 2 with alpha = sqrt(beta) = 1
        nptest.assert_allclose(exact.value(pts, 0.0), 0.005, rtol=1e-12)

    def test_box_mass_matches_quadrature(self):
        _, exact = local_mfg_problem(1, nu=1.0, beta=0.08)
        ref, _ = quad(lambda x: exact.density(np.array([[x]]), 0.0)[0],
                      -1.0, 1.0, epsabs=1e-13)
        nptest.assert_allclose(exact.box_mass(0.0), ref, atol=1e-11)

    def test_density_normalizes_over_all_space(self):
        problem, exact = local_mfg_problem(1, nu=1.0, beta=0.08)
        ref, _ = quad(lambda x: exact.density(np.array([[x]]), 0.0)[0],
                      -np.inf, np.inf)
        nptest.assert_allclose(ref, 1.0, rtol=1e-9)

    def test_negative_discriminant_raises(self):
        with pytest.raises(ValueError, match="must be >= 0"):
            local_mfg_problem(2, nu=1.0, beta=-1.0, gamma=0.1)

    def test_zero_viscosity_raises(self):
        with pytest.raises(ValueError, match="nu"):
            local_mfg_problem(2, nu=0.0)


class TestNonlocalFamily:
    def test_value_solves_the_hjb_equation(self):
        for nu in (0.0, 1e-3):
            problem, exact = nonlocal_mfg_problem(3, nu=nu)
            u = exact.value
            mean = np.full(3, 0.1)
            pts = interior_cloud(3, 2.5)
            for t in (0.05, 0.2):
                grad = fd_grad(u, pts, t)
                residual = (-fd_time(u, pts, t)
                            - nu * fd_laplacian(u, pts, t)
                            + 0.5 * np.sum(grad**2, axis=1)
                            - 0.5 * np.sum((pts - mean) ** 2, axis=1))
                assert np.max(np.abs(residual)) < 1e-6

    def test_density_solves_the_forward_equation(self):
        for nu in (0.0, 1e-3):
            problem, exact = nonlocal_mfg_problem(3, nu=nu)
            m, q = exact.density, exact.policy

            def flux(pts, t):
                return m(pts, t)[:, None] * q(pts, t)

            pts = interior_cloud(3, 1.5, seed=4)
            for t in (0.05, 0.2):
                residual = (fd_time(m, pts, t)
                            - nu * fd_laplacian(m, pts, t)
                            - fd_divergence(flux, pts, t))
                assert np.max(np.abs(residual)) < 1e-6

    def test_policy_is_the_value_gradient(self):
        _, exact = nonlocal_mfg_problem(2, nu=1e-3)
        pts = interior_cloud(2, 2.0, n=50, seed=9)
        nptest.assert_allclose(exact.policy(pts, 0.1),
                               fd_grad(exact.value, pts, 0.1), atol=1e-8)

    def test_terminal_value_vanishes(self):
        _, exact = nonlocal_mfg_problem(3, nu=1e-3)
        pts = interior_cloud(3, 2.5, n=20)
        nptest.assert_allclose(exact.value(pts, 0.25), 0.0, atol=1e-14)

    def test_variance_against_ode_integration(self):
        """The axis variance obeys dV/dt = -2 tanh(T-t) V + 2 nu."""
        for nu in (0.0, 1e-3):
            _, exact = nonlocal_mfg_problem(3, nu=nu)
            T, var0 = 0.25, 0.25

            def rhs(t, v):
                return -2.0 * math.tanh(T - t) * v + 2.0 * nu

            sol = solve_ivp(rhs, (0.0, T), [var0], rtol=1e-11, atol=1e-13,
                            dense_output=True)
            for t in (0.0, 0.1, 0.25):
                # read the variance back out of the normalization constant
                at_mean = exact.density(np.full((1, 3), 0.1), t)[0]
                var = (2.0 * math.pi) ** -1 * at_mean ** (-2.0 / 3.0)
                nptest.assert_allclose(var, sol.sol(t)[0], rtol=1e-8)

    def test_terminal_variance_frozen_value(self):
        _, exact = nonlocal_mfg_problem(3, nu=0.0)
        at_mean = exact.density(np.full((1, 3), 0.1), 0.25)[0]
        var = (2.0 * math.pi) ** -1 * at_mean ** (-2.0 / 3.0)
        nptest.assert_allclose(var, 0.2350037, atol=1e-7)
        nptest.assert_allclose(var, 0.25 / math.cosh(0.25) ** 2, rtol=1e-12)

    def test_box_mass_matches_quadrature_per_axis(self):
        _, exact = nonlocal_mfg_problem(1, nu=1e-3, half_width=2.5)
        for t in (0.0, 0.2):
            ref, _ = quad(lambda x: exact.density(np.array([[x]]), t)[0],
                          -2.5, 2.5, epsabs=1e-13)
            nptest.assert_allclose(exact.box_mass(t), ref, atol=1e-11)

    def test_box_moments_match_quadrature_per_axis(self):
        _, exact = nonlocal_mfg_problem(1, nu=0.0, half_width=2.5)
        for t in (0.0, 0.25):
            ref, _ = quad(lambda x: x * exact.density(np.array([[x]]), t)[0],
                          -2.5, 2.5, epsabs=1e-13)
            nptest.assert_allclose(exact.box_moments(t), [ref], atol=1e-11)

    def test_box_mass_is_nearly_one(self):
        # the default box keeps all but ~1e-6 of the Gaussian mass
        _, exact = nonlocal_mfg_problem(3, nu=0.0)
        assert 0.999995 < exact.box_mass(0.25) < 1.0

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError, match="sigma0"):
            nonlocal_mfg_problem(2, sigma0=0.0)


class TestConservationDefects:
    class FakeAccessor:
        def __init__(self, mass, moments):
            self._mass = mass
            self._moments = np.asarray(moments, dtype=float)

        def mass(self):
            return self._mass

        def first_moments(self):
            return self._moments

    def test_defects_against_known_truth(self):
        acc = self.FakeAccessor(0.98, [0.1, 0.07])
        e_mass, e_mom = conservation_defects(acc, 1.0, np.array([0.1, 0.1]))
        nptest.assert_allclose(e_mass, 0.02)
        nptest.assert_allclose(e_mom, 0.03)

    def test_exact_refit_has_tiny_defects(self):
        _, exact = nonlocal_mfg_problem(2, nu=0.0)
        basis = tuple(BasisSpec(40, 2.5) for _ in range(2))
        fit = cross_fit(lambda p: exact.density(p, 0.0), basis, 4,
                        rng=np.random.default_rng(0))
        e_mass, e_mom = conservation_defects(
            fit.tt, exact.box_mass(0.0), exact.box_moments(0.0))
        assert e_mass < 1e-8
        assert e_mom < 1e-8


class TestGridReference:
    def hjb_only(self, dim):
        return local_mfg_problem(dim, nu=0.01, beta=1.0, gamma=0.0,
                                 half_width=0.1, horizon=0.02)

    def test_refuses_high_dimension(self):
        problem, _ = self.hjb_only(4)
        vset = ValidationSet.draw(4, 0.1, 10, seed=1)
        with pytest.raises(ValueError, match="d <= 3"):
            grid_sl_reference(problem, 5, 2, vset)

    def test_requires_exact_value(self):
        problem, _ = self.hjb_only(2)
        problem.exact_value = None
        vset = ValidationSet.draw(2, 0.1, 10, seed=1)
        with pytest.raises(ValueError, match="exact value"):
            grid_sl_reference(problem, 5, 2, vset)

    def test_refuses_density_coupled_costs(self):
        problem, _ = local_mfg_problem(2, nu=1.0, beta=0.08, gamma=0.1)
        vset = ValidationSet.draw(2, 1.0, 10, seed=1)
        with pytest.raises(ValueError, match="density-free"):
            grid_sl_reference(problem, 5, 2, vset)

    def test_converges_on_the_decoupled_problem(self):
        problem, _ = self.hjb_only(2)
        vset = ValidationSet.draw(2, 0.1, 2000, seed=1)
        coarse = grid_sl_reference(problem, 10, 4, vset)
        fine = grid_sl_reference(problem, 10, 8, vset)
        assert fine.e2 < coarse.e2
        assert 0.8 < math.log2(coarse.e2 / fine.e2) < 1.2


class TestScalingFits:
    def test_exact_power_law_is_recovered(self):
        d = np.arange(3, 9, dtype=float)
        fits = fit_scaling(d, 2.0 * d**3)
        nptest.assert_allclose(fits["power"].b, 3.0, rtol=1e-12)
        nptest.assert_allclose(fits["power"].a, 2.0, rtol=1e-12)
        nptest.assert_allclose(fits["power"].r2, 1.0, atol=1e-12)

    def test_exact_exponential_is_recovered(self):
        d = np.arange(3, 9, dtype=float)
        fits = fit_scaling(d, 0.5 * np.exp(0.7 * d))
        nptest.assert_allclose(fits["exponential"].b, 0.7, rtol=1e-12)
        nptest.assert_allclose(fits["exponential"].a, 0.5, rtol=1e-12)
        nptest.assert_allclose(fits["exponential"].r2, 1.0, atol=1e-12)

    def test_reference_cpu_column_prefers_quartic_power_law(self):
        times = [1.02, 3.03, 7.17, 16.43, 30.05, 51.78]
        fits = fit_scaling(range(3, 9), times)
        assert abs(fits["power"].b - 4.03) < 0.3
        assert fits["power"].r2 > fits["exponential"].r2

    def test_too_few_points_raises(self):
        with pytest.raises(ValueError, match="three"):
            fit_scaling([3, 4], [1.0, 2.0])

    def test_non_positive_times_raise(self):
        with pytest.raises(ValueError, match="positive"):
            fit_scaling([3, 4, 5], [1.0, -2.0, 3.0])

    def test_mismatched_lengths_raise(self):
        with pytest.raises(ValueError, match="matching"):
            fit_scaling([3, 4, 5], [1.0, 2.0])
