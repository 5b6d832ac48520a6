import numpy as np
import pytest

from msflow.errors import (
    ContractViolationError,
    NumericError,
    SingularityError,
    UnsupportedCombinationError,
)
from msflow.operators import dense_operator, mask_operator
from msflow.priors import (
    InnerSchedule,
    LatentFit,
    OneNormFit,
    QuadraticFit,
    RadialPrior,
    ToyDecoder,
    data_update_iterative,
    identity_decoder,
    prox_one_norm,
    prox_quadratic,
    radial_grad,
    radial_value,
)


class TestRadialPrior:
    def test_d2_minimizer_on_unit_sphere(self):
        prior = RadialPrior(2)
        x = np.array([1.0, 0.0])
        assert radial_value(prior, x) == pytest.approx(0.5, abs=1e-15)
        assert np.allclose(radial_grad(prior, x), np.zeros(2), rtol=0, atol=1e-15)

    def test_d4_hand_computed_gradient(self):
        prior = RadialPrior(4)
        g = radial_grad(prior, np.array([2.0, 0.0, 0.0, 0.0]))
        assert np.allclose(g, [0.5, 0.0, 0.0, 0.0], rtol=0, atol=1e-15)

    def test_gradient_matches_finite_differences(self):
        prior = RadialPrior(16)
        rng = np.random.default_rng(0)
        x = rng.normal(size=16) * 2.0
        g = radial_grad(prior, x)
        eps = 1e-6
        fd = np.zeros(16)
        for i in range(16):
            xp, xm = x.copy(), x.copy()
            xp[i] += eps
            xm[i] -= eps
            fd[i] = (radial_value(prior, xp) - radial_value(prior, xm)) / (2 * eps)
        assert np.allclose(g, fd, rtol=1e-7, atol=1e-9)

    @pytest.mark.parametrize("d", [2, 4, 16, 64])
    def test_gradient_vanishes_on_typical_sphere(self, d):
        prior = RadialPrior(d)
        rng = np.random.default_rng(d)
        direction = rng.normal(size=d)
        x = np.sqrt(d - 1) * direction / np.linalg.norm(direction)
        assert np.linalg.norm(radial_grad(prior, x)) <= 1e-12

    @pytest.mark.parametrize("d", [2, 16])
    def test_gradient_sign_flips_across_sphere(self, d):
        prior = RadialPrior(d)
        rng = np.random.default_rng(d + 1)
        u = rng.normal(size=d)
        u /= np.linalg.norm(u)
        inside = 0.5 * np.sqrt(d - 1) * u
        outside = 2.0 * np.sqrt(d - 1) * u
        assert radial_grad(prior, inside) @ inside < 0     # pushes outward
        assert radial_grad(prior, outside) @ outside > 0   # pulls inward

    def test_origin_is_singular(self):
        prior = RadialPrior(4)
        with pytest.raises(SingularityError):
            radial_value(prior, np.zeros(4))
        with pytest.raises(SingularityError):
            radial_grad(prior, np.full(4, 1e-10))

    def test_dimension_lower_bound(self):
        with pytest.raises(ContractViolationError):
            RadialPrior(1)


class TestProxQuadratic:
    def test_one_dimensional_hand_value(self):
        fit = QuadraticFit(dense_operator(np.eye(1)), np.array([2.0]))
        out = prox_quadratic(fit, np.array([0.0]), 1.0)
        assert np.allclose(out, [1.0], rtol=0, atol=1e-14)

    def test_zero_operator_returns_anchor(self):
        fit = QuadraticFit(dense_operator(np.zeros((2, 2))), np.array([5.0, -3.0]))
        x_k = np.array([0.25, 0.75])
        out = prox_quadratic(fit, x_k, 2.0)
        assert np.allclose(out, x_k, rtol=0, atol=1e-14)

    def test_matches_dense_inverse_oracle(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(8, 8))
        y = rng.normal(size=8)
        x_k = rng.normal(size=8)
        alpha = 0.7
        fit = QuadraticFit(dense_operator(A), y)
        out = prox_quadratic(fit, x_k, alpha)
        oracle = np.linalg.inv(A.T @ A + alpha * np.eye(8)) @ (A.T @ y + alpha * x_k)
        assert np.allclose(out, oracle, rtol=0, atol=1e-10)

    def test_residual_meets_contract(self):
        rng = np.random.default_rng(4)
        A = rng.normal(size=(12, 20))
        fit = QuadraticFit(dense_operator(A), rng.normal(size=12))
        x_k = rng.normal(size=20)
        alpha = 0.05
        out = prox_quadratic(fit, x_k, alpha)
        M = A.T @ A + alpha * np.eye(20)
        rhs = A.T @ fit.y + alpha * x_k
        assert np.linalg.norm(M @ out - rhs) <= 1e-10 * np.linalg.norm(rhs)

    def test_prox_optimality_gradient_norm(self):
        rng = np.random.default_rng(5)
        A = rng.normal(size=(6, 9))
        fit = QuadraticFit(dense_operator(A), rng.normal(size=6))
        x_k = rng.normal(size=9)
        alpha = 1.3
        out = prox_quadratic(fit, x_k, alpha)
        grad = fit.grad(out) + alpha * (out - x_k)
        assert np.linalg.norm(grad) <= 1e-8 * (1 + np.linalg.norm(out))

    def test_nonpositive_alpha_rejected(self):
        fit = QuadraticFit(dense_operator(np.eye(2)), np.zeros(2))
        with pytest.raises(ContractViolationError):
            prox_quadratic(fit, np.zeros(2), 0.0)


class TestProxOneNorm:
    def test_shrinks_by_inverse_alpha(self):
        fit = OneNormFit(np.array([0.0]))
        assert np.allclose(prox_one_norm(fit, np.array([2.0]), 1.0), [1.0], rtol=0, atol=1e-15)

    def test_full_shrinkage_inside_threshold(self):
        rng = np.random.default_rng(6)
        y = rng.normal(size=5)
        alpha = 2.0
        x_k = y + rng.uniform(-0.49, 0.49, size=5)  # within 1/alpha of y
        assert np.allclose(prox_one_norm(fit := OneNormFit(y), x_k, alpha), y, rtol=0, atol=1e-15)

    def test_beats_random_perturbations_and_grid(self):
        rng = np.random.default_rng(7)
        y = rng.normal(size=6)
        x_k = rng.normal(size=6) * 2
        alpha = 0.8
        fit = OneNormFit(y)
        out = prox_one_norm(fit, x_k, alpha)

        def objective(u):
            return np.sum(np.abs(u - y)) + 0.5 * alpha * np.sum((u - x_k) ** 2)

        best = objective(out)
        perturbed = out[None, :] + 0.3 * rng.normal(size=(100000, 6))
        vals = (np.abs(perturbed - y).sum(axis=1)
                + 0.5 * alpha * ((perturbed - x_k) ** 2).sum(axis=1))
        assert best <= vals.min() + 1e-12
        # per-coordinate grid search around the solution
        for i in range(6):
            grid = out[i] + np.linspace(-1.0, 1.0, 2001)
            u = np.tile(out, (2001, 1))
            u[:, i] = grid
            vals = (np.abs(u - y).sum(axis=1) + 0.5 * alpha * ((u - x_k) ** 2).sum(axis=1))
            assert best <= vals.min() + 1e-12

    def test_non_identity_operator_rejected(self):
        with pytest.raises(UnsupportedCombinationError):
            OneNormFit(np.zeros(2), op=dense_operator(2 * np.eye(2)))
        with pytest.raises(UnsupportedCombinationError):
            OneNormFit(np.zeros(1), op=mask_operator([0], 2))

    def test_gradient_unsupported(self):
        fit = OneNormFit(np.zeros(2))
        with pytest.raises(UnsupportedCombinationError):
            fit.grad(np.ones(2))


class TestDataUpdateIterative:
    def test_identity_decoder_converges_to_closed_form(self):
        rng = np.random.default_rng(8)
        d = 4
        A = np.eye(d)
        y = rng.normal(size=d)
        z_k = rng.normal(size=d)
        alpha = 1.0
        qfit = QuadraticFit(dense_operator(A), y)
        closed = prox_quadratic(qfit, z_k, alpha)
        lfit = LatentFit(dense_operator(A), y, identity_decoder(d))
        out, trace = data_update_iterative(lfit, z_k, alpha, InnerSchedule(200, 0.5))
        assert np.linalg.norm(out - closed) < 1e-6

    def test_zero_steps_returns_start(self):
        fit = QuadraticFit(dense_operator(np.eye(3)), np.ones(3))
        z_k = np.array([0.1, 0.2, 0.3])
        out, trace = data_update_iterative(fit, z_k, 1.0, InnerSchedule(0, 0.1))
        assert np.array_equal(out, z_k)
        assert len(trace) == 1

    def test_zero_operator_stays_exactly(self):
        d = 3
        fit = LatentFit(dense_operator(np.zeros((d, d))), np.ones(d), identity_decoder(d))
        z_k = np.array([0.5, -0.5, 0.25])
        out, _ = data_update_iterative(fit, z_k, 2.0, InnerSchedule(20, 0.1))
        assert np.array_equal(out, z_k)

    def test_trace_is_monotone_with_armijo(self):
        rng = np.random.default_rng(9)
        dec = ToyDecoder([3, 8, 5], seed=2)
        A = rng.normal(size=(4, 5))
        y = rng.normal(size=4)
        fit = LatentFit(dense_operator(A), y, dec)
        _, trace = data_update_iterative(fit, rng.normal(size=3), 1.0, InnerSchedule(50, 0.5))
        diffs = np.diff(np.asarray(trace))
        assert np.all(diffs <= 1e-12)

    def test_quadratic_variant_approaches_prox(self):
        rng = np.random.default_rng(10)
        A = rng.normal(size=(5, 5)) * 0.5
        y = rng.normal(size=5)
        z_k = rng.normal(size=5)
        fit = QuadraticFit(dense_operator(A), y)
        closed = prox_quadratic(fit, z_k, 1.0)
        out, _ = data_update_iterative(fit, z_k, 1.0, InnerSchedule(300, 0.5))
        assert np.linalg.norm(out - closed) < 1e-6


class TestToyDecoder:
    def test_deterministic_under_seed(self):
        a = ToyDecoder([3, 8, 5], seed=4)
        b = ToyDecoder([3, 8, 5], seed=4)
        assert np.array_equal(a.params, b.params)

    def test_vjp_matches_finite_differences(self):
        dec = ToyDecoder([3, 7, 5], seed=5)
        rng = np.random.default_rng(11)
        z = rng.normal(size=3)
        w = rng.normal(size=5)
        out, acts = dec.decode_with_tape(z)
        g = dec.vjp(acts, w)
        eps = 1e-6
        fd = np.zeros(3)
        for i in range(3):
            zp, zm = z.copy(), z.copy()
            zp[i] += eps
            zm[i] -= eps
            fd[i] = (dec.decode(zp) @ w - dec.decode(zm) @ w) / (2 * eps)
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)

    def test_latent_fit_shape_checks(self):
        dec = ToyDecoder([3, 5], seed=0)
        with pytest.raises(ContractViolationError):
            LatentFit(dense_operator(np.eye(4)), np.zeros(4), dec)
