"""Tests for ridge-atom derivative calculus and the multiscale decomposition."""

import numpy as np
import pytest

from ridgethin.reluk import (
    Atom,
    DiscreteMeasure,
    SignedNetwork,
    decomposition_gammas,
    derivative_tensor,
    deriv_coef,
    measure_derivative,
    measure_derivative_grid,
    phi,
    taylor,
    verify_decomposition,
)
from ridgethin.tensors import inf_norm


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_atom(rng, d):
    return Atom(unit(rng.standard_normal(d)), rng.uniform(-1, 1))


def random_ball_point(rng, d):
    x = rng.standard_normal(d)
    return x / np.linalg.norm(x) * rng.uniform(0, 1) ** (1.0 / d)


class TestDerivativeTensor:
    def test_k2_m1_plug_in(self):
        theta = Atom([1.0, 0.0], 0.0)
        t = derivative_tensor(theta, [0.5, 0.0], 1, 2)
        np.testing.assert_allclose(t.array, [1.0, 0.0])

    def test_inactive_halfspace_is_zero(self):
        theta = Atom([1.0, 0.0], -0.5)
        t = derivative_tensor(theta, [0.0, 0.7], 2, 2)
        np.testing.assert_array_equal(t.array, np.zeros((2, 2)))

    def test_k2_m0_plug_in(self):
        theta = Atom([1.0, 0.0], 0.25)
        t = derivative_tensor(theta, [0.5, 0.0], 0, 2)
        assert t.item() == pytest.approx(0.5625, abs=1e-15)

    def test_heaviside_boundary_active(self):
        # k=0 at the kink: 0^0 = 1 on the closed active branch.
        theta = Atom([1.0, 0.0], -0.5)
        assert derivative_tensor(theta, [0.5, 0.0], 0, 0).item() == 1.0
        assert derivative_tensor(theta, [0.49, 0.0], 0, 0).item() == 0.0

    def test_order_exceeding_k_rejected(self):
        with pytest.raises(ValueError):
            derivative_tensor(Atom([1.0, 0.0], 0.0), [0.1, 0.1], 2, 1)

    def test_symmetric_under_index_permutation(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            theta = random_atom(rng, 3)
            t = derivative_tensor(theta, random_ball_point(rng, 3), 2, 3).array
            np.testing.assert_array_equal(t, t.T)

    def test_finite_difference_oracle(self):
        # d/dx_i of the order-(m-1) tensor equals the order-m tensor with the
        # new index in front, checked at kink-avoiding points.
        rng = np.random.default_rng(4)
        h = 1e-6
        checked = 0
        while checked < 50:
            d, k = (2, 2) if checked % 2 == 0 else (3, 2)
            theta = random_atom(rng, d)
            x = random_ball_point(rng, d)
            if abs(theta.margin(x)) < 1e-2:
                continue
            m = int(rng.integers(1, k + 1))
            exact = derivative_tensor(theta, x, m, k).array
            for i in range(d):
                e = np.zeros(d)
                e[i] = h
                fd = (
                    derivative_tensor(theta, x + e, m - 1, k).array
                    - derivative_tensor(theta, x - e, m - 1, k).array
                ) / (2 * h)
                np.testing.assert_allclose(fd, exact[i], rtol=2e-5, atol=1e-7)
            checked += 1


class TestTaylor:
    def test_same_point_reduces_to_derivative(self):
        rng = np.random.default_rng(5)
        theta = random_atom(rng, 2)
        x = random_ball_point(rng, 2)
        for r in range(0, 3):
            t = taylor(theta, x, x, 0, r, 2)
            expected = derivative_tensor(theta, x, 0, 2)
            assert t.allclose(expected)

    def test_reproduces_polynomial_on_active_halfspace(self):
        # Full-degree expansion is exact when both points are active.
        rng = np.random.default_rng(6)
        done = 0
        while done < 40:
            d = int(rng.integers(2, 4))
            k = int(rng.integers(1, 4))
            theta = random_atom(rng, d)
            x1, x2 = random_ball_point(rng, d), random_ball_point(rng, d)
            if theta.margin(x1) < 1e-3 or theta.margin(x2) < 1e-3:
                continue
            m = int(rng.integers(0, k + 1))
            t = taylor(theta, x1, x2, m, k - m, k)
            expected = derivative_tensor(theta, x2, m, k)
            assert t.allclose(expected, rtol=1e-10, atol=1e-12)
            done += 1

    def test_r0_ignores_target_point(self):
        rng = np.random.default_rng(7)
        theta = random_atom(rng, 3)
        x1, x2 = random_ball_point(rng, 3), random_ball_point(rng, 3)
        t = taylor(theta, x1, x2, 1, 0, 2)
        assert t.allclose(derivative_tensor(theta, x1, 1, 2))

    def test_m_plus_r_over_k_rejected(self):
        with pytest.raises(ValueError):
            taylor(Atom([0.0, 1.0], 0.0), [0.1, 0.0], [0.2, 0.0], 1, 2, 2)


class TestPhi:
    def test_vanishes_on_sign_agreement(self):
        rng = np.random.default_rng(8)
        hits = 0
        while hits < 60:
            d, k = 2, 2
            theta = random_atom(rng, d)
            x = random_ball_point(rng, d)
            proj = random_ball_point(rng, d)
            if (theta.margin(x) >= 0) != (theta.margin(proj) >= 0):
                continue
            for m in range(k + 1):
                assert inf_norm(phi(theta, x, proj, m, k)) <= 1e-12
            hits += 1

    def test_no_projection_is_raw_derivative(self):
        rng = np.random.default_rng(9)
        theta = random_atom(rng, 3)
        x = random_ball_point(rng, 3)
        assert phi(theta, x, None, 1, 2).allclose(derivative_tensor(theta, x, 1, 2))

    def test_norm_bound_at_scale(self):
        # ||phi|| <= (k!/(k-m)!) * |x - proj|^{k-m} when the pair is separated.
        rng = np.random.default_rng(10)
        for _ in range(1000):
            d = int(rng.integers(2, 4))
            k = int(rng.integers(0, 4))
            m = int(rng.integers(0, k + 1))
            level = int(rng.integers(1, 9))
            x = random_ball_point(rng, d)
            step = rng.standard_normal(d)
            step *= 2.0 ** (-level) * rng.uniform(0, 1) / np.linalg.norm(step)
            proj = x + step
            theta = random_atom(rng, d)
            bound = deriv_coef(k, m) * 2.0 ** (-level * (k - m)) + 1e-14
            assert inf_norm(phi(theta, x, proj, m, k)) <= bound


class TestMeasureDerivative:
    def test_single_atom_weight_one(self):
        rng = np.random.default_rng(11)
        theta = random_atom(rng, 2)
        tau = DiscreteMeasure(theta.omega[None, :], [theta.b], [1.0])
        x = random_ball_point(rng, 2)
        got = measure_derivative(tau, x, 1, 2)
        assert got.allclose(derivative_tensor(theta, x, 1, 2))

    def test_duplicate_atom_convexity(self):
        rng = np.random.default_rng(12)
        theta = random_atom(rng, 3)
        tau = DiscreteMeasure(
            np.vstack([theta.omega, theta.omega]), [theta.b, theta.b], [0.5, 0.5]
        )
        x = random_ball_point(rng, 3)
        got = measure_derivative(tau, x, 0, 1)
        assert got.allclose(derivative_tensor(theta, x, 0, 1))

    def test_finite_difference_reconstruction(self):
        # Central differences of the m=0 values recover the m=1 tensor to
        # 1e-5 relative at points 1e-2 away from every kink.
        rng = np.random.default_rng(13)
        d, k, n = 2, 2, 40
        omegas = np.array([unit(rng.standard_normal(d)) for _ in range(n)])
        offsets = rng.uniform(-1, 1, n)
        weights = rng.dirichlet(np.ones(n))
        tau = DiscreteMeasure(omegas, offsets, weights)
        h = 1e-4
        checked = 0
        while checked < 20:
            x = random_ball_point(rng, d)
            if np.min(np.abs(omegas @ x + offsets)) < 1e-2:
                continue
            grad = measure_derivative(tau, x, 1, k).array
            scale = max(np.max(np.abs(grad)), 1e-12)
            for i in range(d):
                e = np.zeros(d)
                e[i] = h
                fd = (
                    measure_derivative(tau, x + e, 0, k).item()
                    - measure_derivative(tau, x - e, 0, k).item()
                ) / (2 * h)
                assert abs(fd - grad[i]) / scale < 1e-5
            checked += 1

    def test_grid_path_matches_pointwise(self):
        rng = np.random.default_rng(14)
        d, k, n = 3, 2, 25
        omegas = np.array([unit(rng.standard_normal(d)) for _ in range(n)])
        tau = DiscreteMeasure(omegas, rng.uniform(-1, 1, n), rng.dirichlet(np.ones(n)))
        X = np.array([random_ball_point(rng, d) for _ in range(7)])
        for m in range(k + 1):
            grid = measure_derivative_grid(tau, X, m, k)
            for g, x in zip(grid, X):
                expected = measure_derivative(tau, x, m, k)
                np.testing.assert_allclose(g, expected.flat, rtol=1e-12, atol=1e-15)


def geometric_chain(rng, d, L, ratio=0.5, scale=0.5):
    """A synthetic projection chain with geometrically shrinking steps."""
    pts = [random_ball_point(rng, d) * 0.3]
    for l in range(1, L):
        step = rng.standard_normal(d)
        step *= scale * ratio**l / np.linalg.norm(step)
        pts.append(pts[-1] + step)
    return pts


class TestDecomposition:
    def test_m_equals_k_has_no_gammas(self):
        rng = np.random.default_rng(15)
        chain = geometric_chain(rng, 2, 5)
        x = chain[-1] + rng.standard_normal(2) * 0.01
        gam = decomposition_gammas(chain, x, 2, 2)
        assert gam.gammas == {}

    def test_first_order_gamma_is_hand_rolled_sum(self):
        # For k - m = 1 the only correction is sum_p (x_{p+1} - x_p) plus the
        # tail, i.e. x - x_l.
        rng = np.random.default_rng(16)
        chain = geometric_chain(rng, 3, 6)
        x = chain[-1] + rng.standard_normal(3) * 0.005
        gam = decomposition_gammas(chain, x, 1, 2)
        for l in range(1, 7):
            np.testing.assert_allclose(
                gam.gammas[(1, l)].array, x - chain[l - 1], atol=1e-14
            )

    def test_norm_decay_bound(self):
        # ||Gamma_{i,l}|| <= C 2^{-i l} over 100 random geometric chains.
        rng = np.random.default_rng(17)
        C = 8.0
        for _ in range(100):
            d = int(rng.integers(2, 4))
            L = int(rng.integers(3, 9))
            chain = geometric_chain(rng, d, L)
            x = chain[-1] + rng.standard_normal(d) * 2.0 ** (-L)
            gam = decomposition_gammas(chain, x, 0, 3)
            assert gam.check_decay(C)

    def test_identity_inactive_everywhere(self):
        rng = np.random.default_rng(18)
        chain = geometric_chain(rng, 2, 5)
        x = chain[-1] + rng.standard_normal(2) * 0.01
        # Atom far from all chain points: margin negative everywhere.
        theta = Atom(unit(-(x / np.linalg.norm(x))), -0.99)
        if all(theta.margin(p) < 0 for p in chain + [x]):
            check = verify_decomposition(theta, x, chain, 0, 2)
            assert check.residual == 0.0

    def test_identity_telescoping_m_equals_k(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            d, k = 2, 2
            chain = geometric_chain(rng, d, 6)
            x = chain[-1] + rng.standard_normal(d) * 0.004
            theta = random_atom(rng, d)
            check = verify_decomposition(theta, x, chain, k, k)
            if check.agrees_at_bottom:
                assert check.residual <= 1e-12

    def test_identity_random_draws(self):
        # Load-bearing check: the full reconstruction matches the derivative
        # tensor whenever the atom does not separate x from the chain bottom.
        rng = np.random.default_rng(20)
        agree = 0
        for _ in range(300):
            d = int(rng.integers(2, 4))
            k = int(rng.integers(0, 4))
            m = int(rng.integers(0, k + 1))
            chain = geometric_chain(rng, d, int(rng.integers(2, 7)))
            x = chain[-1] + rng.standard_normal(d) * 0.004
            theta = random_atom(rng, d)
            check = verify_decomposition(theta, x, chain, m, k)
            if check.agrees_at_bottom:
                agree += 1
                assert check.residual <= 1e-8
        assert agree > 200

    def test_disagreement_reported(self):
        rng = np.random.default_rng(21)
        found = 0
        for _ in range(500):
            chain = geometric_chain(rng, 2, 4)
            x = chain[-1] + rng.standard_normal(2) * 0.05
            theta = random_atom(rng, 2)
            check = verify_decomposition(theta, x, chain, 0, 1)
            if not check.agrees_at_bottom:
                assert check.first_disagreeing_level is not None
                found += 1
        assert found > 0


class TestMeasureIO:
    def test_json_roundtrip_renormalizes(self, tmp_path):
        rng = np.random.default_rng(22)
        n, d = 10, 3
        omegas = np.array([unit(rng.standard_normal(d)) for _ in range(n)])
        tau = DiscreteMeasure(omegas, rng.uniform(-1, 1, n), rng.dirichlet(np.ones(n)))
        path = tmp_path / "m.json"
        tau.to_json(path)
        back = DiscreteMeasure.from_json(path)
        np.testing.assert_allclose(back.omegas, tau.omegas, atol=1e-15)
        np.testing.assert_allclose(back.weights, tau.weights, atol=1e-15)

    def test_probability_mass_validated(self):
        with pytest.raises(ValueError):
            DiscreteMeasure(np.array([[1.0, 0.0]]), [0.0], [0.5], "probability")

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            DiscreteMeasure(
                np.array([[1.0, 0.0]]), [0.0], [-0.1], "subprobability"
            )

    def test_signed_network_ell1(self):
        net = SignedNetwork(
            np.array([[1.0, 0.0], [0.0, 1.0]]), [0.0, 0.1], [0.25, -0.5]
        )
        assert net.ell1_bound == pytest.approx(0.75)
        with pytest.raises(ValueError):
            SignedNetwork(
                np.array([[1.0, 0.0]]), [0.0], [0.25], ell1_bound=0.5
            )
