"""Tests for the mixed-metric multiscale nets."""

import numpy as np
import pytest

from ridgethin.nets import (
    HalfspaceMetric,
    MultiscaleNet,
    NetConfig,
    build_chain,
    build_net,
    kappa_d,
    mixed_distance,
    project,
    separation_count,
)


def random_metric(rng, d, n):
    omegas = rng.standard_normal((n, d))
    omegas /= np.linalg.norm(omegas, axis=1, keepdims=True)
    return HalfspaceMetric(omegas, rng.uniform(-1, 1, n))


def random_ball_points(rng, n, d):
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * rng.uniform(0, 1, (n, 1)) ** (1.0 / d)


SMALL_CFG = NetConfig(cap_per_level=4000, pool_factor=8, pool_min=2048, pool_max=16384)


class TestKappa:
    def test_d2_is_two_over_pi(self):
        assert kappa_d(2) == pytest.approx(2.0 / np.pi, abs=1e-10)

    def test_d3_is_half(self):
        assert kappa_d(3) == pytest.approx(0.5, abs=1e-10)

    def test_quadrature_matches_monte_carlo(self):
        rng = np.random.default_rng(0)
        for d in (4, 5):
            w = rng.standard_normal((200000, d))
            w /= np.linalg.norm(w, axis=1, keepdims=True)
            mc = np.abs(w[:, 0]).mean()
            assert kappa_d(d) == pytest.approx(mc, abs=5e-3)


class TestSeparationCount:
    def test_same_point_zero(self):
        rng = np.random.default_rng(1)
        metric = random_metric(rng, 2, 50)
        x = np.array([0.3, -0.2])
        assert separation_count(metric, x, x) == 0

    def test_single_halfspace(self):
        metric = HalfspaceMetric(np.array([[1.0, 0.0]]), np.array([0.0]))
        assert separation_count(metric, [0.5, 0.0], [-0.5, 0.0]) == 1
        assert separation_count(metric, [0.5, 0.0], [0.25, 0.0]) == 0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        metric = random_metric(rng, 3, 200)
        for _ in range(25):
            x = random_ball_points(rng, 1, 3)[0]
            z = random_ball_points(rng, 1, 3)[0]
            brute = sum(
                (float(o @ x + b) >= 0) != (float(o @ z + b) >= 0)
                for o, b in zip(metric.omegas, metric.offsets)
            )
            assert separation_count(metric, x, z) == brute


class TestMixedDistance:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(3)
        metric = random_metric(rng, 2, 64)
        x = np.array([0.1, 0.4])
        assert mixed_distance(metric, x, x) == 0.0

    def test_formula(self):
        rng = np.random.default_rng(4)
        metric = random_metric(rng, 2, 64)
        x = random_ball_points(rng, 1, 2)[0]
        z = random_ball_points(rng, 1, 2)[0]
        expected = 0.5 * (kappa_d(2) * np.linalg.norm(x - z) / 2.0) + 0.5 * (
            separation_count(metric, x, z) / 64.0
        )
        assert mixed_distance(metric, x, z) == pytest.approx(expected, rel=1e-12)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(5)
        metric = random_metric(rng, 2, 80)
        for _ in range(50):
            x, y, z = random_ball_points(rng, 3, 2)
            assert mixed_distance(metric, x, z) <= (
                mixed_distance(metric, x, y) + mixed_distance(metric, y, z) + 1e-12
            )


class TestBuildNet:
    def test_huge_delta_single_point(self):
        rng = np.random.default_rng(6)
        metric = random_metric(rng, 2, 40)
        pool = random_ball_points(rng, 500, 2)
        net = build_net(metric, 2.0, pool)
        assert net.size == 1

    def test_idempotent_on_own_points(self):
        rng = np.random.default_rng(7)
        metric = random_metric(rng, 2, 100)
        pool = random_ball_points(rng, 2000, 2)
        net = build_net(metric, 0.25, pool)
        again = build_net(metric, 0.25, net.points.copy())
        np.testing.assert_array_equal(net.points, again.points)

    def test_packing_exact(self):
        rng = np.random.default_rng(8)
        metric = random_metric(rng, 2, 100)
        pool = random_ball_points(rng, 3000, 2)
        delta = 1.0 / 8
        net = build_net(metric, delta, pool)
        assert net.min_pairwise_dmu() >= delta / 2

    def test_haussler_cardinality(self):
        # |net| <= (2 * 50 / delta)^d at delta = 1/8 for 500 reference atoms.
        rng = np.random.default_rng(9)
        metric = random_metric(rng, 2, 500)
        pool = random_ball_points(rng, 5000, 2)
        net = build_net(metric, 1.0 / 8, pool)
        assert net.size <= (100.0 * 8) ** 2

    def test_empty_pool_rejected(self):
        rng = np.random.default_rng(10)
        metric = random_metric(rng, 2, 10)
        with pytest.raises(ValueError):
            build_net(metric, 0.5, np.empty((0, 2)))


class TestProject:
    def test_net_point_projects_to_itself(self):
        rng = np.random.default_rng(11)
        metric = random_metric(rng, 2, 60)
        net = build_net(metric, 0.25, random_ball_points(rng, 1000, 2))
        for i in range(0, net.size, 3):
            got = project(net, metric, net.points[i])
            np.testing.assert_array_equal(got, net.points[i])

    def test_single_point_net(self):
        rng = np.random.default_rng(12)
        metric = random_metric(rng, 2, 30)
        net = build_net(metric, 2.0, random_ball_points(rng, 100, 2))
        x = random_ball_points(rng, 1, 2)[0]
        np.testing.assert_array_equal(project(net, metric, x), net.points[0])


class TestMultiscale:
    def test_level_count(self):
        rng = np.random.default_rng(13)
        metric = random_metric(rng, 2, 100)
        ms = MultiscaleNet(metric, SMALL_CFG)
        assert ms.L == 7  # 2^7 = 128 > 100
        assert len(ms.levels) == 7

    def test_links_satisfy_covering_bounds(self):
        # Every level-l point's link obeys the Euclidean and separation
        # bounds at scale delta_{l-1}, by construction.
        rng = np.random.default_rng(14)
        metric = random_metric(rng, 2, 150)
        ms = MultiscaleNet(metric, SMALL_CFG)
        kappa = kappa_d(2)
        for l in range(2, ms.L + 1):
            net = ms.levels[l - 1]
            coarse = ms.levels[l - 2]
            delta = ms.delta(l - 1)
            for i in range(net.size):
                j = net.link[i]
                assert j >= 0
                z = coarse.points[j]
                assert np.linalg.norm(net.points[i] - z) <= 2 * delta / kappa + 1e-12
                assert separation_count(metric, net.points[i], z) <= delta * 150

    def test_packing_all_levels(self):
        rng = np.random.default_rng(15)
        metric = random_metric(rng, 2, 120)
        ms = MultiscaleNet(metric, SMALL_CFG)
        for l in range(1, ms.L + 1):
            assert ms.levels[l - 1].min_pairwise_dmu() >= ms.delta(l) / 2

    def test_covering_stats_zero_failures(self):
        rng = np.random.default_rng(16)
        metric = random_metric(rng, 2, 100)
        ms = MultiscaleNet(metric, SMALL_CFG)
        samples = random_ball_points(rng, 500, 2)
        c1 = 3.0
        for l in (1, ms.L // 2 + 1, ms.L):
            eu, sep = ms.covering_stats(samples, l, admit=True)
            assert np.all(eu <= c1 * ms.delta(l) * np.sqrt(2) + 1e-12)
            assert np.all(sep <= ms.delta(l) * 100)

    def test_chain_of_coarse_net_point_is_constant(self):
        # Level-1 points are prepended to every finer pool and re-admitted,
        # so they belong to every level and their chains are constant.
        rng = np.random.default_rng(17)
        metric = random_metric(rng, 2, 40)
        ms = MultiscaleNet(metric, SMALL_CFG)
        x = ms.levels[0].points[0].copy()
        chain = build_chain(ms, x, admit=False)
        for pt in chain:
            np.testing.assert_array_equal(pt, x)

    def test_chain_steps_decay(self):
        rng = np.random.default_rng(18)
        metric = random_metric(rng, 2, 200)
        ms = MultiscaleNet(metric, SMALL_CFG)
        ratios = []
        for x in random_ball_points(rng, 40, 2):
            chain = build_chain(ms, x, admit=True)
            steps = [
                np.linalg.norm(chain[i + 1] - chain[i])
                for i in range(len(chain) - 1)
            ]
            for a, b in zip(steps, steps[1:]):
                if a > 1e-12:
                    ratios.append(b / a)
        assert np.mean(ratios) <= 0.75

    def test_single_level_chain(self):
        rng = np.random.default_rng(19)
        metric = random_metric(rng, 2, 1)
        ms = MultiscaleNet(metric, SMALL_CFG)
        assert ms.L == 1
        x = np.array([0.2, 0.2])
        chain = build_chain(ms, x, admit=True)
        assert len(chain) == 1

    def test_dump_roundtrip(self, tmp_path):
        rng = np.random.default_rng(20)
        metric = random_metric(rng, 2, 30)
        ms = MultiscaleNet(metric, SMALL_CFG)
        path = tmp_path / "net.json"
        ms.dump_json(path)
        import json

        with open(path) as fh:
            blob = json.load(fh)
        assert len(blob["levels"]) == ms.L
        assert blob["levels"][0]["size"] == ms.levels[0].size
