import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import metric_oracles as oracle
from scene_align.environment import NavigabilityMap
from scene_align.metrics import (MetricsAccumulator, a2a_collision_rate, avg_ade_fde, displacement,
                                 env_collision_rate, evaluate, jade_jfde, kde_nll, min_ade_fde,
                                 silverman_bandwidth)


def instance(seed, n=None, k=None, t=None):
    r = np.random.default_rng(seed)
    n = n or int(r.integers(1, 6))
    k = k or int(r.integers(1, 6))
    t = t or int(r.integers(1, 7))
    gt = r.normal(0, 2, size=(n, t, 2))
    return gt, gt[None] + r.normal(0, 1, size=(k, n, t, 2))


seeds = st.integers(0, 2 ** 32 - 1)


class TestDisplacement:
    def test_perfect_sample(self):
        gt, preds = instance(0, k=3)
        preds[1] = gt
        assert min_ade_fde(gt, preds) == (0.0, 0.0)
        assert jade_jfde(gt, preds) == (0.0, 0.0)

    def test_constant_offsets(self):
        gt = np.zeros((1, 5, 2))
        preds = np.stack([gt + [1.0, 0.0], gt + [0.0, 2.0]])
        assert min_ade_fde(gt, preds) == (1.0, 1.0)
        assert avg_ade_fde(gt, preds) == (1.5, 1.5)

    def test_jade_hand_example(self):
        gt = np.zeros((2, 1, 2))
        preds = np.array([[[[0.0, 0.0]], [[2.0, 0.0]]], [[[1.0, 0.0]], [[0.0, 1.0]]]])
        # sample A errors (0, 2), sample B errors (1, 1): tie at mean 1
        assert jade_jfde(gt, preds) == (1.0, 1.0)
        assert min_ade_fde(gt, preds) == (0.5, 0.5)

    def test_single_sample_degenerate(self):
        gt, preds = instance(3, k=1)
        assert avg_ade_fde(gt, preds) == min_ade_fde(gt, preds) == jade_jfde(gt, preds)

    def test_unsquared(self):
        gt = np.zeros((1, 1, 2))
        assert displacement(gt, np.full((1, 1, 1, 2), [3.0, 4.0]))[0, 0, 0] == 5.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            min_ade_fde(np.zeros((2, 3, 2)), np.zeros((1, 2, 4, 2)))

    @given(seeds)
    def test_oracles(self, seed):
        gt, preds = instance(seed)
        np.testing.assert_allclose(min_ade_fde(gt, preds), oracle.min_ade_fde(gt, preds), rtol=0, atol=1e-9)
        np.testing.assert_allclose(jade_jfde(gt, preds), oracle.jade_jfde(gt, preds), rtol=0, atol=1e-9)
        np.testing.assert_allclose(avg_ade_fde(gt, preds), oracle.avg_ade_fde(gt, preds), rtol=0, atol=1e-9)

    @given(seeds)
    def test_ordering(self, seed):
        gt, preds = instance(seed)
        for idx in range(2):
            assert min_ade_fde(gt, preds)[idx] <= jade_jfde(gt, preds)[idx] <= avg_ade_fde(gt, preds)[idx]

    @given(seeds, st.floats(-math.pi, math.pi), st.floats(-50, 50), st.floats(-50, 50))
    def test_rigid_invariance(self, seed, angle, dx, dy):
        gt, preds = instance(seed)
        rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        move = lambda a: a @ rot.T + [dx, dy]
        for fn in (min_ade_fde, jade_jfde, avg_ade_fde):
            np.testing.assert_allclose(fn(move(gt), move(preds)), fn(gt, preds), atol=1e-9)
        assert a2a_collision_rate(move(preds), 1.0) == a2a_collision_rate(preds, 1.0)


    @given(seeds, st.floats(-50, 50), st.floats(-50, 50))
    def test_kde_translation_invariance(self, seed, dx, dy):
        # axis-aligned product kernel: translation invariant, not rotation invariant
        gt, preds = instance(seed)
        shift = np.array([dx, dy])
        assert kde_nll(gt + shift, preds + shift) == pytest.approx(kde_nll(gt, preds), abs=1e-6)


class TestCollisions:
    def test_single_agent(self):
        assert a2a_collision_rate(np.zeros((3, 1, 4, 2))) == 0.0

    def test_shared_trajectory(self):
        p = np.random.default_rng(0).normal(size=(4, 1, 6, 2))
        assert a2a_collision_rate(np.concatenate([p, p], axis=1)) == 1.0

    def test_agent_counted_once(self):
        p = np.zeros((1, 3, 2, 2))
        p[0, 2] += 10.0
        # agents 0 and 1 overlap; agent 2 is far
        assert a2a_collision_rate(p) == pytest.approx(2 / 3)

    @given(seeds)
    def test_zero_threshold(self, seed):
        _, preds = instance(seed)
        assert a2a_collision_rate(preds, 0.0) == 0.0

    @given(seeds, st.floats(0.01, 3.0))
    def test_oracle(self, seed, threshold):
        _, preds = instance(seed)
        assert a2a_collision_rate(preds, threshold) == pytest.approx(oracle.a2a_rate(preds, threshold), abs=1e-12)

    def test_env_all_navigable(self):
        m = NavigabilityMap.open_area(20, 20, origin=(-10, -10))
        assert env_collision_rate(np.random.default_rng(0).uniform(-9, 9, size=(3, 2, 5, 2)), m) == 0.0

    def test_env_through_obstacle(self):
        grid = np.ones((100, 100), bool)
        grid[45:55, 45:55] = False
        m = NavigabilityMap(grid, (-5, -5), 0.1)
        p = np.random.default_rng(1).uniform(-4, 4, size=(2, 3, 4, 2))
        p[:, :, 2] = 0.0
        assert env_collision_rate(p, m) == 1.0

    @given(seeds)
    def test_env_oracle(self, seed):
        r = np.random.default_rng(seed)
        grid = r.random((20, 30)) < 0.8
        m = NavigabilityMap(grid, (-1.5, -1.0), 0.1)

        def navigable(x, y):
            row, col = math.floor((y + 1.0) / 0.1), math.floor((x + 1.5) / 0.1)
            return 0 <= row < 20 and 0 <= col < 30 and bool(grid[row, col])

        preds = r.uniform(-2, 2, size=(3, 2, 3, 2))
        assert env_collision_rate(preds, m) == oracle.env_rate(preds, navigable)


class TestKde:
    def test_clustered_on_gt(self):
        gt = np.zeros((1, 3, 2))
        preds = gt[None] + np.random.default_rng(0).normal(0, 0.01, size=(5, 1, 3, 2))
        assert kde_nll(gt, preds) < -3

    def test_far_from_gt(self):
        gt = np.zeros((1, 3, 2))
        preds = 100 + np.random.default_rng(0).normal(0, 0.5, size=(5, 1, 3, 2))
        assert kde_nll(gt, preds) > 1000

    def test_identical_samples_floor(self):
        h = silverman_bandwidth(np.ones((4, 2)))
        np.testing.assert_array_equal(h, [1e-3, 1e-3])

    def test_bandwidth_formula(self):
        s = np.random.default_rng(2).normal(size=(7, 2))
        expected = (4 / 4) ** (1 / 6) * 7 ** (-1 / 6) * s.std(axis=0, ddof=1)
        np.testing.assert_allclose(silverman_bandwidth(s), expected, rtol=1e-14)

    @given(seeds)
    def test_oracle(self, seed):
        gt, preds = instance(seed)
        assert kde_nll(gt, preds) == pytest.approx(oracle.kde_nll(gt, preds), abs=1e-6)


class TestAccumulator:
    def test_order_independent(self):
        items = [instance(s) for s in range(6)]
        a = evaluate(items).to_dict()
        b = evaluate(items[::-1]).to_dict()
        for key in ("min_ade", "jade", "avg_fde", "kde_nll", "a2a_collision_rate"):
            assert a[key] == pytest.approx(b[key], rel=1e-12)
        assert a["counts"] == b["counts"]

    def test_agent_weighting(self):
        items = [instance(1, n=1), instance(2, n=4)]
        rep = evaluate(items)
        expected = sum(min_ade_fde(g, p)[0] * g.shape[0] for g, p in items) / 5
        assert rep.min_ade == pytest.approx(expected, rel=1e-12)

    @given(st.lists(seeds, min_size=1, max_size=4))
    def test_ordering_aggregated(self, ss):
        rep = evaluate(instance(s) for s in ss)
        assert rep.min_ade <= rep.jade <= rep.avg_ade
        assert rep.min_fde <= rep.jfde <= rep.avg_fde
        assert 0 <= rep.a2a_collision_rate <= 1

    def test_report_json(self):
        gt, preds = instance(5)
        m = NavigabilityMap.open_area(100, 100, origin=(-50, -50))
        acc = MetricsAccumulator()
        acc.add(gt, preds, m)
        doc = json.loads(acc.report({"seed": 3}).to_json())
        assert doc["env_collision_rate"] == 0.0
        assert doc["config"]["collision_threshold"] == 0.2
        assert doc["config"]["bandwidth_rule"] == "silverman_per_dimension"
        assert doc["config"]["seed"] == 3
        assert set(doc["counts"]) == {"scenes", "agents", "samples"}

    def test_env_rate_absent_without_map(self):
        assert evaluate([instance(0)]).env_collision_rate is None

    def test_empty(self):
        with pytest.raises(ValueError):
            MetricsAccumulator().report()
